#include "ttg/tensor.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ttg {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != numel(shape_))
    throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size())
    throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (shape_.empty() || begin > end || end > shape_[0])
    throw std::out_of_range("slice_rows out of range");
  const std::size_t stride = shape_[0] ? data_.size() / shape_[0] : 0;
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s), std::vector<double>(data_.begin() + begin * stride,
                                                  data_.begin() + end * stride));
}

Tensor Tensor::row(std::size_t r) const {
  Tensor t = slice_rows(r, r + 1);
  Shape s(shape_.begin() + 1, shape_.end());
  return t.reshaped(s);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

double sum(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v;
  return s;
}

std::uint32_t crc32_of(const Tensor& t) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (std::size_t d : t.shape()) {
    const std::uint64_t v = d;
    crc = crc32(crc, reinterpret_cast<const Bytef*>(&v), sizeof v);
  }
  crc = crc32(crc, reinterpret_cast<const Bytef*>(t.data()),
              static_cast<uInt>(t.size() * sizeof(double)));
  return static_cast<std::uint32_t>(crc);
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  Shape s = parts.front().shape();
  std::size_t rows = 0;
  std::vector<double> data;
  for (const Tensor& p : parts) {
    if (p.rank() != s.size() || !std::equal(p.shape().begin() + 1, p.shape().end(), s.begin() + 1))
      throw std::invalid_argument("concat_rows: trailing shape mismatch");
    rows += p.dim(0);
    data.insert(data.end(), p.values().begin(), p.values().end());
  }
  s[0] = rows;
  return Tensor(std::move(s), std::move(data));
}

bool bitwise_equal(const TensorMap& a, const TensorMap& b) {
  if (a.size() != b.size()) return false;
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib)
    if (ia->first != ib->first || !bitwise_equal(ia->second, ib->second)) return false;
  return true;
}

std::uint32_t crc32_of(const TensorMap& m) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& [name, t] : m) {
    crc = crc32(crc, reinterpret_cast<const Bytef*>(name.data()), static_cast<uInt>(name.size()));
    const std::uint32_t c = crc32_of(t);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(&c), sizeof c);
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace ttg
