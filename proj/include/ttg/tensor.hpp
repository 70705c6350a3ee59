#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace ttg {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor of doubles with value semantics.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // rank-2 element access
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  Tensor reshaped(Shape shape) const;
  // Rows [begin, end) of the leading dimension.
  Tensor slice_rows(std::size_t begin, std::size_t end) const;
  Tensor row(std::size_t r) const;

  void fill(double v);

 private:
  Shape shape_;
  std::vector<double> data_;
};

// memcmp-level equality, shapes included.
bool bitwise_equal(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& t);
double sum(const Tensor& t);
std::uint32_t crc32_of(const Tensor& t);

// Concatenate along the leading dimension; trailing dims must agree.
Tensor concat_rows(std::span<const Tensor> parts);

using TensorMap = std::map<std::string, Tensor>;

bool bitwise_equal(const TensorMap& a, const TensorMap& b);
std::uint32_t crc32_of(const TensorMap& m);

}  // namespace ttg
