#include "ttg/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace ttg {

void Adam::step(TensorMap& params, const TensorMap& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("adam: gradient for unknown parameter '" + name + "'");
    Tensor& p = it->second;
    if (p.shape() != g.shape()) throw std::invalid_argument("adam: shape mismatch for '" + name + "'");
    auto [mi, fresh_m] = m_.try_emplace(name, p.shape());
    auto [vi, fresh_v] = v_.try_emplace(name, p.shape());
    Tensor& m = mi->second;
    Tensor& v = vi->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      p[i] -= config_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
    }
  }
}

TensorMap Adam::state() const {
  TensorMap out;
  for (const auto& [k, t] : m_) out.emplace("m." + k, t);
  for (const auto& [k, t] : v_) out.emplace("v." + k, t);
  return out;
}

void Adam::load_state(const TensorMap& state, std::uint64_t steps) {
  m_.clear();
  v_.clear();
  for (const auto& [k, t] : state) {
    if (k.rfind("m.", 0) == 0)
      m_.emplace(k.substr(2), t);
    else if (k.rfind("v.", 0) == 0)
      v_.emplace(k.substr(2), t);
    else
      throw std::invalid_argument("adam: unexpected state entry '" + k + "'");
  }
  t_ = steps;
}

}  // namespace ttg
