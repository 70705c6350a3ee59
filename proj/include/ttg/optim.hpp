#pragma once

#include <cstdint>
#include <string>

#include "ttg/tensor.hpp"

namespace ttg {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a named tensor map. Moments are created lazily per name; only
// names present in the gradient map are updated.
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig config) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  std::uint64_t steps() const { return t_; }

  void step(TensorMap& params, const TensorMap& grads);

  // Moments as "m.<name>" / "v.<name>"; the step count travels separately.
  TensorMap state() const;
  void load_state(const TensorMap& state, std::uint64_t steps);

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  TensorMap m_;
  TensorMap v_;
};

}  // namespace ttg
