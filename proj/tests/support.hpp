#pragma once

// Shared fixtures for the unit tests.

#include <vector>

#include "ttg/backbone.hpp"
#include "ttg/metatrain.hpp"
#include "ttg/paramgen.hpp"
#include "ttg/rng.hpp"
#include "ttg/synthdata.hpp"

namespace ttg::testing {

inline std::vector<data::DomainDataset> small_domains(std::uint64_t seed = 0, std::size_t n = 60) {
  return data::make_rotated_domains(seed, {0, 30, 60, 90}, n, 5);
}

inline Tensor batch_of(const data::DomainDataset& ds, std::size_t begin, std::size_t end) {
  return ds.inputs.slice_rows(begin, end);
}

inline LabeledBatch labeled(const data::DomainDataset& ds, std::size_t begin, std::size_t end) {
  return {ds.inputs.slice_rows(begin, end), std::vector<int>(ds.labels.begin() + static_cast<long>(begin),
                                                             ds.labels.begin() + static_cast<long>(end))};
}

// A backbone after a few supervised steps, so running statistics and
// weights are away from their initial values.
inline Backbone warmed_backbone(std::uint64_t seed = 0, std::size_t steps = 20) {
  const auto ds = small_domains(seed);
  Backbone model(BackboneSpec{}, seed);
  Adam opt(AdamConfig{.lr = 1e-3});
  for (std::size_t s = 0; s < steps; ++s) {
    const auto& d = ds[s % ds.size()];
    const std::size_t b = (s * 16) % (d.size() - 16);
    meta_source_step(model, opt, labeled(d, b, b + 16));
  }
  return model;
}

// Gives the zero-initialized output projections small random values so that
// generation is no longer the identity.
inline void perturb_outputs(Generator& g, std::uint64_t seed, double scale = 0.05) {
  Rng rng(seed);
  for (auto& [name, t] : g.parameters())
    if (name.rfind("out.", 0) == 0)
      for (double& v : t.values()) v = scale * rng.normal();
}

}  // namespace ttg::testing
