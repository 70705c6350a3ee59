#pragma once

// Deterministic multi-domain image datasets built from procedural glyphs.
//
// Three shift families are produced:
//   * rotated domains (input-level shift): one domain per rotation angle,
//   * category-shift splits (output-level): each source domain keeps a
//     disjoint subset of the classes,
//   * subpopulation domains (feature-level): each superclass is drawn in
//     several styles; source and target use disjoint style sets.

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttg/tensor.hpp"

namespace ttg::data {

struct DomainDataset {
  int domain_id = 0;
  Tensor inputs;            // [N, 1, S, S], values in [0, 1]
  std::vector<int> labels;  // [N] in [0, K)
  std::vector<int> groups;  // per-sample subpopulation id (variant), or -1
  int n_classes = 0;
  nlohmann::json meta;

  std::size_t size() const { return labels.size(); }
};

struct DomainBatch {
  Tensor inputs;
  std::vector<int> labels;
  // For analysis only; never handed to adaptation strategies.
  std::vector<int> domain_ids;

  std::size_t size() const { return labels.size(); }
};

enum class OrderPolicy { single_domain, interleaved_random };

std::string to_string(OrderPolicy p);
OrderPolicy parse_order_policy(const std::string& s);

struct DomainStream {
  std::vector<DomainBatch> batches;
  OrderPolicy policy = OrderPolicy::single_domain;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
};

// ---- image primitives ----

// Counter-clockwise rotation of a square single-channel image [S, S] about
// its center, bilinear sampling, zero outside the source image.
Tensor rotate_image(const Tensor& image, double degrees);
Tensor flip_horizontal(const Tensor& image);
Tensor flip_vertical(const Tensor& image);

// Applies an image -> image map to every [S,S] plane of an [N,1,S,S] batch.
template <typename F>
Tensor map_planes(const Tensor& batch, F&& f) {
  const std::size_t n = batch.dim(0), s = batch.dim(2);
  Tensor out(batch.shape());
  for (std::size_t i = 0; i < n; ++i) {
    Tensor plane = batch.slice_rows(i, i + 1).reshaped({s, s});
    Tensor mapped = f(plane);
    std::copy(mapped.data(), mapped.data() + s * s, out.data() + i * s * s);
  }
  return out;
}

// Unrotated rendering of sample `index` of class `label` (the base glyph
// that make_rotated_domains rotates).
Tensor render_base_sample(std::uint64_t seed, int label, std::size_t index, std::size_t image_size);

// ---- generators ----

std::vector<DomainDataset> make_rotated_domains(std::uint64_t seed, const std::vector<double>& angles,
                                                std::size_t n_per_domain, int n_classes,
                                                std::size_t image_size = 16);

using ClassAssignment = std::map<int, std::set<int>>;  // domain_id -> classes kept

std::vector<DomainDataset> make_category_shift_split(const std::vector<DomainDataset>& datasets,
                                                     const ClassAssignment& assignment);

struct SubpopulationSplit {
  DomainDataset source;
  DomainDataset target;
};

SubpopulationSplit make_subpopulation_domains(std::uint64_t seed, int n_super, int subs_per_super,
                                              std::size_t n_per_sub, std::size_t image_size = 16);

// Splits a dataset into one dataset per distinct group id (domain ids 0..G-1).
std::vector<DomainDataset> split_by_group(const DomainDataset& ds);

DomainDataset subset(const DomainDataset& ds, const std::vector<std::size_t>& indices);
// Deterministic per-dataset split; the second part holds round(fraction * N) samples.
std::pair<DomainDataset, DomainDataset> holdout_split(const DomainDataset& ds, double fraction,
                                                      std::uint64_t seed);

DomainStream stream(const std::vector<DomainDataset>& datasets, std::size_t batch_size, OrderPolicy policy,
                    std::uint64_t seed);

// ---- persistence: raw little-endian float32 inputs, int32 labels, JSON manifest ----

void export_datasets(const std::filesystem::path& dir, const std::vector<DomainDataset>& datasets,
                     const nlohmann::json& generator_args);
std::vector<DomainDataset> import_datasets(const std::filesystem::path& dir);

}  // namespace ttg::data
