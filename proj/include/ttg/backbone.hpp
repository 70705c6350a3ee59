#pragma once

// Small convolutional classifier with BatchNorm at every block.
//
// Architecture: n_blocks x (conv3x3 -> BN -> ReLU -> maxpool2), global average
// pooling, bias-free linear classifier. The BN affine vectors and the
// classifier matrix are "slots": tensors that may be substituted per call
// without touching the stored weights.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttg/autograd.hpp"
#include "ttg/tensor.hpp"

namespace ttg {

struct BackboneSpec {
  std::size_t in_channels = 1;
  std::size_t image_size = 16;
  std::vector<std::size_t> channels{8, 16, 32};
  int n_classes = 5;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  std::size_t n_blocks() const { return channels.size(); }
  std::size_t feature_dim() const { return channels.back(); }
  void validate() const;
};

void to_json(nlohmann::json& j, const BackboneSpec& s);
void from_json(const nlohmann::json& j, BackboneSpec& s);

enum class SlotKind { bn_gamma, bn_beta, classifier };
std::string to_string(SlotKind k);

struct ParameterSlot {
  std::string id;
  SlotKind kind;
  Shape shape;
  int depth;  // 1..L for BN slots, 0 for the classifier
};

std::string gamma_slot(std::size_t layer);  // "bn<l>.gamma", 1-based
std::string beta_slot(std::size_t layer);
inline constexpr const char* kClassifierSlot = "classifier";

// Values for a subset of the generatable slots.
class ParamSet {
 public:
  ParamSet() = default;
  explicit ParamSet(TensorMap entries) : entries_(std::move(entries)) {}

  bool contains(const std::string& id) const { return entries_.count(id) != 0; }
  const Tensor& at(const std::string& id) const;
  void set(const std::string& id, Tensor value) { entries_[id] = std::move(value); }
  std::vector<std::string> ids() const;
  const TensorMap& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  // Shapes match the declared slots and all values are finite.
  void validate(const std::vector<ParameterSlot>& slots) const;

 private:
  TensorMap entries_;
};

struct BNStats {
  std::vector<Tensor> mean;
  std::vector<Tensor> var;
  double momentum = 0.1;
};

enum class NormMode {
  running,  // normalize with the stored running statistics
  batch,    // normalize with the current batch's statistics
};

// z_hat = gamma * (z - mean) / sqrt(var + eps) + beta, per channel.
Tensor bn_apply(const Tensor& z, const Tensor& mean, const Tensor& var, const Tensor& gamma, const Tensor& beta,
                double eps);

class Backbone {
 public:
  Backbone() = default;
  Backbone(BackboneSpec spec, std::uint64_t seed);

  const BackboneSpec& spec() const { return spec_; }

  std::vector<ParameterSlot> list_slots() const;
  std::vector<std::string> slot_ids() const;
  ParamSet extract(const std::vector<std::string>& ids) const;
  ParamSet extract_all() const { return extract(slot_ids()); }

  // Inference with running statistics; injected slots replace the stored
  // values for this call only.
  Tensor forward(const Tensor& x, const ParamSet* injected = nullptr) const;
  Tensor features(const Tensor& x, const ParamSet* injected = nullptr) const;

  struct Output {
    ag::Var features;
    ag::Var logits;
    std::vector<ag::BatchStats> batch_stats;  // filled in NormMode::batch
  };
  // Differentiable forward; `params` must bind every learnable tensor name.
  Output run(const Tensor& x, const ag::VarMap& params, NormMode mode) const;
  // Leaf variables for the stored learnables, with slot overrides applied.
  ag::VarMap bind(const ParamSet* injected, bool requires_grad) const;

  // Learnable tensors: conv<l>.weight, bn<l>.gamma, bn<l>.beta, classifier.
  const TensorMap& parameters() const { return params_; }
  TensorMap& parameters() { return params_; }
  const BNStats& stats() const { return stats_; }

  void update_running_stats(const std::vector<ag::BatchStats>& batch);
  // While frozen, any attempt to update running statistics throws.
  void set_statistics_frozen(bool frozen) { stats_frozen_ = frozen; }
  bool statistics_frozen() const { return stats_frozen_; }

  // Learnables plus running statistics (bn<l>.running_mean / running_var).
  TensorMap state() const;
  void load_state(const TensorMap& state);
  std::uint32_t checksum() const { return crc32_of(state()); }

 private:
  BackboneSpec spec_;
  TensorMap params_;
  BNStats stats_;
  bool stats_frozen_ = false;
};

}  // namespace ttg
