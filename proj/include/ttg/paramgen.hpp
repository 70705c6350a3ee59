#pragma once

// Transformer that maps (source slot values, batch feature summary, slot
// gradients) to target slot values in a single feedforward pass.
//
// Each generatable group is tokenized separately:
//   BN layer l:  [gamma_s, beta_s, mean(z), g_gamma, g_beta]        5 tokens
//   classifier:  [c_1 .. c_K, mean(z), g_c1 .. g_cK]                2K+1 tokens
// Every vector is lifted to the model width by a learned projection chosen by
// its length, then tagged with learned role and slot-kind embeddings. There
// are no positional encodings. The encoder output at each parameter token is
// read back through the output projection of that length and added to the
// source value; output projections start at zero.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttg/autograd.hpp"
#include "ttg/backbone.hpp"
#include "ttg/objectives.hpp"

namespace ttg {

struct InputMask {
  bool features = true;
  bool gradients = true;
  bool parameters = true;

  bool all() const { return features && gradients && parameters; }
  std::string label() const;  // e.g. "feat+grad+param"
};

struct GeneratorSpec {
  std::size_t model_dim = 64;
  std::size_t n_layers = 8;
  std::size_t n_heads = 4;
  std::size_t ff_dim = 128;
  // One encoder pass over all groups' tokens instead of one pass per group.
  bool joint = false;
  bool generate_bn = true;
  bool generate_classifier = true;
  InputMask inputs;

  void validate() const;
};

void to_json(nlohmann::json& j, const GeneratorSpec& s);
void from_json(const nlohmann::json& j, GeneratorSpec& s);

enum class TokenRole { param, feature, grad };

struct SlotGroup {
  enum class Kind { bn, classifier } kind;
  std::size_t layer = 0;  // 1-based BN depth; 0 for the classifier

  std::vector<std::string> slots() const;
  std::string name() const;
};

struct TokenBundle {
  Tensor tokens;  // [T, d]
  std::vector<TokenRole> roles;
  std::vector<std::string> slot_binding;  // empty for feature tokens
  std::vector<int> class_row;             // classifier row index, -1 otherwise
};

struct ParameterCount {
  std::size_t encoder = 0;
  std::size_t projections = 0;
  std::size_t embeddings = 0;
  std::size_t total() const { return encoder + projections + embeddings; }
};

ParameterCount count_parameters(const GeneratorSpec& spec, const BackboneSpec& backbone);

class Generator {
 public:
  Generator() = default;
  Generator(GeneratorSpec spec, BackboneSpec backbone, std::uint64_t seed);

  const GeneratorSpec& spec() const { return spec_; }
  const BackboneSpec& backbone_spec() const { return backbone_; }
  const TensorMap& parameters() const { return params_; }
  TensorMap& parameters() { return params_; }
  std::uint32_t checksum() const { return crc32_of(params_); }

  std::vector<SlotGroup> groups() const;  // groups that are generated
  std::vector<std::string> generated_slots() const;

  // `z` is [B, F]; gradients are RMS-normalized internally.
  TokenBundle tokenize(const SlotGroup& group, const ParamSet& params, const Tensor& z,
                       const GradSet& grads) const;

  // Inference: source slots in, target slots out. Slots outside the
  // generated groups are copied from `params`.
  ParamSet generate(const ParamSet& params, const Tensor& z, const GradSet& grads) const;

  // Differentiable generation against explicit generator variables `phi`
  // (bound by name to parameters()). Returns one Var per backbone slot.
  ag::VarMap generate(const ag::VarMap& phi, const ParamSet& params, const Tensor& z, const GradSet& grads) const;

 private:
  struct Tokens {
    ag::Var x;
    TokenBundle meta;
  };
  Tokens build_tokens(const ag::VarMap& phi, const SlotGroup& group, const ParamSet& params, const ag::Var& zmean,
                      const GradSet& normalized) const;
  // Tokens attend within their segment only; per-group mode passes one
  // segment per group, joint mode a single segment.
  ag::Var encode(const ag::VarMap& phi, const ag::Var& x, std::span<const std::size_t> segment_ends) const;

  GeneratorSpec spec_;
  BackboneSpec backbone_;
  TensorMap params_;
};

}  // namespace ttg
