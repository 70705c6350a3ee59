#pragma once

// Unsupervised test-time losses and per-slot gradients of those losses.

#include <string>
#include <vector>

#include "ttg/autograd.hpp"
#include "ttg/backbone.hpp"

namespace ttg {

enum class UnsupervisedLoss { entropy, pseudo_label, augmentation_consistency };

// Accepts the CLI spellings entropy|pseudo|memo as well as the enum names.
UnsupervisedLoss parse_loss(const std::string& name);
std::string to_string(UnsupervisedLoss loss);

double entropy_loss(const Tensor& logits);
// Cross-entropy against the argmax class of each row (ties -> lowest index).
double pseudo_label_loss(const Tensor& logits);
std::vector<int> argmax_rows(const Tensor& logits);

// Fixed MEMO-style views: rotate +10, rotate -10, horizontal flip, vertical flip.
// Returns the 4 views stacked along the batch axis, view-major.
Tensor memo_views(const Tensor& x);
inline constexpr std::size_t kMemoViews = 4;

// Differentiable loss of the given kind on a backbone output. For
// augmentation_consistency the logits must come from memo_views(x).
ag::Var unsupervised_loss(UnsupervisedLoss loss, const ag::Var& logits);

struct GradSet {
  TensorMap entries;  // slot id -> gradient, same shape as the slot
  UnsupervisedLoss loss = UnsupervisedLoss::entropy;
};

// Divides each slot's gradient by (RMS + 1e-8).
GradSet rms_normalized(const GradSet& g);

// Everything the generator needs from one backbone pass over a target batch.
struct Probe {
  Tensor features;  // [B, F], running statistics, at `params`
  Tensor logits;    // [B, K]
  GradSet grads;    // mean-reduced over the batch, detached
};

// Features, logits and the gradient of the unsupervised loss with respect to
// each requested slot, evaluated with `params` substituted into the model.
// All other parameters are constants.
Probe probe(const Backbone& model, UnsupervisedLoss loss, const Tensor& x, const ParamSet& params,
            const std::vector<std::string>& slots);

GradSet layer_gradients(const Backbone& model, UnsupervisedLoss loss, const Tensor& x, const ParamSet& params,
                        const std::vector<std::string>& slots);

}  // namespace ttg
