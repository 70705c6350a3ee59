#pragma once

// Minimal tape-free reverse-mode differentiation over ttg::Tensor.
//
// A Var is a shared handle to a graph node. Ops build new nodes whose
// backward closure accumulates into the parents' gradients. Nodes that do not
// require gradients carry no closure, so inference graphs cost nothing extra.

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ttg/tensor.hpp"

namespace ttg::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var leaf(Tensor value, bool requires_grad = true);

  const Tensor& value() const { return node_->value; }
  // Zero tensor when no gradient has reached this node.
  Tensor grad() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool defined() const { return static_cast<bool>(node_); }
  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }

  // Seeds d(self)/d(self) = 1; self must hold a single element.
  void backward() const;

 private:
  std::shared_ptr<Node> node_;
};

using VarMap = std::map<std::string, Var>;

VarMap leaves(const TensorMap& tensors, bool requires_grad);
TensorMap grads(const VarMap& vars);

// ---- elementwise / shape ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var reshape(const Var& a, Shape shape);
// Adds b[cols] to every row of a[rows, cols].
Var add_rowvec(const Var& a, const Var& b);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
// [rows, cols] -> [1, cols]
Var mean_rows(const Var& a);
Var mean_all(const Var& a);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);     // [m,k] x [k,n]
Var matmul_nt(const Var& a, const Var& b);  // [m,k] x [n,k]^T
// x[n,in] w[out,in] (+ b[out])
Var linear(const Var& x, const Var& w);
Var linear(const Var& x, const Var& w, const Var& b);

// ---- convolutional pieces, NCHW ----
// 3x3 kernel, stride 1, zero padding 1, no bias. w: [out, in, 3, 3]
Var conv3x3(const Var& x, const Var& w);
Var maxpool2(const Var& x);
Var global_avg_pool(const Var& x);  // [B,C,H,W] -> [B,C]

// Normalization with fixed statistics; x is [B,C] or [B,C,H,W].
Var batch_norm_fixed(const Var& x, const Var& gamma, const Var& beta, const Tensor& mean,
                     const Tensor& var, double eps);
struct BatchStats {
  Tensor mean;
  Tensor var;           // biased, used for normalization
  Tensor var_unbiased;  // for running-average updates
};
// Normalization with the current batch's statistics, differentiated through them.
Var batch_norm_batch(const Var& x, const Var& gamma, const Var& beta, double eps,
                     BatchStats* stats = nullptr);

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

// Multi-head scaled dot-product attention on [T, d] inputs. Rows are split
// into consecutive segments (`segment_ends` are exclusive row bounds) and a
// token attends only to tokens of its own segment.
Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads,
              std::span<const std::size_t> segment_ends);

// ---- probabilistic heads, row-wise over [B,K] ----
Var softmax(const Var& logits);
Var log_softmax(const Var& logits);
// mean over rows of -log p[label]
Var cross_entropy(const Var& logits, std::span<const int> labels);
// mean over rows of -sum p log p, p = softmax(logits)
Var entropy(const Var& logits);
// mean over rows of -sum p log p for an already-normalized p
Var prob_entropy(const Var& probs);
// [G*B, K] -> [B, K]: average of the G row-blocks
Var block_mean(const Var& a, std::size_t groups);

}  // namespace ttg::ag
