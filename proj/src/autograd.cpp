#include "ttg/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace ttg::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

CMatMap cmat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return CMatMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MatMap mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

using Parents = std::vector<std::shared_ptr<Node>>;

Var make(Tensor value, Parents parents, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  const bool rg = std::any_of(parents.begin(), parents.end(),
                              [](const auto& p) { return p->requires_grad; });
  if (rg) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

void accumulate(Node& parent, const Tensor& g) {
  if (!parent.requires_grad) return;
  Tensor& buf = parent.grad_buffer();
  double* d = buf.data();
  const double* s = g.data();
  for (std::size_t i = 0; i < buf.size(); ++i) d[i] += s[i];
}

std::size_t rows_of(const Tensor& t) { return t.dim(0); }
std::size_t cols_of(const Tensor& t) { return t.size() / t.dim(0); }

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.shape() != value.shape()) grad = Tensor(value.shape());
  return grad;
}

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

Tensor Var::grad() const {
  if (node_->grad.shape() == node_->value.shape()) return node_->grad;
  return Tensor(node_->value.shape());
}

void Var::backward() const {
  require(node_ && node_->value.size() == 1, "backward: root must be a scalar");
  if (!node_->requires_grad) return;
  // iterative post-order DFS for a topological order
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.shape() == n->value.shape()) n->backward(*n);
  }
}

VarMap leaves(const TensorMap& tensors, bool requires_grad) {
  VarMap out;
  for (const auto& [k, t] : tensors) out.emplace(k, Var::leaf(t, requires_grad));
  return out;
}

TensorMap grads(const VarMap& vars) {
  TensorMap out;
  for (const auto& [k, v] : vars) out.emplace(k, v.grad());
  return out;
}

// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "add: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make(std::move(out), {a.ptr(), b.ptr()}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make(std::move(out), {a.ptr(), b.ptr()}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      Tensor& gb = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make(std::move(out), {a.ptr(), b.ptr()}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return make(std::move(out), {a.ptr()}, [s](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return make(std::move(out), {a.ptr()}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (self.value[i] > 0.0) g[i] += self.grad[i];
  });
}

Var reshape(const Var& a, Shape shape) {
  return make(a.value().reshaped(std::move(shape)), {a.ptr()}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
  });
}

Var add_rowvec(const Var& a, const Var& b) {
  const std::size_t r = rows_of(a.value()), c = cols_of(a.value());
  require(b.value().size() == c, "add_rowvec: width mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += b.value()[j];
  return make(std::move(out), {a.ptr(), b.ptr()}, [r, c](Node& self) {
    accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      Tensor& gb = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += self.grad[i * c + j];
    }
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  const std::size_t stride = cols_of(a.value());
  return make(a.value().slice_rows(begin, end), {a.ptr()}, [begin, stride](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * stride + i] += self.grad[i];
  });
}

Var concat_rows(std::span<const Var> parts) {
  std::vector<Tensor> values;
  Parents parents;
  values.reserve(parts.size());
  for (const Var& p : parts) {
    values.push_back(p.value());
    parents.push_back(p.ptr());
  }
  return make(ttg::concat_rows(values), std::move(parents), [](Node& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      const std::size_t n = p->value.size();
      if (p->requires_grad) {
        Tensor& g = p->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  require(a.value().rank() == 2 && begin <= end && end <= a.value().dim(1), "slice_cols: bad range");
  const std::size_t r = a.value().dim(0), c = a.value().dim(1), w = end - begin;
  Tensor out({r, w});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.value()[i * c + begin + j];
  return make(std::move(out), {a.ptr()}, [r, c, w, begin](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no parts");
  const std::size_t r = parts.front().value().dim(0);
  std::size_t c = 0;
  Parents parents;
  for (const Var& p : parts) {
    require(p.value().rank() == 2 && p.value().dim(0) == r, "concat_cols: row mismatch");
    c += p.value().dim(1);
    parents.push_back(p.ptr());
  }
  Tensor out({r, c});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const std::size_t w = p.value().dim(1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * c + off + j] = p.value()[i * w + j];
    off += w;
  }
  return make(std::move(out), std::move(parents), [r, c](Node& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      const std::size_t w = p->value.dim(1);
      if (p->requires_grad) {
        Tensor& g = p->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * c + off + j];
      }
      off += w;
    }
  });
}

Var mean_rows(const Var& a) {
  const std::size_t r = rows_of(a.value()), c = cols_of(a.value());
  require(r > 0, "mean_rows: empty");
  Tensor out({1, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += a.value()[i * c + j];
  for (double& v : out.values()) v /= static_cast<double>(r);
  return make(std::move(out), {a.ptr()}, [r, c](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j] / static_cast<double>(r);
  });
}

Var mean_all(const Var& a) {
  const std::size_t n = a.value().size();
  require(n > 0, "mean_all: empty");
  Tensor out({1}, ttg::sum(a.value()) / static_cast<double>(n));
  return make(std::move(out), {a.ptr()}, [n](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const double d = self.grad[0] / static_cast<double>(n);
    for (double& v : g.values()) v += d;
  });
}

// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0), "matmul: shape mismatch");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  mat(out, m, n).noalias() = cmat(av, m, k) * cmat(bv, k, n);
  return make(std::move(out), {a.ptr(), b.ptr()}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    auto g = cmat(self.grad, m, n);
    if (pa.requires_grad) mat(pa.grad_buffer(), m, k).noalias() += g * cmat(pb.value, k, n).transpose();
    if (pb.requires_grad) mat(pb.grad_buffer(), k, n).noalias() += cmat(pa.value, m, k).transpose() * g;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(1), "matmul_nt: shape mismatch");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  Tensor out({m, n});
  mat(out, m, n).noalias() = cmat(av, m, k) * cmat(bv, n, k).transpose();
  return make(std::move(out), {a.ptr(), b.ptr()}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    auto g = cmat(self.grad, m, n);
    if (pa.requires_grad) mat(pa.grad_buffer(), m, k).noalias() += g * cmat(pb.value, n, k);
    if (pb.requires_grad) mat(pb.grad_buffer(), n, k).noalias() += g.transpose() * cmat(pa.value, m, k);
  });
}

Var linear(const Var& x, const Var& w) { return matmul_nt(x, w); }

Var linear(const Var& x, const Var& w, const Var& b) { return add_rowvec(matmul_nt(x, w), b); }

// ---------------------------------------------------------------------------

namespace {

// cols[(b*H + y)*W + x, c*9 + ky*3 + kx] = x[b, c, y+ky-1, x+kx-1]
Tensor im2col3x3(const Tensor& x) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor cols({B * H * W, C * 9});
  double* out = cols.data();
  const double* in = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        double* row = out + ((b * H + y) * W + xx) * C * 9;
        for (std::size_t c = 0; c < C; ++c) {
          const double* plane = in + (b * C + c) * H * W;
          for (int ky = 0; ky < 3; ++ky) {
            const long sy = static_cast<long>(y) + ky - 1;
            for (int kx = 0; kx < 3; ++kx) {
              const long sx = static_cast<long>(xx) + kx - 1;
              const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(H) && sx < static_cast<long>(W);
              row[c * 9 + ky * 3 + kx] = inside ? plane[sy * static_cast<long>(W) + sx] : 0.0;
            }
          }
        }
      }
  return cols;
}

void col2im3x3(const Tensor& cols, Tensor& dx) {
  const std::size_t B = dx.dim(0), C = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
  const double* in = cols.data();
  double* out = dx.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        const double* row = in + ((b * H + y) * W + xx) * C * 9;
        for (std::size_t c = 0; c < C; ++c) {
          double* plane = out + (b * C + c) * H * W;
          for (int ky = 0; ky < 3; ++ky) {
            const long sy = static_cast<long>(y) + ky - 1;
            if (sy < 0 || sy >= static_cast<long>(H)) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const long sx = static_cast<long>(xx) + kx - 1;
              if (sx < 0 || sx >= static_cast<long>(W)) continue;
              plane[sy * static_cast<long>(W) + sx] += row[c * 9 + ky * 3 + kx];
            }
          }
        }
      }
}

}  // namespace

Var conv3x3(const Var& x, const Var& w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(xv.rank() == 4 && wv.rank() == 4 && wv.dim(1) == xv.dim(1) && wv.dim(2) == 3 && wv.dim(3) == 3,
          "conv3x3: shape mismatch");
  const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3), O = wv.dim(0);
  const std::size_t P = B * H * W, K = C * 9;
  auto cols = std::make_shared<Tensor>(im2col3x3(xv));
  Tensor prod({P, O});
  mat(prod, P, O).noalias() = cmat(*cols, P, K) * cmat(wv, O, K).transpose();
  Tensor out({B, O, H, W});
  const std::size_t HW = H * W;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < HW; ++p)
      for (std::size_t o = 0; o < O; ++o) out[(b * O + o) * HW + p] = prod[(b * HW + p) * O + o];
  return make(std::move(out), {x.ptr(), w.ptr()}, [cols, B, C, H, W, O, P, K, HW](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Tensor gp({P, O});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t p = 0; p < HW; ++p) gp[(b * HW + p) * O + o] = self.grad[(b * O + o) * HW + p];
    if (pw.requires_grad) mat(pw.grad_buffer(), O, K).noalias() += cmat(gp, P, O).transpose() * cmat(*cols, P, K);
    if (px.requires_grad) {
      Tensor gcols({P, K});
      mat(gcols, P, K).noalias() = cmat(gp, P, O) * cmat(pw.value, O, K);
      col2im3x3(gcols, px.grad_buffer());
    }
    (void)C;
  });
}

Var maxpool2(const Var& x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 4 && xv.dim(2) % 2 == 0 && xv.dim(3) % 2 == 0, "maxpool2: needs even spatial dims");
  const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t h = H / 2, w = W / 2;
  Tensor out({B, C, h, w});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        std::size_t best = bc * H * W + (2 * y) * W + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = bc * H * W + (2 * y + dy) * W + 2 * xx + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (bc * h + y) * w + xx;
        out[o] = xv[best];
        (*argmax)[o] = best;
      }
  return make(std::move(out), {x.ptr()}, [argmax](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < argmax->size(); ++o) g[(*argmax)[o]] += self.grad[o];
  });
}

Var global_avg_pool(const Var& x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 4, "global_avg_pool: expects NCHW");
  const std::size_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  Tensor out({B, C});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    double s = 0.0;
    for (std::size_t p = 0; p < HW; ++p) s += xv[bc * HW + p];
    out[bc] = s / static_cast<double>(HW);
  }
  return make(std::move(out), {x.ptr()}, [B, C, HW](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      const double d = self.grad[bc] / static_cast<double>(HW);
      for (std::size_t p = 0; p < HW; ++p) g[bc * HW + p] += d;
    }
  });
}

// ---------------------------------------------------------------------------

namespace {

struct ChannelLayout {
  std::size_t B, C, S;  // batch, channels, spatial size per channel
};

ChannelLayout channel_layout(const Tensor& x) {
  require(x.rank() == 2 || x.rank() == 4, "batch norm: expects [B,C] or [B,C,H,W]");
  const std::size_t S = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  return {x.dim(0), x.dim(1), S};
}

}  // namespace

Var batch_norm_fixed(const Var& x, const Var& gamma, const Var& beta, const Tensor& mean,
                     const Tensor& var, double eps) {
  const auto [B, C, S] = channel_layout(x.value());
  require(gamma.value().size() == C && beta.value().size() == C && mean.size() == C && var.size() == C,
          "batch norm: parameter shape mismatch");
  auto inv = std::make_shared<std::vector<double>>(C);
  for (std::size_t c = 0; c < C; ++c) (*inv)[c] = 1.0 / std::sqrt(var[c] + eps);
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double g = gamma.value()[c] * (*inv)[c], sh = beta.value()[c], m = mean[c];
      const std::size_t base = (b * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) out[base + s] = g * (xv[base + s] - m) + sh;
    }
  return make(std::move(out), {x.ptr(), gamma.ptr(), beta.ptr()},
              [inv, mean, B, C, S](Node& self) {
                Node& px = *self.parents[0];
                Node& pg = *self.parents[1];
                Node& pb = *self.parents[2];
                for (std::size_t c = 0; c < C; ++c) {
                  double dg = 0.0, db = 0.0;
                  const double ic = (*inv)[c];
                  const double gx = pg.value[c] * ic;
                  for (std::size_t b = 0; b < B; ++b) {
                    const std::size_t base = (b * C + c) * S;
                    for (std::size_t s = 0; s < S; ++s) {
                      const double g = self.grad[base + s];
                      dg += g * (px.value[base + s] - mean[c]) * ic;
                      db += g;
                      if (px.requires_grad) px.grad_buffer()[base + s] += g * gx;
                    }
                  }
                  if (pg.requires_grad) pg.grad_buffer()[c] += dg;
                  if (pb.requires_grad) pb.grad_buffer()[c] += db;
                }
              });
}

Var batch_norm_batch(const Var& x, const Var& gamma, const Var& beta, double eps, BatchStats* stats) {
  const auto [B, C, S] = channel_layout(x.value());
  require(gamma.value().size() == C && beta.value().size() == C, "batch norm: parameter shape mismatch");
  const Tensor& xv = x.value();
  const double N = static_cast<double>(B * S);
  Tensor mean({C}), var({C});
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < S; ++k) s += xv[(b * C + c) * S + k];
    mean[c] = s / N;
    double v = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < S; ++k) {
        const double d = xv[(b * C + c) * S + k] - mean[c];
        v += d * d;
      }
    var[c] = v / N;
  }
  if (stats) {
    stats->mean = mean;
    stats->var = var;
    stats->var_unbiased = var;
    if (N > 1.0)
      for (double& v : stats->var_unbiased.values()) v *= N / (N - 1.0);
  }
  auto xhat = std::make_shared<Tensor>(x.shape());
  auto inv = std::make_shared<std::vector<double>>(C);
  Tensor out(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    (*inv)[c] = 1.0 / std::sqrt(var[c] + eps);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < S; ++k) {
        const std::size_t i = (b * C + c) * S + k;
        (*xhat)[i] = (xv[i] - mean[c]) * (*inv)[c];
        out[i] = gamma.value()[c] * (*xhat)[i] + beta.value()[c];
      }
  }
  return make(std::move(out), {x.ptr(), gamma.ptr(), beta.ptr()}, [xhat, inv, B, C, S, N](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    for (std::size_t c = 0; c < C; ++c) {
      double sg = 0.0, sgx = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < S; ++k) {
          const std::size_t i = (b * C + c) * S + k;
          sg += self.grad[i];
          sgx += self.grad[i] * (*xhat)[i];
        }
      if (pg.requires_grad) pg.grad_buffer()[c] += sgx;
      if (pb.requires_grad) pb.grad_buffer()[c] += sg;
      if (px.requires_grad) {
        Tensor& gx = px.grad_buffer();
        const double k0 = pg.value[c] * (*inv)[c] / N;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t k = 0; k < S; ++k) {
            const std::size_t i = (b * C + c) * S + k;
            gx[i] += k0 * (N * self.grad[i] - sg - (*xhat)[i] * sgx);
          }
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Tensor& xv = x.value();
  require(xv.rank() == 2, "layer_norm: expects [rows, cols]");
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  require(gain.value().size() == c && bias.value().size() == c, "layer_norm: parameter shape mismatch");
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv = std::make_shared<std::vector<double>>(r);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < r; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < c; ++j) m += xv[i * c + j];
    m /= static_cast<double>(c);
    double v = 0.0;
    for (std::size_t j = 0; j < c; ++j) v += (xv[i * c + j] - m) * (xv[i * c + j] - m);
    v /= static_cast<double>(c);
    (*inv)[i] = 1.0 / std::sqrt(v + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xv[i * c + j] - m) * (*inv)[i];
      (*xhat)[i * c + j] = h;
      out[i * c + j] = gain.value()[j] * h + bias.value()[j];
    }
  }
  return make(std::move(out), {x.ptr(), gain.ptr(), bias.ptr()}, [xhat, inv, r, c](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    std::vector<double> dh(c);
    for (std::size_t i = 0; i < r; ++i) {
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double g = self.grad[i * c + j];
        const double h = (*xhat)[i * c + j];
        if (pg.requires_grad) pg.grad_buffer()[j] += g * h;
        if (pb.requires_grad) pb.grad_buffer()[j] += g;
        dh[j] = g * pg.value[j];
        s1 += dh[j];
        s2 += dh[j] * h;
      }
      if (px.requires_grad) {
        Tensor& gx = px.grad_buffer();
        const double n = static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j)
          gx[i * c + j] += (*inv)[i] / n * (n * dh[j] - s1 - (*xhat)[i * c + j] * s2);
      }
    }
  });
}

// ---------------------------------------------------------------------------

namespace {

// Row-wise log-softmax values.
Tensor log_softmax_values(const Tensor& x) {
  require(x.rank() == 2, "softmax: expects [rows, classes]");
  const std::size_t r = x.dim(0), k = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, x[i * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(x[i * k + j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = x[i * k + j] - lse;
  }
  return out;
}

}  // namespace

Var softmax(const Var& logits) {
  Tensor p = log_softmax_values(logits.value());
  for (double& v : p.values()) v = std::exp(v);
  const std::size_t r = p.dim(0), k = p.dim(1);
  return make(std::move(p), {logits.ptr()}, [r, k](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += self.grad[i * k + j] * self.value[i * k + j];
      for (std::size_t j = 0; j < k; ++j) g[i * k + j] += self.value[i * k + j] * (self.grad[i * k + j] - dot);
    }
  });
}

Var log_softmax(const Var& logits) {
  Tensor ls = log_softmax_values(logits.value());
  const std::size_t r = ls.dim(0), k = ls.dim(1);
  return make(std::move(ls), {logits.ptr()}, [r, k](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += self.grad[i * k + j];
      for (std::size_t j = 0; j < k; ++j) g[i * k + j] += self.grad[i * k + j] - std::exp(self.value[i * k + j]) * s;
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  auto ls = std::make_shared<Tensor>(log_softmax_values(logits.value()));
  const std::size_t r = ls->dim(0), k = ls->dim(1);
  require(labels.size() == r, "cross_entropy: label count mismatch");
  std::vector<int> lab(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    require(lab[i] >= 0 && static_cast<std::size_t>(lab[i]) < k, "cross_entropy: label out of range");
    loss -= (*ls)[i * k + static_cast<std::size_t>(lab[i])];
  }
  loss /= static_cast<double>(r);
  return make(Tensor({1}, loss), {logits.ptr()}, [ls, lab = std::move(lab), r, k](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const double d = self.grad[0] / static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const double p = std::exp((*ls)[i * k + j]);
        g[i * k + j] += d * (p - (static_cast<int>(j) == lab[i] ? 1.0 : 0.0));
      }
  });
}

Var entropy(const Var& logits) {
  auto ls = std::make_shared<Tensor>(log_softmax_values(logits.value()));
  const std::size_t r = ls->dim(0), k = ls->dim(1);
  auto row_h = std::make_shared<std::vector<double>>(r);
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    double h = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double lp = (*ls)[i * k + j];
      h -= std::exp(lp) * lp;
    }
    (*row_h)[i] = h;
    total += h;
  }
  return make(Tensor({1}, total / static_cast<double>(r)), {logits.ptr()}, [ls, row_h, r, k](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const double d = self.grad[0] / static_cast<double>(r);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const double lp = (*ls)[i * k + j];
        g[i * k + j] -= d * std::exp(lp) * (lp + (*row_h)[i]);
      }
  });
}

Var prob_entropy(const Var& probs) {
  const Tensor& p = probs.value();
  require(p.rank() == 2, "prob_entropy: expects [rows, classes]");
  const std::size_t r = p.dim(0);
  constexpr double tiny = 1e-300;
  double total = 0.0;
  for (double v : p.values()) total -= v * std::log(std::max(v, tiny));
  return make(Tensor({1}, total / static_cast<double>(r)), {probs.ptr()}, [r](Node& self) {
    Node& pp = *self.parents[0];
    Tensor& g = pp.grad_buffer();
    const double d = self.grad[0] / static_cast<double>(r);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= d * (std::log(std::max(pp.value[i], 1e-300)) + 1.0);
  });
}

Var block_mean(const Var& a, std::size_t groups) {
  const Tensor& av = a.value();
  require(av.rank() == 2 && groups > 0 && av.dim(0) % groups == 0, "block_mean: rows not divisible");
  const std::size_t b = av.dim(0) / groups, k = av.dim(1);
  Tensor out({b, k});
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < b * k; ++i) out[i] += av[g * b * k + i];
  for (double& v : out.values()) v /= static_cast<double>(groups);
  return make(std::move(out), {a.ptr()}, [groups, b, k](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t gi = 0; gi < groups; ++gi)
      for (std::size_t i = 0; i < b * k; ++i) g[gi * b * k + i] += self.grad[i] / static_cast<double>(groups);
  });
}

}  // namespace ttg::ag

namespace ttg::ag {

namespace {

using Strided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

CStrided cblock(const Tensor& t, std::size_t r0, std::size_t n, std::size_t c0, std::size_t w) {
  const std::size_t ld = t.dim(1);
  return CStrided(t.data() + r0 * ld + c0, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(w),
                  Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
}
Strided block(Tensor& t, std::size_t r0, std::size_t n, std::size_t c0, std::size_t w) {
  const std::size_t ld = t.dim(1);
  return Strided(t.data() + r0 * ld + c0, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(w),
                 Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
}

}  // namespace

Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, std::span<const std::size_t> segment_ends) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require(qv.rank() == 2 && kv.shape() == qv.shape() && vv.shape() == qv.shape(), "attention: q, k, v must be [T,d]");
  const std::size_t T = qv.dim(0), d = qv.dim(1);
  require(heads > 0 && d % heads == 0, "attention: d not divisible by heads");
  require(!segment_ends.empty() && segment_ends.back() == T, "attention: segments must cover all rows");
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<std::size_t> starts;
  std::size_t prev = 0;
  for (std::size_t e : segment_ends) {
    require(e > prev, "attention: empty or unordered segment");
    starts.push_back(prev);
    prev = e;
  }
  std::vector<std::size_t> ends(segment_ends.begin(), segment_ends.end());
  // softmax weights per (segment, head), kept for the backward pass
  auto probs = std::make_shared<std::vector<RowMat>>();
  Tensor out({T, d});
  for (std::size_t s = 0; s < ends.size(); ++s) {
    const std::size_t r0 = starts[s], n = ends[s] - starts[s];
    for (std::size_t h = 0; h < heads; ++h) {
      RowMat S = scale * (cblock(qv, r0, n, h * dh, dh) * cblock(kv, r0, n, h * dh, dh).transpose());
      for (Eigen::Index i = 0; i < S.rows(); ++i) {
        const double m = S.row(i).maxCoeff();
        S.row(i) = (S.row(i).array() - m).exp();
        S.row(i) /= S.row(i).sum();
      }
      block(out, r0, n, h * dh, dh).noalias() = S * cblock(vv, r0, n, h * dh, dh);
      probs->push_back(std::move(S));
    }
  }
  return make(std::move(out), {q.ptr(), k.ptr(), v.ptr()}, [probs, starts, ends, heads, dh, scale](Node& self) {
    Node& pq = *self.parents[0];
    Node& pk = *self.parents[1];
    Node& pv = *self.parents[2];
    Tensor& gq = pq.grad_buffer();
    Tensor& gk = pk.grad_buffer();
    Tensor& gv = pv.grad_buffer();
    std::size_t idx = 0;
    for (std::size_t s = 0; s < ends.size(); ++s) {
      const std::size_t r0 = starts[s], n = ends[s] - starts[s];
      for (std::size_t h = 0; h < heads; ++h, ++idx) {
        const RowMat& P = (*probs)[idx];
        const auto dO = cblock(self.grad, r0, n, h * dh, dh);
        if (pv.requires_grad) block(gv, r0, n, h * dh, dh).noalias() += P.transpose() * dO;
        if (!pq.requires_grad && !pk.requires_grad) continue;
        RowMat dP = dO * cblock(pv.value, r0, n, h * dh, dh).transpose();
        const Eigen::VectorXd rs = (dP.array() * P.array()).rowwise().sum();
        RowMat dS = (P.array() * (dP.array().colwise() - rs.array())).matrix() * scale;
        if (pq.requires_grad) block(gq, r0, n, h * dh, dh).noalias() += dS * cblock(pk.value, r0, n, h * dh, dh);
        if (pk.requires_grad)
          block(gk, r0, n, h * dh, dh).noalias() += dS.transpose() * cblock(pq.value, r0, n, h * dh, dh);
      }
    }
  });
}

}  // namespace ttg::ag
