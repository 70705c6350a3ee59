#include "ttg/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ttg/rng.hpp"

namespace ttg {

void BackboneSpec::validate() const {
  if (channels.empty()) throw std::invalid_argument("backbone: need at least one block");
  if (n_classes < 2) throw std::invalid_argument("backbone: need at least two classes");
  if (image_size % (std::size_t{1} << channels.size()) != 0)
    throw std::invalid_argument("backbone: image_size must be divisible by 2^n_blocks");
  if (bn_eps <= 0.0) throw std::invalid_argument("backbone: bn_eps must be positive");
}

void to_json(nlohmann::json& j, const BackboneSpec& s) {
  j = {{"in_channels", s.in_channels}, {"image_size", s.image_size}, {"channels", s.channels},
       {"n_classes", s.n_classes},     {"bn_eps", s.bn_eps},         {"bn_momentum", s.bn_momentum}};
}

void from_json(const nlohmann::json& j, BackboneSpec& s) {
  BackboneSpec d;
  s.in_channels = j.value("in_channels", d.in_channels);
  s.image_size = j.value("image_size", d.image_size);
  s.channels = j.value("channels", d.channels);
  s.n_classes = j.value("n_classes", d.n_classes);
  s.bn_eps = j.value("bn_eps", d.bn_eps);
  s.bn_momentum = j.value("bn_momentum", d.bn_momentum);
}

std::string to_string(SlotKind k) {
  switch (k) {
    case SlotKind::bn_gamma: return "bn_gamma";
    case SlotKind::bn_beta: return "bn_beta";
    case SlotKind::classifier: return "classifier";
  }
  return "?";
}

std::string gamma_slot(std::size_t layer) { return "bn" + std::to_string(layer) + ".gamma"; }
std::string beta_slot(std::size_t layer) { return "bn" + std::to_string(layer) + ".beta"; }

namespace {
std::string conv_name(std::size_t layer) { return "conv" + std::to_string(layer) + ".weight"; }
}  // namespace

const Tensor& ParamSet::at(const std::string& id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw std::out_of_range("ParamSet: no entry for slot '" + id + "'");
  return it->second;
}

std::vector<std::string> ParamSet::ids() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

void ParamSet::validate(const std::vector<ParameterSlot>& slots) const {
  for (const auto& [id, t] : entries_) {
    auto it = std::find_if(slots.begin(), slots.end(), [&](const ParameterSlot& s) { return s.id == id; });
    if (it == slots.end()) throw std::invalid_argument("unknown slot '" + id + "'");
    if (t.shape() != it->shape)
      throw std::invalid_argument("slot '" + id + "' has shape " + shape_str(t.shape()) + ", expected " +
                                  shape_str(it->shape));
    if (!all_finite(t)) throw std::invalid_argument("slot '" + id + "' holds non-finite values");
  }
}

Tensor bn_apply(const Tensor& z, const Tensor& mean, const Tensor& var, const Tensor& gamma, const Tensor& beta,
                double eps) {
  if (eps < 0.0) throw std::invalid_argument("bn_apply: eps must be non-negative");
  const std::size_t rank = z.rank();
  if (rank != 1 && rank != 2 && rank != 4) throw std::invalid_argument("bn_apply: expects [C], [B,C] or [B,C,H,W]");
  const std::size_t C = rank == 1 ? z.dim(0) : z.dim(1);
  if (mean.size() != C || var.size() != C || gamma.size() != C || beta.size() != C)
    throw std::invalid_argument("bn_apply: statistics/affine shape mismatch");
  const std::size_t B = rank == 1 ? 1 : z.dim(0);
  const std::size_t S = rank == 4 ? z.dim(2) * z.dim(3) : 1;
  Tensor out(z.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double inv = 1.0 / std::sqrt(var[c] + eps);
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t i = (b * C + c) * S + s;
        out[i] = gamma[c] * (z[i] - mean[c]) * inv + beta[c];
      }
    }
  return out;
}

Backbone::Backbone(BackboneSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(derive_seed(seed, 11));
  std::size_t in = spec_.in_channels;
  for (std::size_t l = 1; l <= spec_.n_blocks(); ++l) {
    const std::size_t out = spec_.channels[l - 1];
    Tensor w({out, in, 3, 3});
    const double std = std::sqrt(2.0 / static_cast<double>(in * 9));
    for (double& v : w.values()) v = std * rng.normal();
    params_[conv_name(l)] = std::move(w);
    params_[gamma_slot(l)] = Tensor({out}, 1.0);
    params_[beta_slot(l)] = Tensor({out}, 0.0);
    stats_.mean.emplace_back(Shape{out}, 0.0);
    stats_.var.emplace_back(Shape{out}, 1.0);
    in = out;
  }
  const std::size_t F = spec_.feature_dim(), K = static_cast<std::size_t>(spec_.n_classes);
  Tensor c({K, F});
  const double bound = 1.0 / std::sqrt(static_cast<double>(F));
  for (double& v : c.values()) v = rng.uniform(-bound, bound);
  params_[kClassifierSlot] = std::move(c);
  stats_.momentum = spec_.bn_momentum;
}

std::vector<ParameterSlot> Backbone::list_slots() const {
  std::vector<ParameterSlot> out;
  for (std::size_t l = 1; l <= spec_.n_blocks(); ++l) {
    const Shape s{spec_.channels[l - 1]};
    out.push_back({gamma_slot(l), SlotKind::bn_gamma, s, static_cast<int>(l)});
    out.push_back({beta_slot(l), SlotKind::bn_beta, s, static_cast<int>(l)});
  }
  out.push_back({kClassifierSlot, SlotKind::classifier,
                 Shape{static_cast<std::size_t>(spec_.n_classes), spec_.feature_dim()}, 0});
  return out;
}

std::vector<std::string> Backbone::slot_ids() const {
  std::vector<std::string> out;
  for (const auto& s : list_slots()) out.push_back(s.id);
  return out;
}

ParamSet Backbone::extract(const std::vector<std::string>& ids) const {
  const auto slots = list_slots();
  ParamSet out;
  for (const auto& id : ids) {
    if (std::none_of(slots.begin(), slots.end(), [&](const ParameterSlot& s) { return s.id == id; }))
      throw std::invalid_argument("extract: unknown slot '" + id + "'");
    out.set(id, params_.at(id));
  }
  return out;
}

ag::VarMap Backbone::bind(const ParamSet* injected, bool requires_grad) const {
  if (injected) injected->validate(list_slots());
  ag::VarMap vars;
  for (const auto& [name, t] : params_) {
    const Tensor& v = (injected && injected->contains(name)) ? injected->at(name) : t;
    vars.emplace(name, ag::Var::leaf(v, requires_grad));
  }
  return vars;
}

Backbone::Output Backbone::run(const Tensor& x, const ag::VarMap& params, NormMode mode) const {
  if (x.rank() != 4 || x.dim(1) != spec_.in_channels || x.dim(2) != spec_.image_size ||
      x.dim(3) != spec_.image_size)
    throw std::invalid_argument("backbone: input shape " + shape_str(x.shape()) + " does not match spec");
  if (!all_finite(x)) throw std::invalid_argument("backbone: input contains non-finite values");
  auto get = [&](const std::string& name) -> const ag::Var& {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("backbone: unbound parameter '" + name + "'");
    return it->second;
  };
  Output out;
  ag::Var h = ag::Var::constant(x);
  for (std::size_t l = 1; l <= spec_.n_blocks(); ++l) {
    h = ag::conv3x3(h, get(conv_name(l)));
    if (mode == NormMode::running) {
      h = ag::batch_norm_fixed(h, get(gamma_slot(l)), get(beta_slot(l)), stats_.mean[l - 1], stats_.var[l - 1],
                               spec_.bn_eps);
    } else {
      ag::BatchStats bs;
      h = ag::batch_norm_batch(h, get(gamma_slot(l)), get(beta_slot(l)), spec_.bn_eps, &bs);
      out.batch_stats.push_back(std::move(bs));
    }
    h = ag::maxpool2(ag::relu(h));
  }
  out.features = ag::global_avg_pool(h);
  out.logits = ag::matmul_nt(out.features, get(kClassifierSlot));
  return out;
}

Tensor Backbone::forward(const Tensor& x, const ParamSet* injected) const {
  return run(x, bind(injected, false), NormMode::running).logits.value();
}

Tensor Backbone::features(const Tensor& x, const ParamSet* injected) const {
  return run(x, bind(injected, false), NormMode::running).features.value();
}

void Backbone::update_running_stats(const std::vector<ag::BatchStats>& batch) {
  if (stats_frozen_) throw std::logic_error("backbone: BN running statistics are frozen");
  if (batch.size() != spec_.n_blocks()) throw std::invalid_argument("update_running_stats: layer count mismatch");
  const double m = stats_.momentum;
  for (std::size_t l = 0; l < batch.size(); ++l)
    for (std::size_t c = 0; c < stats_.mean[l].size(); ++c) {
      stats_.mean[l][c] = (1.0 - m) * stats_.mean[l][c] + m * batch[l].mean[c];
      stats_.var[l][c] = (1.0 - m) * stats_.var[l][c] + m * batch[l].var_unbiased[c];
    }
}

TensorMap Backbone::state() const {
  TensorMap s = params_;
  for (std::size_t l = 1; l <= spec_.n_blocks(); ++l) {
    s["bn" + std::to_string(l) + ".running_mean"] = stats_.mean[l - 1];
    s["bn" + std::to_string(l) + ".running_var"] = stats_.var[l - 1];
  }
  return s;
}

void Backbone::load_state(const TensorMap& state) {
  for (auto& [name, t] : params_) {
    const Tensor& v = state.at(name);
    if (v.shape() != t.shape()) throw std::invalid_argument("load_state: shape mismatch for " + name);
    t = v;
  }
  for (std::size_t l = 1; l <= spec_.n_blocks(); ++l) {
    stats_.mean[l - 1] = state.at("bn" + std::to_string(l) + ".running_mean");
    stats_.var[l - 1] = state.at("bn" + std::to_string(l) + ".running_var");
  }
}

}  // namespace ttg
