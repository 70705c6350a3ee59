#include "ttg/paramgen.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "ttg/rng.hpp"

namespace ttg {

std::string InputMask::label() const {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += '+';
    s += name;
  };
  add(features, "feat");
  add(gradients, "grad");
  add(parameters, "param");
  return s.empty() ? "none" : s;
}

void GeneratorSpec::validate() const {
  if (model_dim == 0 || n_heads == 0 || model_dim % n_heads != 0)
    throw std::invalid_argument("generator: model_dim must be divisible by n_heads");
  if (ff_dim == 0) throw std::invalid_argument("generator: ff_dim must be positive");
  if (!generate_bn && !generate_classifier) throw std::invalid_argument("generator: nothing to generate");
}

void to_json(nlohmann::json& j, const GeneratorSpec& s) {
  j = {{"model_dim", s.model_dim},
       {"n_layers", s.n_layers},
       {"n_heads", s.n_heads},
       {"ff_dim", s.ff_dim},
       {"joint", s.joint},
       {"generate_bn", s.generate_bn},
       {"generate_classifier", s.generate_classifier},
       {"inputs", {{"features", s.inputs.features}, {"gradients", s.inputs.gradients}, {"parameters", s.inputs.parameters}}}};
}

void from_json(const nlohmann::json& j, GeneratorSpec& s) {
  GeneratorSpec d;
  s.model_dim = j.value("model_dim", d.model_dim);
  s.n_layers = j.value("n_layers", d.n_layers);
  s.n_heads = j.value("n_heads", d.n_heads);
  s.ff_dim = j.value("ff_dim", d.ff_dim);
  s.joint = j.value("joint", d.joint);
  s.generate_bn = j.value("generate_bn", d.generate_bn);
  s.generate_classifier = j.value("generate_classifier", d.generate_classifier);
  if (j.contains("inputs")) {
    const auto& in = j.at("inputs");
    s.inputs.features = in.value("features", true);
    s.inputs.gradients = in.value("gradients", true);
    s.inputs.parameters = in.value("parameters", true);
  }
}

std::vector<std::string> SlotGroup::slots() const {
  if (kind == Kind::classifier) return {kClassifierSlot};
  return {gamma_slot(layer), beta_slot(layer)};
}

std::string SlotGroup::name() const { return kind == Kind::classifier ? "classifier" : "bn" + std::to_string(layer); }

namespace {

struct Layout {
  std::set<std::size_t> in_lengths;
  std::set<std::size_t> out_lengths;
  bool bn_kinds = false;
  bool classifier_kind = false;
  bool null_token = false;
};

Layout layout_of(const GeneratorSpec& spec, const BackboneSpec& bb) {
  Layout l;
  const std::size_t F = bb.feature_dim();
  const bool vec_inputs = spec.inputs.parameters || spec.inputs.gradients;
  if (spec.generate_bn) {
    l.bn_kinds = true;
    for (std::size_t c : bb.channels) {
      if (vec_inputs) l.in_lengths.insert(c);
      l.out_lengths.insert(c);
    }
  }
  if (spec.generate_classifier) {
    l.classifier_kind = true;
    if (vec_inputs) l.in_lengths.insert(F);
    l.out_lengths.insert(F);
  }
  if (spec.inputs.features) l.in_lengths.insert(F);
  l.null_token = !spec.inputs.all();
  return l;
}

std::string enc(std::size_t i, const char* what) { return "enc" + std::to_string(i) + "." + what; }
std::string in_w(std::size_t n) { return "in." + std::to_string(n) + ".weight"; }
std::string in_b(std::size_t n) { return "in." + std::to_string(n) + ".bias"; }
std::string out_w(std::size_t n) { return "out." + std::to_string(n) + ".weight"; }
std::string out_b(std::size_t n) { return "out." + std::to_string(n) + ".bias"; }

}  // namespace

ParameterCount count_parameters(const GeneratorSpec& spec, const BackboneSpec& backbone) {
  const Layout l = layout_of(spec, backbone);
  const std::size_t d = spec.model_dim, f = spec.ff_dim;
  ParameterCount c;
  const std::size_t per_layer = 4 * (d * d + d) + 2 * (2 * d) + (f * d + f) + (d * f + d);
  c.encoder = spec.n_layers * per_layer;
  for (std::size_t n : l.in_lengths) c.projections += d * n + d;
  for (std::size_t n : l.out_lengths) c.projections += n * d + n;
  c.embeddings = 3 * d + (l.bn_kinds ? 2 * d : 0) + (l.classifier_kind ? d : 0) + (l.null_token ? d : 0);
  return c;
}

Generator::Generator(GeneratorSpec spec, BackboneSpec backbone, std::uint64_t seed)
    : spec_(std::move(spec)), backbone_(std::move(backbone)) {
  spec_.validate();
  backbone_.validate();
  Rng rng(derive_seed(seed, 21));
  const std::size_t d = spec_.model_dim, f = spec_.ff_dim;
  auto xavier = [&](std::size_t out, std::size_t in) {
    Tensor w({out, in});
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (double& v : w.values()) v = rng.uniform(-bound, bound);
    return w;
  };
  auto embedding = [&]() {
    Tensor e({d});
    for (double& v : e.values()) v = 0.5 * rng.normal();
    return e;
  };
  for (std::size_t i = 0; i < spec_.n_layers; ++i) {
    for (const char* p : {"q", "k", "v", "o"}) {
      params_[enc(i, p) + std::string(".weight")] = xavier(d, d);
      params_[enc(i, p) + std::string(".bias")] = Tensor({d});
    }
    params_[enc(i, "ln1.gain")] = Tensor({d}, 1.0);
    params_[enc(i, "ln1.bias")] = Tensor({d});
    params_[enc(i, "ff1.weight")] = xavier(f, d);
    params_[enc(i, "ff1.bias")] = Tensor({f});
    params_[enc(i, "ff2.weight")] = xavier(d, f);
    params_[enc(i, "ff2.bias")] = Tensor({d});
    params_[enc(i, "ln2.gain")] = Tensor({d}, 1.0);
    params_[enc(i, "ln2.bias")] = Tensor({d});
  }
  const Layout l = layout_of(spec_, backbone_);
  for (std::size_t n : l.in_lengths) {
    Tensor w({d, n});
    const double std = 1.0 / std::sqrt(static_cast<double>(n));
    for (double& v : w.values()) v = std * rng.normal();
    params_[in_w(n)] = std::move(w);
    params_[in_b(n)] = Tensor({d});
  }
  for (std::size_t n : l.out_lengths) {
    params_[out_w(n)] = Tensor({n, d});
    params_[out_b(n)] = Tensor({n});
  }
  params_["role.param"] = embedding();
  params_["role.feature"] = embedding();
  params_["role.grad"] = embedding();
  if (l.bn_kinds) {
    params_["kind.gamma"] = embedding();
    params_["kind.beta"] = embedding();
  }
  if (l.classifier_kind) params_["kind.classifier"] = embedding();
  if (l.null_token) params_["null"] = embedding();
}

std::vector<SlotGroup> Generator::groups() const {
  std::vector<SlotGroup> out;
  if (spec_.generate_bn)
    for (std::size_t l = 1; l <= backbone_.n_blocks(); ++l) out.push_back({SlotGroup::Kind::bn, l});
  if (spec_.generate_classifier) out.push_back({SlotGroup::Kind::classifier, 0});
  return out;
}

std::vector<std::string> Generator::generated_slots() const {
  std::vector<std::string> out;
  for (const auto& g : groups())
    for (auto& s : g.slots()) out.push_back(std::move(s));
  return out;
}

Generator::Tokens Generator::build_tokens(const ag::VarMap& phi, const SlotGroup& group, const ParamSet& params,
                                          const ag::Var& zmean, const GradSet& normalized) const {
  const std::size_t d = spec_.model_dim;
  auto P = [&](const std::string& name) -> const ag::Var& {
    auto it = phi.find(name);
    if (it == phi.end()) throw std::invalid_argument("generator: missing parameter '" + name + "'");
    return it->second;
  };
  auto row = [&](const std::string& name) { return ag::reshape(P(name), {1, d}); };
  auto repeat = [](const ag::Var& r, std::size_t n) {
    std::vector<ag::Var> rows(n, r);
    return ag::concat_rows(rows);
  };
  auto grad_of = [&](const std::string& id) -> const Tensor& {
    auto it = normalized.entries.find(id);
    if (it == normalized.entries.end()) throw std::invalid_argument("tokenize: missing gradient for slot '" + id + "'");
    return it->second;
  };
  // [n, len] matrix of vectors -> [n, d] tokens, or null tokens when masked
  auto lift = [&](const Tensor& vectors, bool enabled) {
    const std::size_t n = vectors.dim(0), len = vectors.dim(1);
    if (!enabled) return repeat(row("null"), n);
    return ag::linear(ag::Var::constant(vectors), P(in_w(len)), P(in_b(len)));
  };
  const InputMask& m = spec_.inputs;
  const ag::Var role_param = row("role.param"), role_feature = row("role.feature"), role_grad = row("role.grad");
  const ag::Var feature_token = m.features ? ag::linear(zmean, P(in_w(backbone_.feature_dim())),
                                                        P(in_b(backbone_.feature_dim())))
                                           : row("null");
  Tokens t;
  std::vector<ag::Var> content, emb;
  if (group.kind == SlotGroup::Kind::bn) {
    const std::string gid = gamma_slot(group.layer), bid = beta_slot(group.layer);
    const std::size_t C = backbone_.channels.at(group.layer - 1);
    const std::vector<Tensor> pv{params.at(gid).reshaped({1, C}), params.at(bid).reshaped({1, C})};
    const std::vector<Tensor> gv{grad_of(gid).reshaped({1, C}), grad_of(bid).reshaped({1, C})};
    content = {lift(ttg::concat_rows(pv), m.parameters), feature_token, lift(ttg::concat_rows(gv), m.gradients)};
    const ag::Var kg = row("kind.gamma"), kb = row("kind.beta");
    emb = {ag::add(role_param, kg), ag::add(role_param, kb), role_feature, ag::add(role_grad, kg),
           ag::add(role_grad, kb)};
    t.meta.roles = {TokenRole::param, TokenRole::param, TokenRole::feature, TokenRole::grad, TokenRole::grad};
    t.meta.slot_binding = {gid, bid, "", gid, bid};
    t.meta.class_row = {-1, -1, -1, -1, -1};
  } else {
    const std::size_t K = static_cast<std::size_t>(backbone_.n_classes);
    content = {lift(params.at(kClassifierSlot), m.parameters), feature_token,
               lift(grad_of(kClassifierSlot), m.gradients)};
    const ag::Var kc = row("kind.classifier");
    emb = {repeat(ag::add(role_param, kc), K), role_feature, repeat(ag::add(role_grad, kc), K)};
    for (std::size_t r = 0; r < K; ++r) {
      t.meta.roles.push_back(TokenRole::param);
      t.meta.slot_binding.push_back(kClassifierSlot);
      t.meta.class_row.push_back(static_cast<int>(r));
    }
    t.meta.roles.push_back(TokenRole::feature);
    t.meta.slot_binding.push_back("");
    t.meta.class_row.push_back(-1);
    for (std::size_t r = 0; r < K; ++r) {
      t.meta.roles.push_back(TokenRole::grad);
      t.meta.slot_binding.push_back(kClassifierSlot);
      t.meta.class_row.push_back(static_cast<int>(r));
    }
  }
  t.x = ag::add(ag::concat_rows(content), ag::concat_rows(emb));
  t.meta.tokens = t.x.value();
  return t;
}

ag::Var Generator::encode(const ag::VarMap& phi, const ag::Var& input,
                          std::span<const std::size_t> segment_ends) const {
  auto P = [&](const std::string& name) -> const ag::Var& { return phi.at(name); };
  ag::Var x = input;
  for (std::size_t i = 0; i < spec_.n_layers; ++i) {
    const auto lin = [&](const ag::Var& in, const char* p) {
      return ag::linear(in, P(enc(i, p) + std::string(".weight")), P(enc(i, p) + std::string(".bias")));
    };
    const ag::Var a = lin(ag::attention(lin(x, "q"), lin(x, "k"), lin(x, "v"), spec_.n_heads, segment_ends), "o");
    x = ag::layer_norm(ag::add(x, a), P(enc(i, "ln1.gain")), P(enc(i, "ln1.bias")));
    const ag::Var ff = lin(ag::relu(lin(x, "ff1")), "ff2");
    x = ag::layer_norm(ag::add(x, ff), P(enc(i, "ln2.gain")), P(enc(i, "ln2.bias")));
  }
  return x;
}

TokenBundle Generator::tokenize(const SlotGroup& group, const ParamSet& params, const Tensor& z,
                                const GradSet& grads) const {
  if (z.rank() != 2 || z.dim(0) == 0 || z.dim(1) != backbone_.feature_dim())
    throw std::invalid_argument("tokenize: features must be [B>=1, F]");
  const ag::VarMap phi = ag::leaves(params_, false);
  const ag::Var zmean = ag::mean_rows(ag::Var::constant(z));
  return build_tokens(phi, group, params, zmean, rms_normalized(grads)).meta;
}

ag::VarMap Generator::generate(const ag::VarMap& phi, const ParamSet& params, const Tensor& z,
                               const GradSet& grads) const {
  if (z.rank() != 2 || z.dim(0) == 0 || z.dim(1) != backbone_.feature_dim())
    throw std::invalid_argument("generate: features must be [B>=1, F]");
  for (const auto& id : generated_slots())
    if (!params.contains(id)) throw std::invalid_argument("generate: missing source slot '" + id + "'");
  const GradSet normalized = rms_normalized(grads);
  const ag::Var zmean = ag::mean_rows(ag::Var::constant(z));

  ag::VarMap out;
  for (const auto& [id, t] : params.entries()) out.emplace(id, ag::Var::constant(t));

  const auto gs = groups();
  std::vector<Tokens> toks;
  for (const auto& g : gs) toks.push_back(build_tokens(phi, g, params, zmean, normalized));

  std::vector<ag::Var> all;
  std::vector<std::size_t> offsets, ends;
  std::size_t total = 0;
  for (const auto& t : toks) {
    all.push_back(t.x);
    offsets.push_back(total);
    total += t.x.shape()[0];
    ends.push_back(total);
  }
  if (spec_.joint) ends = {total};
  const ag::Var h = encode(phi, ag::concat_rows(all), ends);

  for (std::size_t gi = 0; gi < gs.size(); ++gi) {
    const SlotGroup& g = gs[gi];
    if (g.kind == SlotGroup::Kind::bn) {
      const std::size_t C = backbone_.channels.at(g.layer - 1);
      const ag::Var delta = ag::linear(ag::slice_rows(h, offsets[gi], offsets[gi] + 2), phi.at(out_w(C)), phi.at(out_b(C)));
      const std::string gid = gamma_slot(g.layer), bid = beta_slot(g.layer);
      out[gid] = ag::add(ag::Var::constant(params.at(gid)), ag::reshape(ag::slice_rows(delta, 0, 1), {C}));
      out[bid] = ag::add(ag::Var::constant(params.at(bid)), ag::reshape(ag::slice_rows(delta, 1, 2), {C}));
    } else {
      const std::size_t K = static_cast<std::size_t>(backbone_.n_classes), F = backbone_.feature_dim();
      const ag::Var delta = ag::linear(ag::slice_rows(h, offsets[gi], offsets[gi] + K), phi.at(out_w(F)), phi.at(out_b(F)));
      out[kClassifierSlot] = ag::add(ag::Var::constant(params.at(kClassifierSlot)), delta);
    }
  }
  return out;
}

ParamSet Generator::generate(const ParamSet& params, const Tensor& z, const GradSet& grads) const {
  const ag::VarMap vars = generate(ag::leaves(params_, false), params, z, grads);
  ParamSet out;
  for (const auto& [id, v] : vars) {
    if (!all_finite(v.value())) throw std::runtime_error("generator produced non-finite values for slot '" + id + "'");
    out.set(id, v.value());
  }
  return out;
}

}  // namespace ttg
