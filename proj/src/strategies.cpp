#include "ttg/strategies.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace ttg {

std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::erm: return "erm";
    case StrategyKind::generalizeformer: return "generalizeformer";
    case StrategyKind::tent: return "tent";
    case StrategyKind::prototype_adjust: return "prototype_adjust";
  }
  return "unknown";
}

StrategyKind parse_strategy(const std::string& name) {
  if (name == "erm") return StrategyKind::erm;
  if (name == "generalizeformer" || name == "gf") return StrategyKind::generalizeformer;
  if (name == "tent") return StrategyKind::tent;
  if (name == "prototype_adjust" || name == "prototype") return StrategyKind::prototype_adjust;
  throw std::invalid_argument("unknown strategy '" + name + "'");
}

AdaptResult adapt_batch_generalizeformer(const Tensor& x, const Backbone& source, const Generator& gen,
                                         UnsupervisedLoss loss) {
  if (x.rank() != 4 || x.dim(0) == 0) throw std::invalid_argument("generalizeformer: empty batch");
  const ParamSet theta_s = source.extract_all();
  const Probe p = probe(source, loss, x, theta_s, gen.generated_slots());
  ParamSet theta_t = gen.generate(theta_s, p.features, p.grads);
  Tensor logits = source.forward(x, &theta_t);
  return {std::move(logits), std::move(theta_t), false};
}

// ---- Tent ----

TentStrategy::TentStrategy(const Backbone& source, TentConfig config)
    : model_(source), config_(config), opt_(AdamConfig{.lr = config.lr}) {
  if (config_.lr < 0.0) throw std::invalid_argument("tent: lr must be >= 0");
  model_.set_statistics_frozen(true);
}

AdaptResult TentStrategy::adapt(const Tensor& x) {
  const std::size_t n_blocks = model_.spec().n_blocks();
  auto trainable = [&](const std::string& name) {
    if (config_.full_model) return true;
    for (std::size_t l = 1; l <= n_blocks; ++l)
      if (name == gamma_slot(l) || name == beta_slot(l)) return true;
    return false;
  };
  AdaptResult result;
  for (std::size_t s = 0; s < std::max<std::size_t>(1, config_.steps); ++s) {
    ag::VarMap vars;
    for (const auto& [name, t] : model_.parameters()) vars.emplace(name, ag::Var::leaf(t, trainable(name)));
    Backbone::Output out = model_.run(x, vars, NormMode::batch);
    if (s == 0) {
      result.logits = out.logits.value();
      result.degenerate_variance = x.dim(0) == 1;
      for (const auto& bs : out.batch_stats)
        for (double v : bs.var.values())
          if (v <= model_.spec().bn_eps) result.degenerate_variance = true;
    }
    if (s >= config_.steps) break;
    ag::Var loss = ag::entropy(out.logits);
    loss.backward();
    TensorMap g;
    for (const auto& [name, v] : vars)
      if (v.requires_grad()) g.emplace(name, v.grad());
    opt_.step(model_.parameters(), g);
  }
  return result;
}

// ---- prototype adjustment ----

PrototypeStrategy::PrototypeStrategy(const Backbone& source, PrototypeConfig config)
    : source_(&source), config_(config), supports_(static_cast<std::size_t>(source.spec().n_classes)),
      seen_entropies_(supports_.size()) {
  if (config_.capacity == 0) throw std::invalid_argument("prototype: capacity must be >= 1");
}

Tensor PrototypeStrategy::classifier() const {
  const Tensor& c = source_->parameters().at(kClassifierSlot);
  const std::size_t K = c.dim(0), F = c.dim(1);
  bool any = false;
  for (const auto& sup : supports_) any = any || !sup.empty();
  if (!any) return c;
  // every row becomes the unit-norm centroid of its normalized members,
  // the source row being the first member of each class
  Tensor w({K, F}, 0.0);
  const auto accumulate = [&](std::size_t k, const double* v) {
    double n = 0.0;
    for (std::size_t f = 0; f < F; ++f) n += v[f] * v[f];
    n = std::sqrt(n);
    if (n == 0.0) return;
    for (std::size_t f = 0; f < F; ++f) w.at(k, f) += v[f] / n;
  };
  for (std::size_t k = 0; k < K; ++k) {
    accumulate(k, c.data() + k * F);
    for (const Tensor& s : supports_[k]) accumulate(k, s.data());
    double n = 0.0;
    for (std::size_t f = 0; f < F; ++f) n += w.at(k, f) * w.at(k, f);
    n = std::sqrt(n);
    if (n > 0.0)
      for (std::size_t f = 0; f < F; ++f) w.at(k, f) /= n;
  }
  return w;
}

Tensor PrototypeStrategy::logits_for(const Tensor& z) const {
  return ag::matmul_nt(ag::Var::constant(z), ag::Var::constant(classifier())).value();
}

Tensor PrototypeStrategy::predict(const Tensor& x) const { return logits_for(source_->features(x)); }

Tensor PrototypeStrategy::evaluate(const Tensor& x) const { return predict(x); }

std::vector<std::size_t> PrototypeStrategy::support_sizes() const {
  std::vector<std::size_t> out;
  for (const auto& s : supports_) out.push_back(s.size());
  return out;
}

AdaptResult PrototypeStrategy::adapt(const Tensor& x) {
  const Tensor z = source_->features(x);
  // pseudo-labels and confidences come from the fixed source classifier
  const Tensor source_logits =
      ag::matmul_nt(ag::Var::constant(z), ag::Var::constant(source_->parameters().at(kClassifierSlot))).value();
  const std::vector<int> pseudo = argmax_rows(source_logits);
  const std::vector<double> ent = row_entropies(source_logits);
  const std::size_t F = z.dim(1);
  for (std::size_t i = 0; i < pseudo.size(); ++i) {
    const auto k = static_cast<std::size_t>(pseudo[i]);
    auto& seen = seen_entropies_[k];
    seen.push_back(ent[i]);
    if (!(ent[i] < percentile(seen, 0.5))) continue;
    auto& sup = supports_[k];
    sup.emplace_back(Shape{F}, std::vector<double>(z.data() + i * F, z.data() + (i + 1) * F));
    if (sup.size() > config_.capacity) sup.erase(sup.begin());
  }
  return {logits_for(z), std::nullopt, false};
}

std::unique_ptr<Strategy> make_strategy(StrategyKind kind, const Backbone& source, const Generator* gen,
                                        const StrategyOptions& options) {
  switch (kind) {
    case StrategyKind::erm: return std::make_unique<ErmStrategy>(source);
    case StrategyKind::generalizeformer:
      if (!gen) throw std::invalid_argument("generalizeformer strategy needs a generator");
      return std::make_unique<GeneralizeFormerStrategy>(source, *gen, options.loss);
    case StrategyKind::tent: return std::make_unique<TentStrategy>(source, options.tent);
    case StrategyKind::prototype_adjust: return std::make_unique<PrototypeStrategy>(source, options.prototype);
  }
  throw std::invalid_argument("unknown strategy");
}

// ---- stream evaluation ----

std::vector<double> row_entropies(const Tensor& logits) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  std::vector<double> out(B);
  for (std::size_t i = 0; i < B; ++i) {
    const double* r = logits.data() + i * K;
    const double m = *std::max_element(r, r + K);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(r[k] - m);
    const double lse = m + std::log(s);
    double h = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double lp = r[k] - lse;
      h -= std::exp(lp) * lp;
    }
    out[i] = h;
  }
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile: empty input");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(values.size() - 1, lo + 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

void to_json(nlohmann::json& j, const BatchRecord& r) {
  nlohmann::json pd = nlohmann::json::object();
  for (const auto& [d, c] : r.per_domain) pd[std::to_string(d)] = {c.n, c.n_correct};
  j = {{"batch_idx", r.batch_idx},       {"domain_id", r.domain_id}, {"n", r.n},
       {"n_correct", r.n_correct},       {"mean_entropy", r.mean_entropy}, {"adapt_ms", r.adapt_ms},
       {"degenerate_variance", r.degenerate_variance}, {"per_domain", pd}};
}

void from_json(const nlohmann::json& j, BatchRecord& r) {
  r.batch_idx = j.at("batch_idx").get<std::size_t>();
  r.domain_id = j.at("domain_id").get<int>();
  r.n = j.at("n").get<std::size_t>();
  r.n_correct = j.at("n_correct").get<std::size_t>();
  r.mean_entropy = j.at("mean_entropy").get<double>();
  r.adapt_ms = j.at("adapt_ms").get<double>();
  r.degenerate_variance = j.value("degenerate_variance", false);
  r.per_domain.clear();
  if (j.contains("per_domain"))
    for (const auto& [k, v] : j.at("per_domain").items())
      r.per_domain[std::stoi(k)] = {v.at(0).get<std::size_t>(), v.at(1).get<std::size_t>()};
}

double RunMetrics::accuracy() const {
  std::size_t n = 0, c = 0;
  for (const auto& r : records) {
    n += r.n;
    c += r.n_correct;
  }
  return n ? static_cast<double>(c) / static_cast<double>(n) : 0.0;
}

std::map<int, double> RunMetrics::per_domain_accuracy() const {
  std::map<int, DomainCount> total;
  for (const auto& r : records)
    for (const auto& [d, c] : r.per_domain) {
      total[d].n += c.n;
      total[d].n_correct += c.n_correct;
    }
  std::map<int, double> out;
  for (const auto& [d, c] : total) out[d] = static_cast<double>(c.n_correct) / static_cast<double>(c.n);
  return out;
}

double RunMetrics::total_ms() const {
  double s = 0.0;
  for (const auto& r : records) s += r.adapt_ms;
  return s;
}

namespace {
std::vector<double> times_of(const std::vector<BatchRecord>& records) {
  std::vector<double> t;
  for (const auto& r : records) t.push_back(r.adapt_ms);
  return t;
}
}  // namespace

double RunMetrics::median_ms() const { return records.empty() ? 0.0 : percentile(times_of(records), 0.5); }
double RunMetrics::p95_ms() const { return records.empty() ? 0.0 : percentile(times_of(records), 0.95); }

bool RunMetrics::any_degenerate() const {
  return std::any_of(records.begin(), records.end(), [](const auto& r) { return r.degenerate_variance; });
}

RunMetrics run_stream(const data::DomainStream& stream, Strategy& strategy) {
  RunMetrics m;
  m.strategy = strategy.name();
  for (std::size_t b = 0; b < stream.batches.size(); ++b) {
    const data::DomainBatch& batch = stream.batches[b];
    const auto t0 = std::chrono::steady_clock::now();
    AdaptResult res = strategy.adapt(batch.inputs);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    const std::vector<int> pred = argmax_rows(res.logits);
    const std::vector<double> ent = row_entropies(res.logits);
    BatchRecord r;
    r.batch_idx = b;
    r.n = batch.size();
    r.adapt_ms = ms;
    r.degenerate_variance = res.degenerate_variance;
    double esum = 0.0;
    for (std::size_t i = 0; i < r.n; ++i) {
      const bool ok = pred[i] == batch.labels[i];
      r.n_correct += ok;
      esum += ent[i];
      DomainCount& dc = r.per_domain[batch.domain_ids[i]];
      ++dc.n;
      dc.n_correct += ok;
    }
    r.mean_entropy = r.n ? esum / static_cast<double>(r.n) : 0.0;
    r.domain_id = r.per_domain.size() == 1 ? r.per_domain.begin()->first : -1;
    m.records.push_back(std::move(r));
  }
  return m;
}

}  // namespace ttg
