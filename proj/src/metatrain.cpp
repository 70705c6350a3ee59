#include "ttg/metatrain.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace ttg {

void TrainConfig::validate() const {
  if (n_iter > 0 && batch_size == 0) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (!(lr > 0.0) || !(backbone_lr > 0.0)) throw std::invalid_argument("train config: learning rates must be > 0");
  if (optimizer != "adam") throw std::invalid_argument("train config: unsupported optimizer '" + optimizer + "'");
  if (log_every == 0) throw std::invalid_argument("train config: log_every must be >= 1");
  if (eval_every > 0 && !(holdout_fraction > 0.0 && holdout_fraction < 1.0))
    throw std::invalid_argument("train config: holdout_fraction must be in (0, 1)");
  backbone.validate();
  generator.validate();
}

std::string TrainConfig::hash() const {
  const std::string text = nlohmann::json(*this).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"n_iter", c.n_iter},
       {"lr", c.lr},
       {"backbone_lr", c.backbone_lr},
       {"batch_size", c.batch_size},
       {"optimizer", c.optimizer},
       {"seed", c.seed},
       {"loss", to_string(c.loss)},
       {"backbone", c.backbone},
       {"generator", c.generator},
       {"log_every", c.log_every},
       {"eval_every", c.eval_every},
       {"holdout_fraction", c.holdout_fraction}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.n_iter = j.value("n_iter", d.n_iter);
  c.lr = j.value("lr", d.lr);
  c.backbone_lr = j.value("backbone_lr", c.lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.optimizer = j.value("optimizer", d.optimizer);
  c.seed = j.value("seed", d.seed);
  c.loss = parse_loss(j.value("loss", std::string("entropy")));
  c.backbone = j.contains("backbone") ? j.at("backbone").get<BackboneSpec>() : d.backbone;
  c.generator = j.contains("generator") ? j.at("generator").get<GeneratorSpec>() : d.generator;
  c.log_every = j.value("log_every", d.log_every);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.holdout_fraction = j.value("holdout_fraction", d.holdout_fraction);
}

void to_json(nlohmann::json& j, const MetricsRow& r) {
  j = {{"iter", r.iter},
       {"meta_source_ce", r.meta_source_ce},
       {"meta_target_ce", r.meta_target_ce},
       {"wallclock_s", r.wallclock_s}};
  if (r.val_acc) j["val_acc"] = *r.val_acc;
}

void from_json(const nlohmann::json& j, MetricsRow& r) {
  r.iter = j.at("iter").get<std::size_t>();
  r.meta_source_ce = j.at("meta_source_ce").get<double>();
  r.meta_target_ce = j.at("meta_target_ce").get<double>();
  r.wallclock_s = j.at("wallclock_s").get<double>();
  if (j.contains("val_acc")) r.val_acc = j.at("val_acc").get<double>();
}

MetaSplit split_meta(std::size_t n_domains, Rng& rng) {
  if (n_domains < 2) throw std::invalid_argument("split_meta: need at least 2 source domains");
  MetaSplit s;
  s.target = rng.index(n_domains);
  for (std::size_t d = 0; d < n_domains; ++d)
    if (d != s.target) s.source.push_back(d);
  return s;
}

double meta_source_step(Backbone& model, Adam& opt, const LabeledBatch& batch) {
  ag::VarMap vars = model.bind(nullptr, true);
  Backbone::Output out = model.run(batch.inputs, vars, NormMode::batch);
  ag::Var loss = ag::cross_entropy(out.logits, batch.labels);
  const double value = loss.value()[0];
  if (!std::isfinite(value)) throw std::runtime_error("meta-source step: non-finite cross-entropy");
  loss.backward();
  opt.step(model.parameters(), ag::grads(vars));
  model.update_running_stats(out.batch_stats);
  return value;
}

MetaTargetResult meta_target_step(const Backbone& model, Generator& gen, Adam& opt, UnsupervisedLoss loss,
                                  const LabeledBatch& batch) {
  const std::vector<std::string> slots = gen.generated_slots();
  const ParamSet source = model.extract_all();
  const Probe p = probe(model, loss, batch.inputs, source, slots);
  ag::VarMap phi = ag::leaves(gen.parameters(), true);
  const ag::VarMap generated = gen.generate(phi, source, p.features, p.grads);
  ag::VarMap vars = model.bind(nullptr, false);
  for (const auto& id : slots) vars[id] = generated.at(id);
  Backbone::Output out = model.run(batch.inputs, vars, NormMode::running);
  ag::Var ce = ag::cross_entropy(out.logits, batch.labels);
  MetaTargetResult r{ce.value()[0], out.logits.value()};
  if (!std::isfinite(r.loss)) throw std::runtime_error("meta-target step: non-finite cross-entropy");
  ce.backward();
  opt.step(gen.parameters(), ag::grads(phi));
  return r;
}

double generalizeformer_accuracy(const Backbone& model, const Generator& gen, UnsupervisedLoss loss,
                                 const data::DomainDataset& ds, std::size_t batch_size) {
  if (ds.size() == 0) return 0.0;
  const ParamSet source = model.extract_all();
  const auto slots = gen.generated_slots();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < ds.size(); b += batch_size) {
    const std::size_t e = std::min(ds.size(), b + batch_size);
    const Tensor x = ds.inputs.slice_rows(b, e);
    const Probe p = probe(model, loss, x, source, slots);
    const ParamSet target = gen.generate(source, p.features, p.grads);
    const auto pred = argmax_rows(model.forward(x, &target));
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ds.labels[b + i];
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

Trainer::Trainer(TrainConfig config, std::vector<data::DomainDataset> sources) : config_(std::move(config)) {
  config_.validate();
  if (sources.size() < 2) throw std::invalid_argument("train: need at least 2 source domains");
  for (const auto& ds : sources) {
    if (ds.n_classes != config_.backbone.n_classes)
      throw std::invalid_argument("train: dataset class count does not match the backbone");
    if (ds.size() == 0) throw std::invalid_argument("train: empty source domain");
  }
  if (config_.eval_every > 0) {
    for (const auto& ds : sources) {
      auto [tr, va] = data::holdout_split(ds, config_.holdout_fraction, config_.seed);
      train_.push_back(std::move(tr));
      val_.push_back(std::move(va));
    }
  } else {
    train_ = std::move(sources);
  }
  backbone_ = Backbone(config_.backbone, derive_seed(config_.seed, 1));
  generator_ = Generator(config_.generator, config_.backbone, derive_seed(config_.seed, 2));
  theta_opt_ = Adam(AdamConfig{.lr = config_.backbone_lr});
  phi_opt_ = Adam(AdamConfig{.lr = config_.lr});
  rng_ = Rng(derive_seed(config_.seed, 3));
}

LabeledBatch Trainer::draw(const std::vector<std::size_t>& domains, std::size_t n) {
  std::size_t total = 0;
  for (std::size_t d : domains) total += train_[d].size();
  const auto picks = rng_.sample(total, std::min(n, total));
  const data::DomainDataset& first = train_[domains.front()];
  Shape shape = first.inputs.shape();
  shape[0] = picks.size();
  const std::size_t stride = numel(shape) / picks.size();
  LabeledBatch b{Tensor(shape), {}};
  for (std::size_t i = 0; i < picks.size(); ++i) {
    std::size_t idx = picks[i];
    std::size_t di = 0;
    while (idx >= train_[domains[di]].size()) idx -= train_[domains[di++]].size();
    const data::DomainDataset& ds = train_[domains[di]];
    std::copy(ds.inputs.data() + idx * stride, ds.inputs.data() + (idx + 1) * stride, b.inputs.data() + i * stride);
    b.labels.push_back(ds.labels[idx]);
  }
  return b;
}

void Trainer::step() {
  if (done()) return;
  const auto t0 = std::chrono::steady_clock::now();
  const MetaSplit split = split_meta(train_.size(), rng_);
  const LabeledBatch src = draw(split.source, config_.batch_size);
  const double ls = meta_source_step(backbone_, theta_opt_, src);
  const LabeledBatch tgt = draw({split.target}, config_.batch_size);
  const double lt = meta_target_step(backbone_, generator_, phi_opt_, config_.loss, tgt).loss;
  ++iter_;
  window_source_ += ls;
  window_target_ += lt;
  ++window_n_;
  elapsed_s_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (config_.eval_every > 0 && (iter_ % config_.eval_every == 0 || done())) evaluate_and_select();
  if (iter_ % config_.log_every == 0 || done()) {
    MetricsRow row{iter_, window_source_ / static_cast<double>(window_n_),
                   window_target_ / static_cast<double>(window_n_), elapsed_s_, last_val_};
    metrics_.push_back(row);
    window_source_ = window_target_ = 0.0;
    window_n_ = 0;
    if (on_metrics) on_metrics(row);
  }
}

void Trainer::run(std::size_t until) {
  while (iter_ < std::min(until, config_.n_iter)) step();
}

void Trainer::evaluate_and_select() {
  std::size_t correct = 0, total = 0;
  for (const auto& ds : val_) {
    const double acc = generalizeformer_accuracy(backbone_, generator_, config_.loss, ds, config_.batch_size);
    correct += static_cast<std::size_t>(std::llround(acc * static_cast<double>(ds.size())));
    total += ds.size();
  }
  last_val_ = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  // ties keep the later, longer-trained snapshot
  if (*last_val_ >= best_val_acc_) {
    best_val_acc_ = *last_val_;
    best_iter_ = iter_;
    best_backbone_ = backbone_.state();
    best_generator_ = generator_.parameters();
  }
}

namespace {

void put_prefixed(TensorMap& out, const std::string& prefix, const TensorMap& in) {
  for (const auto& [k, t] : in) out.emplace(prefix + k, t);
}

TensorMap take_prefixed(const TensorMap& in, const std::string& prefix) {
  TensorMap out;
  for (const auto& [k, t] : in)
    if (k.rfind(prefix, 0) == 0) out.emplace(k.substr(prefix.size()), t);
  return out;
}

}  // namespace

TensorMap Trainer::state_tensors() const {
  TensorMap out;
  put_prefixed(out, "backbone/", backbone_.state());
  put_prefixed(out, "generator/", generator_.parameters());
  put_prefixed(out, "theta_opt/", theta_opt_.state());
  put_prefixed(out, "phi_opt/", phi_opt_.state());
  put_prefixed(out, "best_backbone/", best_backbone_);
  put_prefixed(out, "best_generator/", best_generator_);
  return out;
}

nlohmann::json Trainer::state_meta() const {
  nlohmann::json j = {{"config", config_},
                      {"iteration", iter_},
                      {"rng", rng_.state()},
                      {"theta_steps", theta_opt_.steps()},
                      {"phi_steps", phi_opt_.steps()},
                      {"window_source", window_source_},
                      {"window_target", window_target_},
                      {"window_n", window_n_},
                      {"elapsed_s", elapsed_s_},
                      {"metrics", metrics_},
                      {"best_iter", best_iter_},
                      {"best_val_acc", best_val_acc_}};
  if (last_val_) j["last_val"] = *last_val_;
  return j;
}

void Trainer::restore(const TensorMap& tensors, const nlohmann::json& meta) {
  if (meta.at("config").get<TrainConfig>().hash() != config_.hash())
    throw std::invalid_argument("trainer: state was produced by a different config");
  backbone_.load_state(take_prefixed(tensors, "backbone/"));
  TensorMap gen = take_prefixed(tensors, "generator/");
  for (const auto& [k, t] : generator_.parameters())
    if (!gen.count(k) || gen.at(k).shape() != t.shape())
      throw std::invalid_argument("trainer: generator state does not match '" + k + "'");
  generator_.parameters() = std::move(gen);
  theta_opt_.load_state(take_prefixed(tensors, "theta_opt/"), meta.at("theta_steps").get<std::uint64_t>());
  phi_opt_.load_state(take_prefixed(tensors, "phi_opt/"), meta.at("phi_steps").get<std::uint64_t>());
  best_backbone_ = take_prefixed(tensors, "best_backbone/");
  best_generator_ = take_prefixed(tensors, "best_generator/");
  iter_ = meta.at("iteration").get<std::size_t>();
  rng_.restore(meta.at("rng").get<std::string>());
  window_source_ = meta.at("window_source").get<double>();
  window_target_ = meta.at("window_target").get<double>();
  window_n_ = meta.at("window_n").get<std::size_t>();
  elapsed_s_ = meta.at("elapsed_s").get<double>();
  metrics_ = meta.at("metrics").get<std::vector<MetricsRow>>();
  best_iter_ = meta.at("best_iter").get<std::size_t>();
  best_val_acc_ = meta.at("best_val_acc").get<double>();
  last_val_.reset();
  if (meta.contains("last_val")) last_val_ = meta.at("last_val").get<double>();
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c{config_, backbone_, generator_, iter_, best_val_acc_, metrics_};
  if (!best_backbone_.empty()) {
    c.backbone.load_state(best_backbone_);
    c.generator.parameters() = best_generator_;
    c.best_iter = best_iter_;
  }
  c.backbone.set_statistics_frozen(false);
  return c;
}

Checkpoint train(const TrainConfig& config, const std::vector<data::DomainDataset>& sources) {
  Trainer t(config, sources);
  t.run();
  return t.checkpoint();
}

}  // namespace ttg
