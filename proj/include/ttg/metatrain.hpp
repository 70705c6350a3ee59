#pragma once

// Episodic training. Every iteration one source domain is held out as the
// meta-target; the backbone takes a supervised step on the remaining
// domains, then the generator takes a step on the held-out batch through
// parameters it generated from that batch.

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttg/backbone.hpp"
#include "ttg/objectives.hpp"
#include "ttg/optim.hpp"
#include "ttg/paramgen.hpp"
#include "ttg/rng.hpp"
#include "ttg/synthdata.hpp"

namespace ttg {

struct TrainConfig {
  std::size_t n_iter = 1000;
  double lr = 1e-4;            // generator
  double backbone_lr = 1e-4;   // backbone; separate optimizer
  std::size_t batch_size = 32;
  std::string optimizer = "adam";
  std::uint64_t seed = 0;
  UnsupervisedLoss loss = UnsupervisedLoss::entropy;
  BackboneSpec backbone;
  GeneratorSpec generator;
  std::size_t log_every = 100;
  std::size_t eval_every = 100;  // 0 disables model selection
  double holdout_fraction = 0.1;

  void validate() const;
  std::string hash() const;  // stable hex digest of the canonical JSON form
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct MetaSplit {
  std::vector<std::size_t> source;  // S'
  std::size_t target = 0;           // T'
};

MetaSplit split_meta(std::size_t n_domains, Rng& rng);

struct LabeledBatch {
  Tensor inputs;
  std::vector<int> labels;
};

// One Adam step on every backbone learnable against cross-entropy with batch
// statistics, followed by a running-statistics update. Returns the loss.
double meta_source_step(Backbone& model, Adam& opt, const LabeledBatch& batch);

struct MetaTargetResult {
  double loss = 0.0;
  Tensor logits;  // logits of the injected forward
};

// One Adam step on the generator only. Gradients are probed at the current
// backbone parameters and enter the generator as constants.
MetaTargetResult meta_target_step(const Backbone& model, Generator& gen, Adam& opt, UnsupervisedLoss loss,
                                  const LabeledBatch& batch);

struct MetricsRow {
  std::size_t iter = 0;
  double meta_source_ce = 0.0;  // window means
  double meta_target_ce = 0.0;
  double wallclock_s = 0.0;
  std::optional<double> val_acc;
};

void to_json(nlohmann::json& j, const MetricsRow& r);
void from_json(const nlohmann::json& j, MetricsRow& r);

struct Checkpoint {
  TrainConfig config;
  Backbone backbone;
  Generator generator;
  std::size_t best_iter = 0;
  double best_val_acc = 0.0;
  std::vector<MetricsRow> metrics;
};

// Accuracy of generated-parameter inference over a dataset in batches.
double generalizeformer_accuracy(const Backbone& model, const Generator& gen, UnsupervisedLoss loss,
                                 const data::DomainDataset& ds, std::size_t batch_size);

class Trainer {
 public:
  Trainer(TrainConfig config, std::vector<data::DomainDataset> sources);

  std::size_t iteration() const { return iter_; }
  bool done() const { return iter_ >= config_.n_iter; }
  const TrainConfig& config() const { return config_; }
  const Backbone& backbone() const { return backbone_; }
  const Generator& generator() const { return generator_; }
  const std::vector<MetricsRow>& metrics() const { return metrics_; }

  void step();
  void run(std::size_t until);
  void run() { run(config_.n_iter); }

  // Full resumable state: weights, optimizer moments, RNG, selection state.
  TensorMap state_tensors() const;
  nlohmann::json state_meta() const;
  void restore(const TensorMap& tensors, const nlohmann::json& meta);

  // Best validated snapshot, or the current weights when selection is off.
  Checkpoint checkpoint() const;

  std::function<void(const MetricsRow&)> on_metrics;

 private:
  LabeledBatch draw(const std::vector<std::size_t>& domains, std::size_t n);
  void evaluate_and_select();

  TrainConfig config_;
  std::vector<data::DomainDataset> train_;
  std::vector<data::DomainDataset> val_;
  Backbone backbone_;
  Generator generator_;
  Adam theta_opt_;
  Adam phi_opt_;
  Rng rng_;
  std::size_t iter_ = 0;
  double window_source_ = 0.0;
  double window_target_ = 0.0;
  std::size_t window_n_ = 0;
  double elapsed_s_ = 0.0;
  std::vector<MetricsRow> metrics_;
  std::size_t best_iter_ = 0;
  double best_val_acc_ = -1.0;
  std::optional<double> last_val_;
  TensorMap best_backbone_;
  TensorMap best_generator_;
};

Checkpoint train(const TrainConfig& config, const std::vector<data::DomainDataset>& sources);

}  // namespace ttg
