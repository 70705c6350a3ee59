#pragma once

// Experiment drivers. Every experiment writes its raw observations as JSONL
// lines (per-batch records and scalar measurements); the report, CSV summary
// and plots are computed from those lines only, so `report` can regenerate
// them without re-running anything.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttg/metatrain.hpp"
#include "ttg/strategies.hpp"
#include "ttg/synthdata.hpp"

namespace ttg {

using Labels = std::map<std::string, std::string>;

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t n_train_per_domain = 300;
  std::size_t n_test_per_domain = 200;
  int n_classes = 5;
  std::size_t image_size = 16;
  std::size_t test_batch_size = 20;
  TrainConfig train;  // seed replaced per run
  StrategyOptions strategy;
  std::vector<StrategyKind> strategies{StrategyKind::erm, StrategyKind::generalizeformer, StrategyKind::tent,
                                       StrategyKind::prototype_adjust};
  std::vector<double> loo_angles{0, 30, 60, 90};
  std::vector<double> multi_source_angles{0, 15, 75, 90};
  std::vector<double> multi_target_angles{30, 45, 60};
  std::vector<std::size_t> batch_sizes{1, 16, 20, 64, 128};
  double held_out_angle = 90;  // target of forgetting / distance / timing
  std::filesystem::path out_dir;    // empty: nothing written
  std::filesystem::path cache_dir;  // empty: no on-disk checkpoint cache
  std::size_t threads = 1;          // concurrent seeds

  std::string hash() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Reads TTG_THREADS (default 1).
std::size_t threads_from_env();

// One raw observation. Either a per-batch record of a stream run or a scalar.
struct Observation {
  std::uint64_t seed = 0;
  Labels labels;
  std::optional<BatchRecord> record;
  std::string metric;  // scalar only
  double value = 0.0;  // scalar only
};

void to_json(nlohmann::json& j, const Observation& o);
void from_json(const nlohmann::json& j, Observation& o);

struct Cell {
  Labels labels;
  std::uint64_t seed = 0;
  std::string metric;
  double value = 0.0;
};

struct SummaryRow {
  Labels labels;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation over seeds
  std::size_t n = 0;
};

struct ExperimentReport {
  std::string experiment;
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::vector<Cell> cells;  // per-seed values
  std::vector<std::filesystem::path> artifacts;

  std::vector<SummaryRow> summary() const;
  // Mean over seeds of the cells whose labels include `match`.
  double mean(const Labels& match, const std::string& metric) const;
  std::vector<double> values(const Labels& match, const std::string& metric) const;
};

// Per-seed cells from raw observations: stream runs (grouped by labels)
// contribute accuracy, median_ms and p95_ms; scalars pass through.
ExperimentReport build_report(const std::string& experiment, const std::string& config_hash,
                              const std::vector<std::uint64_t>& seeds, const std::vector<Observation>& obs);

// Writes metrics.jsonl, summary.csv, report/<experiment>.svg and
// manifest.json under dir; returns the artifact paths.
std::vector<std::filesystem::path> write_report(const std::filesystem::path& dir, const ExperimentReport& report,
                                                const std::vector<Observation>& obs);
// Rebuilds summary.csv, the plot and the manifest from metrics.jsonl in dir.
ExperimentReport regenerate_report(const std::filesystem::path& dir);

// ---- datasets ----

struct DomainSplit {
  std::vector<data::DomainDataset> train;
  std::vector<data::DomainDataset> test;
};

DomainSplit rotated_split(const ExperimentConfig& cfg, std::uint64_t seed, const std::vector<double>& angles);

// ---- training with a shared cache ----

class CheckpointCache {
 public:
  explicit CheckpointCache(std::filesystem::path dir = {}) : dir_(std::move(dir)) {}
  // `key` must identify the training data and configuration completely.
  std::shared_ptr<const Checkpoint> get_or_train(const nlohmann::json& key, const TrainConfig& config,
                                                 const std::vector<data::DomainDataset>& sources);
  std::size_t trained() const { return trained_; }

 private:
  std::filesystem::path dir_;
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<const Checkpoint>> memory_;
  std::size_t trained_ = 0;
};

// Data, sources and trained checkpoint of the leave-one-out fold that holds
// out `angle` from cfg.loo_angles.
struct HeldOut {
  DomainSplit split;
  std::size_t target = 0;
  std::vector<data::DomainDataset> sources;
  std::shared_ptr<const Checkpoint> ckpt;
};

HeldOut held_out_fold(const ExperimentConfig& cfg, CheckpointCache& cache, std::uint64_t seed, double angle,
                      const TrainConfig& train_cfg);

// Single-domain stream over a test split with the harness's seeding.
data::DomainStream target_stream(const data::DomainDataset& ds, std::size_t batch_size, std::uint64_t seed,
                                 std::uint64_t stream_id);

// ---- experiments ----

struct ExperimentResult {
  ExperimentReport report;
  std::vector<Observation> observations;
};

using ExperimentFn = ExperimentResult (*)(const ExperimentConfig&, CheckpointCache&);

ExperimentResult eval_leave_one_out(const ExperimentConfig& cfg, CheckpointCache& cache);
ExperimentResult eval_forgetting(const ExperimentConfig& cfg, CheckpointCache& cache);
ExperimentResult eval_multi_target(const ExperimentConfig& cfg, CheckpointCache& cache);
ExperimentResult sweep_batch_size(const ExperimentConfig& cfg, CheckpointCache& cache);
ExperimentResult ablate_inputs(const ExperimentConfig& cfg, CheckpointCache& cache);
ExperimentResult ablate_generated_layers(const ExperimentConfig& cfg, CheckpointCache& cache);
ExperimentResult eval_layer_distance(const ExperimentConfig& cfg, CheckpointCache& cache);
ExperimentResult timing_report(const ExperimentConfig& cfg, CheckpointCache& cache);

// name in {loo, forgetting, multitarget, batchsweep, inputs, layers, distance, timing}
ExperimentResult run_experiment(const std::string& name, const ExperimentConfig& cfg, CheckpointCache& cache);
const std::vector<std::string>& experiment_names();

// Per-group relative L2 distance ||theta_t - theta_s|| / ||theta_s|| with the
// BN gamma and beta of one layer treated as a single vector.
std::map<std::string, double> layer_distance(const ParamSet& source, const ParamSet& generated);

// Accuracy of a logits function over a dataset in fixed batches.
double dataset_accuracy(const data::DomainDataset& ds, std::size_t batch_size,
                        const std::function<Tensor(const Tensor&)>& logits);

}  // namespace ttg
