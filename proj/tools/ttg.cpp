// Command-line entry point: train, adapt, eval, report, export.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ttg/checkpoint.hpp"
#include "ttg/harness.hpp"
#include "ttg/metatrain.hpp"
#include "ttg/strategies.hpp"
#include "ttg/synthdata.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ttg;

namespace {

json read_json_arg(const std::string& arg) {
  if (!arg.empty() && (arg.front() == '{' || arg.front() == '[')) return json::parse(arg);
  std::ifstream in(arg);
  if (!in) throw std::runtime_error("cannot open " + arg);
  return json::parse(in);
}

// {"angles": [...], "n_per_domain": N, "n_classes": K, "image_size": S, "seed": s}
// or {"import": "<dir>"}.
std::vector<data::DomainDataset> datasets_from(const json& spec, std::uint64_t default_seed) {
  if (spec.contains("import")) return data::import_datasets(spec.at("import").get<std::string>());
  return data::make_rotated_domains(spec.value("seed", default_seed),
                                    spec.value("angles", std::vector<double>{0, 30, 60}),
                                    spec.value("n_per_domain", std::size_t{300}), spec.value("n_classes", 5),
                                    spec.value("image_size", std::size_t{16}));
}

struct Overrides {
  std::string loss;
  std::size_t gen_layers = 0;

  void apply(TrainConfig& c) const {
    if (!loss.empty()) c.loss = parse_loss(loss);
    if (gen_layers) c.generator.n_layers = gen_layers;
  }
};

int cmd_train(const std::string& config_path, const fs::path& out, const Overrides& ov, const std::string& resume,
              std::size_t state_every) {
  const json doc = read_json_arg(config_path);
  TrainConfig cfg = doc.get<TrainConfig>();
  ov.apply(cfg);
  const auto sources = datasets_from(doc.value("data", json::object()), derive_seed(cfg.seed, 500));
  fs::create_directories(out);
  Trainer trainer(cfg, sources);
  if (!resume.empty()) load_trainer_state(resume, trainer);
  std::ofstream metrics(out / "metrics.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  trainer.on_metrics = [&](const MetricsRow& r) {
    metrics << json(r).dump() << '\n' << std::flush;
    std::cerr << json(r).dump() << '\n';
  };
  while (!trainer.done()) {
    const std::size_t next = state_every ? trainer.iteration() + state_every : cfg.n_iter;
    trainer.run(next);
    if (state_every) save_trainer_state(out / "state", trainer);
  }
  const Checkpoint ckpt = trainer.checkpoint();
  save_checkpoint(out / "checkpoint", ckpt);
  std::cout << json{{"checkpoint", (out / "checkpoint").string()},
                    {"config_hash", cfg.hash()},
                    {"best_iter", ckpt.best_iter},
                    {"best_val_acc", ckpt.best_val_acc}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_adapt(const fs::path& ckpt_dir, const std::string& strategy, const std::string& stream_arg,
              std::size_t batch_size, const std::string& out, const Overrides& ov) {
  const Checkpoint ckpt = load_checkpoint(ckpt_dir);
  const json spec = read_json_arg(stream_arg);
  const auto datasets = datasets_from(spec, derive_seed(ckpt.config.seed, 500));
  const auto policy = data::parse_order_policy(spec.value("policy", std::string("single_domain")));
  const auto s = data::stream(datasets, batch_size, policy, spec.value("stream_seed", std::uint64_t{0}));
  StrategyOptions opts;
  opts.loss = ov.loss.empty() ? ckpt.config.loss : parse_loss(ov.loss);
  auto strat = make_strategy(parse_strategy(strategy), ckpt.backbone, &ckpt.generator, opts);
  const RunMetrics m = run_stream(s, *strat);
  std::ostream* rec = &std::cout;
  std::ofstream file;
  if (!out.empty()) {
    fs::create_directories(out);
    file.open(fs::path(out) / "metrics.jsonl", std::ios::trunc);
    rec = &file;
  }
  for (const auto& r : m.records) *rec << json(r).dump() << '\n';
  const std::string header = "strategy,batch_size,n_batches,accuracy,median_ms,p95_ms,degenerate";
  char row[256];
  std::snprintf(row, sizeof row, "%s,%zu,%zu,%.6f,%.4f,%.4f,%d", m.strategy.c_str(), batch_size, m.records.size(),
                m.accuracy(), m.median_ms(), m.p95_ms(), m.any_degenerate() ? 1 : 0);
  if (!out.empty()) std::ofstream(fs::path(out) / "summary.csv", std::ios::trunc) << header << '\n' << row << '\n';
  std::cerr << header << '\n' << row << '\n';
  return 0;
}

int cmd_eval(const std::string& name, const std::string& config_path, const fs::path& out, const std::string& cache,
             const std::vector<std::uint64_t>& seeds, const Overrides& ov) {
  ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : read_json_arg(config_path).get<ExperimentConfig>();
  ov.apply(cfg.train);
  if (!ov.loss.empty()) cfg.strategy.loss = parse_loss(ov.loss);
  if (!seeds.empty()) cfg.seeds = seeds;
  cfg.out_dir = out;
  if (!cache.empty()) cfg.cache_dir = cache;
  cfg.threads = threads_from_env();
  CheckpointCache cc(cfg.cache_dir);
  const ExperimentResult r = run_experiment(name, cfg, cc);
  for (const auto& row : r.report.summary())
    std::cout << name << ' ' << json(row.labels).dump() << ' ' << row.metric << ' ' << row.mean << " +- " << row.std
              << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Test-time parameter generation: training, adaptation and experiments"};
  app.require_subcommand(1);
  Overrides ov;
  app.add_option("--ttg-loss", ov.loss, "Unsupervised loss for gradient inputs")
      ->check(CLI::IsMember({"entropy", "pseudo", "memo"}));
  app.add_option("--gen-layers", ov.gen_layers, "Generator depth")->check(CLI::IsMember({2, 4, 8}));

  std::string config, out, resume, ckpt, strategy, stream_spec, cache, exp_name, report_dir;
  std::size_t batch_size = 20, state_every = 0;
  std::vector<std::uint64_t> seeds;

  auto* train = app.add_subcommand("train", "Meta-train backbone and generator");
  train->add_option("--config", config, "TrainConfig JSON file or inline JSON")->required();
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--resume", resume, "Trainer state directory to resume from");
  train->add_option("--state-every", state_every, "Save resumable state every N iterations");

  auto* adapt = app.add_subcommand("adapt", "Run one strategy over a target stream");
  adapt->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  adapt->add_option("--strategy", strategy, "erm | generalizeformer | tent | prototype_adjust")->required();
  adapt->add_option("--stream", stream_spec, "Stream spec JSON file or inline JSON")->required();
  adapt->add_option("--batch-size", batch_size, "Test batch size")->check(CLI::PositiveNumber);
  adapt->add_option("--out", out, "Directory for metrics.jsonl and summary.csv");

  auto* eval = app.add_subcommand("eval", "Run an experiment over several seeds");
  eval->add_option("experiment", exp_name, "Experiment")->required()->check(CLI::IsMember(experiment_names()));
  eval->add_option("--config", config, "ExperimentConfig JSON file or inline JSON");
  eval->add_option("--out", out, "Output directory")->required();
  eval->add_option("--cache", cache, "Checkpoint cache directory");
  eval->add_option("--seeds", seeds, "Seeds (default 0..4)")->delimiter(',');

  auto* report = app.add_subcommand("report", "Regenerate summaries and plots from stored JSONL");
  report->add_option("dir", report_dir, "Experiment output directory")->required();

  auto* exp = app.add_subcommand("export", "Write rotated-domain datasets to disk");
  std::string data_spec;
  exp->add_option("--data", data_spec, "Dataset spec JSON")->required();
  exp->add_option("--out", out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(config, out, ov, resume, state_every);
    if (*adapt) return cmd_adapt(ckpt, strategy, stream_spec, batch_size, out, ov);
    if (*eval) return cmd_eval(exp_name, config, out, cache, seeds, ov);
    if (*report) {
      const ExperimentReport r = regenerate_report(report_dir);
      for (const auto& p : r.artifacts) std::cout << p.string() << '\n';
      return 0;
    }
    if (*exp) {
      const json spec = read_json_arg(data_spec);
      data::export_datasets(out, datasets_from(spec, 0), spec);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
