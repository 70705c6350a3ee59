#include "ttg/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "ttg/checkpoint.hpp"

namespace ttg {

namespace fs = std::filesystem;

namespace {

std::string fnv_hex(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string angle_label(double a) {
  std::ostringstream s;
  s << a;
  return s.str();
}

}  // namespace

// ---- configuration ----

std::string ExperimentConfig::hash() const {
  nlohmann::json j = *this;
  j.erase("out_dir");
  j.erase("cache_dir");
  j.erase("threads");
  return fnv_hex(j.dump());
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  std::vector<std::string> strategies;
  for (auto s : c.strategies) strategies.push_back(to_string(s));
  j = {{"seeds", c.seeds},
       {"n_train_per_domain", c.n_train_per_domain},
       {"n_test_per_domain", c.n_test_per_domain},
       {"n_classes", c.n_classes},
       {"image_size", c.image_size},
       {"test_batch_size", c.test_batch_size},
       {"train", c.train},
       {"loss", to_string(c.strategy.loss)},
       {"tent", {{"lr", c.strategy.tent.lr}, {"steps", c.strategy.tent.steps}, {"full_model", c.strategy.tent.full_model}}},
       {"prototype", {{"capacity", c.strategy.prototype.capacity}}},
       {"strategies", strategies},
       {"loo_angles", c.loo_angles},
       {"multi_source_angles", c.multi_source_angles},
       {"multi_target_angles", c.multi_target_angles},
       {"batch_sizes", c.batch_sizes},
       {"held_out_angle", c.held_out_angle},
       {"out_dir", c.out_dir.string()},
       {"cache_dir", c.cache_dir.string()},
       {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  ExperimentConfig d;
  c.seeds = j.value("seeds", d.seeds);
  c.n_train_per_domain = j.value("n_train_per_domain", d.n_train_per_domain);
  c.n_test_per_domain = j.value("n_test_per_domain", d.n_test_per_domain);
  c.n_classes = j.value("n_classes", d.n_classes);
  c.image_size = j.value("image_size", d.image_size);
  c.test_batch_size = j.value("test_batch_size", d.test_batch_size);
  c.train = j.contains("train") ? j.at("train").get<TrainConfig>() : d.train;
  c.strategy.loss = parse_loss(j.value("loss", std::string("entropy")));
  if (j.contains("tent")) {
    const auto& t = j.at("tent");
    c.strategy.tent.lr = t.value("lr", d.strategy.tent.lr);
    c.strategy.tent.steps = t.value("steps", d.strategy.tent.steps);
    c.strategy.tent.full_model = t.value("full_model", d.strategy.tent.full_model);
  }
  if (j.contains("prototype")) c.strategy.prototype.capacity = j.at("prototype").value("capacity", std::size_t{20});
  if (j.contains("strategies")) {
    c.strategies.clear();
    for (const auto& s : j.at("strategies")) c.strategies.push_back(parse_strategy(s.get<std::string>()));
  }
  c.loo_angles = j.value("loo_angles", d.loo_angles);
  c.multi_source_angles = j.value("multi_source_angles", d.multi_source_angles);
  c.multi_target_angles = j.value("multi_target_angles", d.multi_target_angles);
  c.batch_sizes = j.value("batch_sizes", d.batch_sizes);
  c.held_out_angle = j.value("held_out_angle", d.held_out_angle);
  c.out_dir = j.value("out_dir", std::string());
  c.cache_dir = j.value("cache_dir", std::string());
  c.threads = j.value("threads", threads_from_env());
}

std::size_t threads_from_env() {
  const char* v = std::getenv("TTG_THREADS");
  if (!v || !*v) return 1;
  try {
    return std::max<std::size_t>(1, std::stoul(v));
  } catch (const std::exception&) {
    throw std::invalid_argument(std::string("TTG_THREADS must be a positive integer, got '") + v + "'");
  }
}

// ---- observations and reports ----

void to_json(nlohmann::json& j, const Observation& o) {
  j = {{"seed", o.seed}, {"labels", o.labels}};
  if (o.record) {
    j["record"] = *o.record;
  } else {
    j["metric"] = o.metric;
    j["value"] = o.value;
  }
}

void from_json(const nlohmann::json& j, Observation& o) {
  o.seed = j.at("seed").get<std::uint64_t>();
  o.labels = j.at("labels").get<Labels>();
  o.record.reset();
  if (j.contains("record")) {
    o.record = j.at("record").get<BatchRecord>();
  } else {
    o.metric = j.at("metric").get<std::string>();
    o.value = j.at("value").get<double>();
  }
}

namespace {

bool matches(const Labels& labels, const Labels& match) {
  for (const auto& [k, v] : match) {
    auto it = labels.find(k);
    if (it == labels.end() || it->second != v) return false;
  }
  return true;
}

}  // namespace

std::vector<SummaryRow> ExperimentReport::summary() const {
  std::map<std::pair<Labels, std::string>, std::vector<double>> groups;
  std::vector<std::pair<Labels, std::string>> order;
  for (const auto& c : cells) {
    auto key = std::make_pair(c.labels, c.metric);
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(c.value);
  }
  std::vector<SummaryRow> out;
  for (const auto& key : order) {
    const auto& v = groups[key];
    SummaryRow r{key.first, key.second, 0.0, 0.0, v.size()};
    for (double x : v) r.mean += x;
    r.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - r.mean) * (x - r.mean);
      r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<double> ExperimentReport::values(const Labels& match, const std::string& metric) const {
  std::vector<double> out;
  for (const auto& c : cells)
    if (c.metric == metric && matches(c.labels, match)) out.push_back(c.value);
  return out;
}

double ExperimentReport::mean(const Labels& match, const std::string& metric) const {
  const auto v = values(match, metric);
  if (v.empty()) throw std::out_of_range("report '" + experiment + "' has no '" + metric + "' cells for the query");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

ExperimentReport build_report(const std::string& experiment, const std::string& config_hash,
                              const std::vector<std::uint64_t>& seeds, const std::vector<Observation>& obs) {
  ExperimentReport rep{experiment, config_hash, seeds, {}, {}};
  std::map<std::pair<std::uint64_t, Labels>, RunMetrics> runs;
  std::vector<std::pair<std::uint64_t, Labels>> order;
  for (const auto& o : obs) {
    if (o.record) {
      auto key = std::make_pair(o.seed, o.labels);
      if (!runs.count(key)) order.push_back(key);
      runs[key].records.push_back(*o.record);
    } else {
      rep.cells.push_back({o.labels, o.seed, o.metric, o.value});
    }
  }
  for (const auto& key : order) {
    const RunMetrics& m = runs[key];
    rep.cells.push_back({key.second, key.first, "accuracy", m.accuracy()});
    rep.cells.push_back({key.second, key.first, "median_ms", m.median_ms()});
    rep.cells.push_back({key.second, key.first, "p95_ms", m.p95_ms()});
    rep.cells.push_back({key.second, key.first, "degenerate", m.any_degenerate() ? 1.0 : 0.0});
  }
  return rep;
}

namespace {

std::string label_text(const Labels& l) {
  std::string s;
  for (const auto& [k, v] : l) {
    if (!s.empty()) s += ' ';
    s += k + "=" + v;
  }
  return s;
}

std::string xml_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

std::string primary_metric(const std::string& experiment) {
  if (experiment == "timing") return "median_ms";
  if (experiment == "distance") return "rel_l2";
  if (experiment == "forgetting") return "delta";
  return "accuracy";
}

// Horizontal bar chart of mean +- std, one bar per summary row.
void write_svg(const fs::path& path, const std::string& title, const std::vector<SummaryRow>& rows) {
  const double bar_h = 18, gap = 6, left = 360, width = 360, top = 40;
  double lo = 0.0, hi = 0.0;
  for (const auto& r : rows) {
    lo = std::min(lo, r.mean - r.std);
    hi = std::max(hi, r.mean + r.std);
  }
  if (hi - lo <= 0.0) hi = lo + 1.0;
  auto xpos = [&](double v) { return left + (v - lo) / (hi - lo) * width; };
  const double height = top + static_cast<double>(rows.size()) * (bar_h + gap) + 30;
  std::ofstream out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + width + 80 << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<text x=\"10\" y=\"20\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  out << "<line x1=\"" << xpos(0) << "\" y1=\"" << top - 5 << "\" x2=\"" << xpos(0) << "\" y2=\"" << height - 25
      << "\" stroke=\"#444\"/>\n";
  double y = top;
  for (const auto& r : rows) {
    const double x0 = xpos(std::min(0.0, r.mean)), x1 = xpos(std::max(0.0, r.mean));
    out << "<text x=\"" << left - 6 << "\" y=\"" << y + 13 << "\" text-anchor=\"end\">"
        << xml_escape(label_text(r.labels)) << "</text>\n";
    out << "<rect x=\"" << x0 << "\" y=\"" << y << "\" width=\"" << std::max(0.5, x1 - x0) << "\" height=\"" << bar_h
        << "\" fill=\"#4a7fb5\"/>\n";
    out << "<line x1=\"" << xpos(r.mean - r.std) << "\" y1=\"" << y + bar_h / 2 << "\" x2=\"" << xpos(r.mean + r.std)
        << "\" y2=\"" << y + bar_h / 2 << "\" stroke=\"#000\"/>\n";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", r.mean);
    out << "<text x=\"" << xpos(std::max(r.mean + r.std, 0.0)) + 4 << "\" y=\"" << y + 13 << "\">" << buf
        << "</text>\n";
    y += bar_h + gap;
  }
  char lo_s[32], hi_s[32];
  std::snprintf(lo_s, sizeof lo_s, "%.3g", lo);
  std::snprintf(hi_s, sizeof hi_s, "%.3g", hi);
  out << "<text x=\"" << left << "\" y=\"" << height - 8 << "\">" << lo_s << "</text>\n";
  out << "<text x=\"" << left + width << "\" y=\"" << height - 8 << "\" text-anchor=\"end\">" << hi_s << "</text>\n";
  out << "</svg>\n";
}

void write_csv(const fs::path& path, const std::vector<SummaryRow>& rows) {
  std::set<std::string> keys;
  for (const auto& r : rows)
    for (const auto& [k, v] : r.labels) keys.insert(k);
  std::ofstream out(path);
  for (const auto& k : keys) out << k << ',';
  out << "metric,mean,std,n\n";
  out.precision(17);
  for (const auto& r : rows) {
    for (const auto& k : keys) {
      auto it = r.labels.find(k);
      out << (it == r.labels.end() ? "" : it->second) << ',';
    }
    out << r.metric << ',' << r.mean << ',' << r.std << ',' << r.n << '\n';
  }
}

}  // namespace

std::vector<fs::path> write_report(const fs::path& dir, const ExperimentReport& report,
                                   const std::vector<Observation>& obs) {
  fs::create_directories(dir / "report");
  const fs::path jsonl = dir / "metrics.jsonl", csv = dir / "summary.csv",
                 svg = dir / "report" / (report.experiment + ".svg"), manifest = dir / "manifest.json";
  {
    std::ofstream out(jsonl, std::ios::trunc);
    for (const auto& o : obs) out << nlohmann::json(o).dump() << '\n';
  }
  const auto rows = report.summary();
  write_csv(csv, rows);
  std::vector<SummaryRow> plotted;
  for (const auto& r : rows)
    if (r.metric == primary_metric(report.experiment)) plotted.push_back(r);
  try {
    write_svg(svg, report.experiment + " (" + primary_metric(report.experiment) + ", mean +- std)", plotted);
  } catch (const std::exception&) {
    // plots are a convenience; the CSV carries the numbers
  }
  const std::vector<fs::path> artifacts{jsonl, csv, svg, manifest};
  std::vector<std::string> names;
  for (const auto& p : artifacts) names.push_back(p.string());
  std::ofstream out(manifest, std::ios::trunc);
  out << nlohmann::json{{"experiment", report.experiment},
                        {"config_hash", report.config_hash},
                        {"seeds", report.seeds},
                        {"n_observations", obs.size()},
                        {"artifacts", names}}
             .dump(2)
      << '\n';
  return artifacts;
}

ExperimentReport regenerate_report(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("no manifest.json in " + dir.string());
  const nlohmann::json manifest = nlohmann::json::parse(mf);
  std::ifstream in(dir / "metrics.jsonl");
  if (!in) throw std::runtime_error("no metrics.jsonl in " + dir.string());
  std::vector<Observation> obs;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) obs.push_back(nlohmann::json::parse(line).get<Observation>());
  ExperimentReport rep = build_report(manifest.at("experiment").get<std::string>(),
                                      manifest.at("config_hash").get<std::string>(),
                                      manifest.at("seeds").get<std::vector<std::uint64_t>>(), obs);
  rep.artifacts = write_report(dir, rep, obs);
  return rep;
}

// ---- datasets ----

namespace {

std::uint64_t data_seed(std::uint64_t seed) { return derive_seed(seed, 500); }

std::pair<data::DomainDataset, data::DomainDataset> split_head(const data::DomainDataset& ds, std::size_t n_head) {
  std::vector<std::size_t> head, tail;
  for (std::size_t i = 0; i < ds.size(); ++i) (i < n_head ? head : tail).push_back(i);
  return {data::subset(ds, head), data::subset(ds, tail)};
}

nlohmann::json rotated_key(const ExperimentConfig& cfg, std::uint64_t seed, const std::vector<double>& angles) {
  return {{"kind", "rotated"},         {"data_seed", data_seed(seed)},       {"angles", angles},
          {"n_train", cfg.n_train_per_domain}, {"n_test", cfg.n_test_per_domain}, {"n_classes", cfg.n_classes},
          {"image_size", cfg.image_size}};
}

std::size_t index_of(const std::vector<double>& angles, double a) {
  auto it = std::find(angles.begin(), angles.end(), a);
  if (it == angles.end()) throw std::invalid_argument("angle " + angle_label(a) + " is not among the domains");
  return static_cast<std::size_t>(it - angles.begin());
}

}  // namespace

DomainSplit rotated_split(const ExperimentConfig& cfg, std::uint64_t seed, const std::vector<double>& angles) {
  auto all = data::make_rotated_domains(data_seed(seed), angles, cfg.n_train_per_domain + cfg.n_test_per_domain,
                                        cfg.n_classes, cfg.image_size);
  DomainSplit s;
  for (const auto& ds : all) {
    auto [tr, te] = split_head(ds, cfg.n_train_per_domain);
    s.train.push_back(std::move(tr));
    s.test.push_back(std::move(te));
  }
  return s;
}

// ---- checkpoint cache ----

std::shared_ptr<const Checkpoint> CheckpointCache::get_or_train(const nlohmann::json& key, const TrainConfig& config,
                                                                const std::vector<data::DomainDataset>& sources) {
  const nlohmann::json full = {{"data", key}, {"config", config}};
  const std::string id = fnv_hex(full.dump());
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = memory_.find(id);
    if (it != memory_.end()) return it->second;
  }
  std::shared_ptr<const Checkpoint> ckpt;
  const fs::path path = dir_.empty() ? fs::path() : dir_ / id;
  if (!path.empty() && fs::exists(path / "manifest.json")) {
    std::ifstream kin(path / "key.json");
    nlohmann::json stored;
    if (kin) stored = nlohmann::json::parse(kin, nullptr, false);
    if (stored == full) ckpt = std::make_shared<const Checkpoint>(load_checkpoint(path));
  }
  if (!ckpt) {
    ckpt = std::make_shared<const Checkpoint>(train(config, sources));
    std::lock_guard<std::mutex> lock(mu_);
    ++trained_;
    if (!path.empty()) {
      const fs::path tmp = dir_ / (id + ".tmp");
      fs::remove_all(tmp);
      save_checkpoint(tmp, *ckpt);
      std::ofstream(tmp / "key.json") << full.dump(2) << '\n';
      fs::remove_all(path);
      fs::rename(tmp, path);
    }
  }
  std::lock_guard<std::mutex> lock(mu_);
  return memory_.emplace(id, ckpt).first->second;
}

// ---- helpers ----

double dataset_accuracy(const data::DomainDataset& ds, std::size_t batch_size,
                        const std::function<Tensor(const Tensor&)>& logits) {
  if (ds.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < ds.size(); b += batch_size) {
    const std::size_t e = std::min(ds.size(), b + batch_size);
    const auto pred = argmax_rows(logits(ds.inputs.slice_rows(b, e)));
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ds.labels[b + i];
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

std::map<std::string, double> layer_distance(const ParamSet& source, const ParamSet& generated) {
  std::map<std::string, std::vector<std::string>> groups;
  for (const auto& id : source.ids()) {
    if (id == kClassifierSlot) groups["classifier"].push_back(id);
    else if (id.rfind("bn", 0) == 0) groups[id.substr(0, id.find('.'))].push_back(id);
  }
  std::map<std::string, double> out;
  for (const auto& [g, ids] : groups) {
    double num = 0.0, den = 0.0;
    for (const auto& id : ids) {
      const Tensor& s = source.at(id);
      const Tensor& t = generated.at(id);
      if (s.shape() != t.shape()) throw std::invalid_argument("layer_distance: shape mismatch for " + id);
      for (std::size_t i = 0; i < s.size(); ++i) {
        num += (t[i] - s[i]) * (t[i] - s[i]);
        den += s[i] * s[i];
      }
    }
    out[g] = den > 0.0 ? std::sqrt(num) / std::sqrt(den) : std::sqrt(num);
  }
  return out;
}

namespace {

using SeedFn = std::function<std::vector<Observation>(std::uint64_t)>;

std::vector<Observation> run_seeds(const ExperimentConfig& cfg, const SeedFn& fn) {
  std::vector<std::vector<Observation>> per(cfg.seeds.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.threads, cfg.seeds.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) per[i] = fn(cfg.seeds[i]);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < cfg.seeds.size(); i += workers) per[i] = fn(cfg.seeds[i]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  std::vector<Observation> all;
  for (auto& v : per) all.insert(all.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
  return all;
}

ExperimentResult finish(const std::string& name, const ExperimentConfig& cfg, std::vector<Observation> obs) {
  ExperimentResult r{build_report(name, cfg.hash(), cfg.seeds, obs), std::move(obs)};
  if (!cfg.out_dir.empty()) r.report.artifacts = write_report(cfg.out_dir / name, r.report, r.observations);
  return r;
}

void add_run(std::vector<Observation>& obs, std::uint64_t seed, const Labels& labels, const RunMetrics& m) {
  for (const auto& rec : m.records) obs.push_back({seed, labels, rec, "", 0.0});
}

void add_scalar(std::vector<Observation>& obs, std::uint64_t seed, const Labels& labels, const std::string& metric,
                double value) {
  obs.push_back({seed, labels, std::nullopt, metric, value});
}

TrainConfig seeded(const TrainConfig& base, std::uint64_t seed) {
  TrainConfig t = base;
  t.seed = seed;
  return t;
}

RunMetrics run_strategy(StrategyKind kind, const Checkpoint& ckpt, const StrategyOptions& opts,
                        const data::DomainStream& s) {
  auto strategy = make_strategy(kind, ckpt.backbone, &ckpt.generator, opts);
  return run_stream(s, *strategy);
}

}  // namespace

HeldOut held_out_fold(const ExperimentConfig& cfg, CheckpointCache& cache, std::uint64_t seed, double angle,
                      const TrainConfig& train_cfg) {
  HeldOut h{rotated_split(cfg, seed, cfg.loo_angles), index_of(cfg.loo_angles, angle), {}, nullptr};
  for (std::size_t d = 0; d < h.split.train.size(); ++d)
    if (d != h.target) h.sources.push_back(h.split.train[d]);
  nlohmann::json key = rotated_key(cfg, seed, cfg.loo_angles);
  key["held_out"] = h.target;
  h.ckpt = cache.get_or_train(key, seeded(train_cfg, seed), h.sources);
  return h;
}

data::DomainStream target_stream(const data::DomainDataset& ds, std::size_t batch_size, std::uint64_t seed,
                                 std::uint64_t stream_id) {
  return data::stream({ds}, batch_size, data::OrderPolicy::single_domain, derive_seed(seed, 200 + stream_id));
}

// ---- experiments ----

ExperimentResult eval_leave_one_out(const ExperimentConfig& cfg, CheckpointCache& cache) {
  if (cfg.loo_angles.size() < 3) throw std::invalid_argument("leave-one-out needs at least 3 domains");
  return finish("loo", cfg, run_seeds(cfg, [&](std::uint64_t seed) {
                  std::vector<Observation> obs;
                  for (double angle : cfg.loo_angles) {
                    const HeldOut h = held_out_fold(cfg, cache, seed, angle, cfg.train);
                    const auto s = target_stream(h.split.test[h.target], cfg.test_batch_size, seed, h.target);
                    for (auto kind : cfg.strategies)
                      add_run(obs, seed, {{"target", angle_label(angle)}, {"strategy", to_string(kind)}},
                              run_strategy(kind, *h.ckpt, cfg.strategy, s));
                  }
                  return obs;
                }));
}

ExperimentResult eval_forgetting(const ExperimentConfig& cfg, CheckpointCache& cache) {
  return finish("forgetting", cfg, run_seeds(cfg, [&](std::uint64_t seed) {
                  std::vector<Observation> obs;
                  const HeldOut h = held_out_fold(cfg, cache, seed, cfg.held_out_angle, cfg.train);
                  const auto s = target_stream(h.split.test[h.target], cfg.test_batch_size, seed, h.target);
                  for (auto kind : cfg.strategies) {
                    auto strategy = make_strategy(kind, h.ckpt->backbone, &h.ckpt->generator, cfg.strategy);
                    std::vector<double> before;
                    for (std::size_t d = 0; d < h.split.test.size(); ++d)
                      if (d != h.target)
                        before.push_back(dataset_accuracy(h.split.test[d], cfg.test_batch_size,
                                                          [&](const Tensor& x) { return strategy->evaluate(x); }));
                    add_run(obs, seed, {{"phase", "adapt"}, {"strategy", to_string(kind)}},
                            run_stream(s, *strategy));
                    std::size_t bi = 0;
                    for (std::size_t d = 0; d < h.split.test.size(); ++d) {
                      if (d == h.target) continue;
                      const double after = dataset_accuracy(h.split.test[d], cfg.test_batch_size,
                                                            [&](const Tensor& x) { return strategy->evaluate(x); });
                      const std::string dom = angle_label(cfg.loo_angles[d]);
                      const std::string name = to_string(kind);
                      add_scalar(obs, seed, {{"strategy", name}, {"source_domain", dom}, {"phase", "before"}},
                                 "accuracy", before[bi]);
                      add_scalar(obs, seed, {{"strategy", name}, {"source_domain", dom}, {"phase", "after"}},
                                 "accuracy", after);
                      add_scalar(obs, seed, {{"strategy", name}, {"source_domain", dom}}, "delta", after - before[bi]);
                      ++bi;
                    }
                  }
                  return obs;
                }));
}

ExperimentResult eval_multi_target(const ExperimentConfig& cfg, CheckpointCache& cache) {
  return finish("multitarget", cfg, run_seeds(cfg, [&](std::uint64_t seed) {
                  std::vector<double> angles = cfg.multi_source_angles;
                  angles.insert(angles.end(), cfg.multi_target_angles.begin(), cfg.multi_target_angles.end());
                  const DomainSplit split = rotated_split(cfg, seed, angles);
                  const std::size_t ns = cfg.multi_source_angles.size();
                  std::vector<data::DomainDataset> sources(split.train.begin(),
                                                           split.train.begin() + static_cast<std::ptrdiff_t>(ns));
                  std::vector<data::DomainDataset> targets(split.test.begin() + static_cast<std::ptrdiff_t>(ns),
                                                           split.test.end());
                  nlohmann::json key = rotated_key(cfg, seed, angles);
                  key["sources"] = ns;
                  const auto ckpt = cache.get_or_train(key, seeded(cfg.train, seed), sources);
                  std::vector<Observation> obs;
                  for (auto kind : cfg.strategies) {
                    for (std::size_t t = 0; t < targets.size(); ++t)
                      add_run(obs, seed,
                              {{"mode", "single"},
                               {"target", angle_label(cfg.multi_target_angles[t])},
                               {"strategy", to_string(kind)}},
                              run_strategy(kind, *ckpt, cfg.strategy,
                                           target_stream(targets[t], cfg.test_batch_size, seed, ns + t)));
                    const auto mixed = data::stream(targets, cfg.test_batch_size, data::OrderPolicy::interleaved_random,
                                                    derive_seed(seed, 299));
                    add_run(obs, seed, {{"mode", "multi"}, {"strategy", to_string(kind)}},
                            run_strategy(kind, *ckpt, cfg.strategy, mixed));
                  }
                  return obs;
                }));
}

ExperimentResult sweep_batch_size(const ExperimentConfig& cfg, CheckpointCache& cache) {
  return finish("batchsweep", cfg, run_seeds(cfg, [&](std::uint64_t seed) {
                  std::vector<Observation> obs;
                  for (double angle : cfg.loo_angles) {
                    const HeldOut h = held_out_fold(cfg, cache, seed, angle, cfg.train);
                    for (std::size_t b : cfg.batch_sizes) {
                      const auto s = target_stream(h.split.test[h.target], b, seed, h.target);
                      for (auto kind : cfg.strategies)
                        add_run(obs, seed,
                                {{"batch_size", std::to_string(b)},
                                 {"target", angle_label(angle)},
                                 {"strategy", to_string(kind)}},
                                run_strategy(kind, *h.ckpt, cfg.strategy, s));
                    }
                  }
                  return obs;
                }));
}

namespace {

struct Variant {
  std::string name;
  std::function<void(GeneratorSpec&)> apply;
};

ExperimentResult generator_ablation(const std::string& name, const ExperimentConfig& cfg, CheckpointCache& cache,
                                    const std::vector<Variant>& variants) {
  return finish(name, cfg, run_seeds(cfg, [&](std::uint64_t seed) {
                  std::vector<Observation> obs;
                  for (const auto& v : variants) {
                    TrainConfig tc = cfg.train;
                    v.apply(tc.generator);
                    for (double angle : cfg.loo_angles) {
                      const HeldOut h = held_out_fold(cfg, cache, seed, angle, tc);
                      const auto s = target_stream(h.split.test[h.target], cfg.test_batch_size, seed, h.target);
                      for (auto kind : {StrategyKind::erm, StrategyKind::generalizeformer})
                        add_run(obs, seed,
                                {{"variant", v.name}, {"target", angle_label(angle)}, {"strategy", to_string(kind)}},
                                run_strategy(kind, *h.ckpt, cfg.strategy, s));
                    }
                  }
                  return obs;
                }));
}

}  // namespace

ExperimentResult ablate_inputs(const ExperimentConfig& cfg, CheckpointCache& cache) {
  auto mask = [](bool f, bool g, bool p) {
    return [=](GeneratorSpec& s) { s.inputs = InputMask{f, g, p}; };
  };
  return generator_ablation("inputs", cfg, cache,
                            {{"all", mask(true, true, true)},
                             {"feat+grad", mask(true, true, false)},
                             {"grad+param", mask(false, true, true)},
                             {"feat+param", mask(true, false, true)}});
}

ExperimentResult ablate_generated_layers(const ExperimentConfig& cfg, CheckpointCache& cache) {
  auto layers = [](bool bn, bool cls) {
    return [=](GeneratorSpec& s) {
      s.generate_bn = bn;
      s.generate_classifier = cls;
    };
  };
  return generator_ablation("layers", cfg, cache,
                            {{"bn+classifier", layers(true, true)},
                             {"bn", layers(true, false)},
                             {"classifier", layers(false, true)}});
}

ExperimentResult eval_layer_distance(const ExperimentConfig& cfg, CheckpointCache& cache) {
  return finish("distance", cfg, run_seeds(cfg, [&](std::uint64_t seed) {
                  std::vector<Observation> obs;
                  auto measure = [&](const std::string& bench, const Checkpoint& ckpt, const data::DomainDataset& test,
                                     std::uint64_t stream_id) {
                    const auto s = target_stream(test, cfg.test_batch_size, seed, stream_id);
                    std::map<std::string, double> sum;
                    const ParamSet source = ckpt.backbone.extract_all();
                    for (const auto& b : s.batches) {
                      const AdaptResult r =
                          adapt_batch_generalizeformer(b.inputs, ckpt.backbone, ckpt.generator, cfg.strategy.loss);
                      for (const auto& [g, d] : layer_distance(source, *r.params)) sum[g] += d;
                    }
                    for (const auto& [g, d] : sum)
                      add_scalar(obs, seed, {{"benchmark", bench}, {"layer", g}}, "rel_l2",
                                 d / static_cast<double>(s.batches.size()));
                    for (auto kind : {StrategyKind::erm, StrategyKind::generalizeformer})
                      add_run(obs, seed, {{"benchmark", bench}, {"strategy", to_string(kind)}},
                              run_strategy(kind, ckpt, cfg.strategy, s));
                  };

                  // input-level shift: rotation leave-one-out fold
                  const HeldOut h = held_out_fold(cfg, cache, seed, cfg.held_out_angle, cfg.train);
                  measure("input", *h.ckpt, h.split.test[h.target], 400);

                  // output-level shift: source domains see disjoint class subsets, the target all classes
                  data::ClassAssignment assignment;
                  for (std::size_t i = 0; i < h.sources.size(); ++i) assignment[h.sources[i].domain_id] = {};
                  for (int k = 0; k < cfg.n_classes; ++k)
                    assignment[h.sources[static_cast<std::size_t>(k) % h.sources.size()].domain_id].insert(k);
                  const auto shifted = data::make_category_shift_split(h.sources, assignment);
                  nlohmann::json key = rotated_key(cfg, seed, cfg.loo_angles);
                  key["held_out"] = h.target;
                  key["category_shift"] = true;
                  const auto out_ckpt = cache.get_or_train(key, seeded(cfg.train, seed), shifted);
                  measure("output", *out_ckpt, h.split.test[h.target], 401);

                  // feature-level shift: disjoint sub-variants of the same classes
                  const auto sub = data::make_subpopulation_domains(data_seed(seed), cfg.n_classes, 4,
                                                                    cfg.n_train_per_domain / 4, cfg.image_size);
                  const auto sub_sources = data::split_by_group(sub.source);
                  const nlohmann::json sub_key = {{"kind", "subpopulation"},
                                                  {"data_seed", data_seed(seed)},
                                                  {"n_per_sub", cfg.n_train_per_domain / 4},
                                                  {"n_classes", cfg.n_classes},
                                                  {"image_size", cfg.image_size}};
                  const auto sub_ckpt = cache.get_or_train(sub_key, seeded(cfg.train, seed), sub_sources);
                  measure("feature", *sub_ckpt, sub.target, 402);
                  return obs;
                }));
}

ExperimentResult timing_report(const ExperimentConfig& cfg, CheckpointCache& cache) {
  return finish("timing", cfg, run_seeds(cfg, [&](std::uint64_t seed) {
                  std::vector<Observation> obs;
                  const HeldOut h = held_out_fold(cfg, cache, seed, cfg.held_out_angle, cfg.train);
                  const auto s = target_stream(h.split.test[h.target], cfg.test_batch_size, seed, h.target);
                  for (auto kind : cfg.strategies)
                    add_run(obs, seed, {{"strategy", to_string(kind)}}, run_strategy(kind, *h.ckpt, cfg.strategy, s));
                  return obs;
                }));
}

const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"loo",    "forgetting", "multitarget", "batchsweep",
                                              "inputs", "layers",     "distance",    "timing"};
  return names;
}

ExperimentResult run_experiment(const std::string& name, const ExperimentConfig& cfg, CheckpointCache& cache) {
  if (name == "loo") return eval_leave_one_out(cfg, cache);
  if (name == "forgetting") return eval_forgetting(cfg, cache);
  if (name == "multitarget") return eval_multi_target(cfg, cache);
  if (name == "batchsweep") return sweep_batch_size(cfg, cache);
  if (name == "inputs") return ablate_inputs(cfg, cache);
  if (name == "layers") return ablate_generated_layers(cfg, cache);
  if (name == "distance") return eval_layer_distance(cfg, cache);
  if (name == "timing") return timing_report(cfg, cache);
  throw std::invalid_argument("unknown experiment '" + name + "'");
}

}  // namespace ttg
