#pragma once

// Test-time strategies over an online stream of unlabeled batches. All of
// them read the shared source model; any mutable state is their own copy.

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttg/backbone.hpp"
#include "ttg/objectives.hpp"
#include "ttg/optim.hpp"
#include "ttg/paramgen.hpp"
#include "ttg/synthdata.hpp"

namespace ttg {

enum class StrategyKind { erm, generalizeformer, tent, prototype_adjust };

std::string to_string(StrategyKind k);
StrategyKind parse_strategy(const std::string& name);

struct TentConfig {
  double lr = 1e-3;
  std::size_t steps = 1;
  bool full_model = false;  // every learnable instead of BN affine only
};

struct PrototypeConfig {
  std::size_t capacity = 20;  // supports per class
};

struct StrategyOptions {
  UnsupervisedLoss loss = UnsupervisedLoss::entropy;  // gradient input of the generator
  TentConfig tent;
  PrototypeConfig prototype;
};

struct AdaptResult {
  Tensor logits;
  std::optional<ParamSet> params;  // generated parameters, when the strategy has them
  bool degenerate_variance = false;
};

class Strategy {
 public:
  virtual ~Strategy() = default;
  virtual StrategyKind kind() const = 0;
  std::string name() const { return to_string(kind()); }
  virtual AdaptResult adapt(const Tensor& x) = 0;
  // Logits of the strategy's current stored model with running statistics.
  // Does not change any state.
  virtual Tensor evaluate(const Tensor& x) const = 0;
};

// Generated-parameter inference for one batch; nothing stored is modified.
AdaptResult adapt_batch_generalizeformer(const Tensor& x, const Backbone& source, const Generator& gen,
                                         UnsupervisedLoss loss);

class ErmStrategy final : public Strategy {
 public:
  explicit ErmStrategy(const Backbone& source) : source_(&source) {}
  StrategyKind kind() const override { return StrategyKind::erm; }
  AdaptResult adapt(const Tensor& x) override { return {source_->forward(x), std::nullopt, false}; }
  Tensor evaluate(const Tensor& x) const override { return source_->forward(x); }

 private:
  const Backbone* source_;
};

class GeneralizeFormerStrategy final : public Strategy {
 public:
  GeneralizeFormerStrategy(const Backbone& source, const Generator& gen, UnsupervisedLoss loss)
      : source_(&source), gen_(&gen), loss_(loss) {}
  StrategyKind kind() const override { return StrategyKind::generalizeformer; }
  AdaptResult adapt(const Tensor& x) override { return adapt_batch_generalizeformer(x, *source_, *gen_, loss_); }
  Tensor evaluate(const Tensor& x) const override { return source_->forward(x); }

 private:
  const Backbone* source_;
  const Generator* gen_;
  UnsupervisedLoss loss_;
};

// Entropy minimization with batch statistics; the returned logits come from
// the forward pass that precedes the update.
class TentStrategy final : public Strategy {
 public:
  TentStrategy(const Backbone& source, TentConfig config);
  StrategyKind kind() const override { return StrategyKind::tent; }
  AdaptResult adapt(const Tensor& x) override;
  Tensor evaluate(const Tensor& x) const override { return model_.forward(x); }
  const Backbone& model() const { return model_; }

 private:
  Backbone model_;
  TentConfig config_;
  Adam opt_;
};

// Classifier adjustment from pseudo-labelled, entropy-filtered support
// features. Pseudo-labels and entropies come from the source classifier; a
// feature is kept when its entropy is below the median of all entropies seen
// for its class. Once any class has supports, every row is the normalized
// mean of its normalized source row and supports.
class PrototypeStrategy final : public Strategy {
 public:
  PrototypeStrategy(const Backbone& source, PrototypeConfig config);
  StrategyKind kind() const override { return StrategyKind::prototype_adjust; }
  AdaptResult adapt(const Tensor& x) override;
  Tensor evaluate(const Tensor& x) const override;
  // Logits under the current supports without updating them.
  Tensor predict(const Tensor& x) const;
  Tensor classifier() const;  // [K, F]
  std::vector<std::size_t> support_sizes() const;

 private:
  Tensor logits_for(const Tensor& z) const;

  const Backbone* source_;
  PrototypeConfig config_;
  std::vector<std::vector<Tensor>> supports_;  // per class, oldest first
  std::vector<std::vector<double>> seen_entropies_;
};

std::unique_ptr<Strategy> make_strategy(StrategyKind kind, const Backbone& source, const Generator* gen,
                                        const StrategyOptions& options = {});

// ---- stream evaluation ----

struct DomainCount {
  std::size_t n = 0;
  std::size_t n_correct = 0;
};

struct BatchRecord {
  std::size_t batch_idx = 0;
  int domain_id = -1;  // -1 when the batch mixes domains
  std::size_t n = 0;
  std::size_t n_correct = 0;
  double mean_entropy = 0.0;
  double adapt_ms = 0.0;
  bool degenerate_variance = false;
  std::map<int, DomainCount> per_domain;
};

void to_json(nlohmann::json& j, const BatchRecord& r);
void from_json(const nlohmann::json& j, BatchRecord& r);

struct RunMetrics {
  std::string strategy;
  std::vector<BatchRecord> records;

  double accuracy() const;
  std::map<int, double> per_domain_accuracy() const;
  double total_ms() const;
  double median_ms() const;
  double p95_ms() const;
  bool any_degenerate() const;
};

// Feeds each batch to the strategy in order. Labels and domain ids are used
// only for scoring.
RunMetrics run_stream(const data::DomainStream& stream, Strategy& strategy);

// Per-row softmax entropy.
std::vector<double> row_entropies(const Tensor& logits);
double percentile(std::vector<double> values, double q);

}  // namespace ttg
