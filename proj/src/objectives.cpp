#include "ttg/objectives.hpp"

#include <cmath>
#include <stdexcept>

#include "ttg/synthdata.hpp"

namespace ttg {

UnsupervisedLoss parse_loss(const std::string& name) {
  if (name == "entropy") return UnsupervisedLoss::entropy;
  if (name == "pseudo" || name == "pseudo_label") return UnsupervisedLoss::pseudo_label;
  if (name == "memo" || name == "augmentation_consistency") return UnsupervisedLoss::augmentation_consistency;
  throw std::invalid_argument("unknown unsupervised loss '" + name + "' (expected entropy|pseudo|memo)");
}

std::string to_string(UnsupervisedLoss loss) {
  switch (loss) {
    case UnsupervisedLoss::entropy: return "entropy";
    case UnsupervisedLoss::pseudo_label: return "pseudo";
    case UnsupervisedLoss::augmentation_consistency: return "memo";
  }
  return "?";
}

namespace {
void require_finite(const Tensor& logits) {
  if (!all_finite(logits)) throw std::domain_error("unsupervised loss: non-finite logits");
}
}  // namespace

double entropy_loss(const Tensor& logits) {
  require_finite(logits);
  return ag::entropy(ag::Var::constant(logits)).value()[0];
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t r = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

double pseudo_label_loss(const Tensor& logits) {
  require_finite(logits);
  const auto labels = argmax_rows(logits);
  return ag::cross_entropy(ag::Var::constant(logits), labels).value()[0];
}

Tensor memo_views(const Tensor& x) {
  std::vector<Tensor> views;
  views.push_back(data::map_planes(x, [](const Tensor& p) { return data::rotate_image(p, 10.0); }));
  views.push_back(data::map_planes(x, [](const Tensor& p) { return data::rotate_image(p, -10.0); }));
  views.push_back(data::map_planes(x, [](const Tensor& p) { return data::flip_horizontal(p); }));
  views.push_back(data::map_planes(x, [](const Tensor& p) { return data::flip_vertical(p); }));
  return concat_rows(views);
}

ag::Var unsupervised_loss(UnsupervisedLoss loss, const ag::Var& logits) {
  require_finite(logits.value());
  switch (loss) {
    case UnsupervisedLoss::entropy: return ag::entropy(logits);
    case UnsupervisedLoss::pseudo_label: return ag::cross_entropy(logits, argmax_rows(logits.value()));
    case UnsupervisedLoss::augmentation_consistency:
      return ag::prob_entropy(ag::block_mean(ag::softmax(logits), kMemoViews));
  }
  throw std::logic_error("unsupervised_loss: unhandled kind");
}

GradSet rms_normalized(const GradSet& g) {
  GradSet out;
  out.loss = g.loss;
  for (const auto& [id, t] : g.entries) {
    double ss = 0.0;
    for (double v : t.values()) ss += v * v;
    const double rms = std::sqrt(ss / static_cast<double>(std::max<std::size_t>(t.size(), 1)));
    Tensor n = t;
    for (double& v : n.values()) v /= (rms + 1e-8);
    out.entries.emplace(id, std::move(n));
  }
  return out;
}

Probe probe(const Backbone& model, UnsupervisedLoss loss, const Tensor& x, const ParamSet& params,
            const std::vector<std::string>& slots) {
  ag::VarMap vars = model.bind(&params, false);
  for (const auto& id : slots) {
    auto it = vars.find(id);
    if (it == vars.end()) throw std::invalid_argument("probe: unknown slot '" + id + "'");
    it->second = ag::Var::leaf(it->second.value(), true);
  }
  Probe out;
  ag::Var l;
  if (loss == UnsupervisedLoss::augmentation_consistency) {
    const auto plain = model.run(x, vars, NormMode::running);
    out.features = plain.features.value();
    out.logits = plain.logits.value();
    const auto aug = model.run(memo_views(x), vars, NormMode::running);
    l = unsupervised_loss(loss, aug.logits);
  } else {
    const auto o = model.run(x, vars, NormMode::running);
    out.features = o.features.value();
    out.logits = o.logits.value();
    l = unsupervised_loss(loss, o.logits);
  }
  if (!std::isfinite(l.value()[0])) throw std::domain_error("probe: unsupervised loss is not finite");
  l.backward();
  out.grads.loss = loss;
  for (const auto& id : slots) out.grads.entries.emplace(id, vars.at(id).grad());
  return out;
}

GradSet layer_gradients(const Backbone& model, UnsupervisedLoss loss, const Tensor& x, const ParamSet& params,
                        const std::vector<std::string>& slots) {
  return probe(model, loss, x, params, slots).grads;
}

}  // namespace ttg
