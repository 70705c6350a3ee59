#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>

#include "support.hpp"
#include "ttg/objectives.hpp"

using namespace ttg;
using namespace ttg::testing;

namespace {

// Plain-double references, independent of the autograd kernels.
std::vector<double> softmax_row(const double* r, std::size_t K) {
  const double m = *std::max_element(r, r + K);
  std::vector<double> p(K);
  double s = 0.0;
  for (std::size_t k = 0; k < K; ++k) s += (p[k] = std::exp(r[k] - m));
  for (double& v : p) v /= s;
  return p;
}

double shannon(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

double ref_entropy(const Tensor& logits) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  double h = 0.0;
  for (std::size_t i = 0; i < B; ++i) h += shannon(softmax_row(logits.data() + i * K, K));
  return h / static_cast<double>(B);
}

double ref_cross_entropy(const Tensor& logits, const std::vector<int>& y) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  double l = 0.0;
  for (std::size_t i = 0; i < B; ++i) l -= std::log(softmax_row(logits.data() + i * K, K)[y[i]]);
  return l / static_cast<double>(B);
}

double ref_marginal_entropy(const Tensor& logits, std::size_t views) {
  const std::size_t B = logits.dim(0) / views, K = logits.dim(1);
  double h = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    std::vector<double> m(K, 0.0);
    for (std::size_t v = 0; v < views; ++v) {
      const auto p = softmax_row(logits.data() + (v * B + i) * K, K);
      for (std::size_t k = 0; k < K; ++k) m[k] += p[k] / static_cast<double>(views);
    }
    h += shannon(m);
  }
  return h / static_cast<double>(B);
}

using LossFn = std::function<double(const ParamSet&)>;

// Largest per-entry relative error between an analytic gradient and central
// differences with step h; entries where both are below `floor` are skipped.
double max_rel_error(const LossFn& f, ParamSet p, const std::string& slot, const Tensor& grad, double h = 1e-4,
                     double floor = 1e-7) {
  Tensor t = p.at(slot);
  double worst = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double orig = t[i];
    t[i] = orig + h;
    p.set(slot, t);
    const double up = f(p);
    t[i] = orig - h;
    p.set(slot, t);
    const double down = f(p);
    t[i] = orig;
    p.set(slot, t);
    const double fd = (up - down) / (2.0 * h);
    const double scale = std::max(std::abs(fd), std::abs(grad[i]));
    if (scale < floor) continue;
    worst = std::max(worst, std::abs(fd - grad[i]) / scale);
  }
  return worst;
}

GradSet cross_entropy_grads(const Backbone& model, const Tensor& x, const std::vector<int>& y, const ParamSet& p,
                            const std::vector<std::string>& slots) {
  ag::VarMap vars = model.bind(&p, false);
  for (const auto& id : slots) vars[id] = ag::Var::leaf(p.at(id), true);
  ag::Var l = ag::cross_entropy(model.run(x, vars, NormMode::running).logits, y);
  l.backward();
  GradSet g;
  for (const auto& id : slots) g.entries.emplace(id, vars.at(id).grad());
  return g;
}

}  // namespace

TEST_CASE("entropy closed forms") {
  CHECK(entropy_loss(Tensor({1, 7}, 0.0)) == doctest::Approx(1.945910149055313).epsilon(1e-12));
  CHECK(entropy_loss(Tensor({3, 7}, 2.5)) == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  Tensor onehot({1, 4}, 0.0);
  onehot[2] = 800.0;
  CHECK(entropy_loss(onehot) == doctest::Approx(0.0).epsilon(1e-12));

  const Tensor l({2, 3}, std::vector<double>{0.3, -1.2, 2.0, 4.0, 4.5, -3.0});
  Tensor shifted = l;
  for (std::size_t j = 0; j < 3; ++j) shifted[j] += 17.0;
  for (std::size_t j = 3; j < 6; ++j) shifted[j] -= 5.0;
  CHECK(entropy_loss(shifted) == doctest::Approx(entropy_loss(l)).epsilon(1e-12));
  CHECK(entropy_loss(l) == doctest::Approx(ref_entropy(l)).epsilon(1e-12));
}

TEST_CASE("pseudo-label loss and tie breaking") {
  CHECK(pseudo_label_loss(Tensor({1, 2}, 0.0)) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(argmax_rows(Tensor({2, 3}, std::vector<double>{1, 1, 0, 0, 2, 2})) == std::vector<int>{0, 1});
  const Tensor l({2, 3}, std::vector<double>{0.3, -1.2, 2.0, 4.0, 4.5, -3.0});
  CHECK(pseudo_label_loss(l) == doctest::Approx(ref_cross_entropy(l, {2, 1})).epsilon(1e-12));
}

TEST_CASE("non-finite logits are rejected") {
  Tensor l({1, 3}, 0.0);
  l[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(entropy_loss(l), std::domain_error);
  l[1] = std::nan("");
  CHECK_THROWS_AS(pseudo_label_loss(l), std::domain_error);
  CHECK_THROWS_AS(unsupervised_loss(UnsupervisedLoss::entropy, ag::Var::constant(l)), std::domain_error);
}

TEST_CASE("loss names") {
  CHECK(parse_loss("entropy") == UnsupervisedLoss::entropy);
  CHECK(parse_loss("pseudo") == UnsupervisedLoss::pseudo_label);
  CHECK(parse_loss("memo") == UnsupervisedLoss::augmentation_consistency);
  for (auto l : {UnsupervisedLoss::entropy, UnsupervisedLoss::pseudo_label, UnsupervisedLoss::augmentation_consistency})
    CHECK(parse_loss(to_string(l)) == l);
  CHECK_THROWS_AS(parse_loss("tent"), std::invalid_argument);
}

TEST_CASE("memo views are view-major") {
  const Tensor x = batch_of(small_domains(0)[0], 0, 3);
  const Tensor v = memo_views(x);
  REQUIRE(v.shape() == Shape{12, 1, 16, 16});
  const Tensor flipped = data::flip_horizontal(x.slice_rows(1, 2).reshaped({16, 16}));
  CHECK(bitwise_equal(v.slice_rows(7, 8).reshaped({16, 16}), flipped));
}

TEST_CASE("slot gradients match central differences") {
  const Backbone model = warmed_backbone(0, 30);
  const auto ds = small_domains(0);
  const Tensor x = batch_of(ds[1], 0, 6);
  const std::vector<int> y(ds[1].labels.begin(), ds[1].labels.begin() + 6);
  const ParamSet theta = model.extract_all();
  std::vector<std::string> slots;
  for (const auto& s : model.list_slots()) slots.push_back(s.id);

  const auto logits_at = [&](const ParamSet& p, const Tensor& in) { return model.forward(in, &p); };
  // the four views quadruple the number of ReLU/max-pool kinks an FD step can
  // straddle, so the consistency loss is checked on a smaller batch
  const Tensor xm = x.slice_rows(0, 2);
  const Tensor views = memo_views(xm);

  struct Case {
    std::string name;
    GradSet grads;
    LossFn f;
  };
  std::vector<Case> cases;
  cases.push_back({"entropy", probe(model, UnsupervisedLoss::entropy, x, theta, slots).grads,
                   [&](const ParamSet& p) { return ref_entropy(logits_at(p, x)); }});
  const std::vector<int> pseudo = argmax_rows(model.forward(x, &theta));
  cases.push_back({"pseudo", probe(model, UnsupervisedLoss::pseudo_label, x, theta, slots).grads,
                   [&](const ParamSet& p) { return ref_cross_entropy(logits_at(p, x), pseudo); }});
  cases.push_back({"memo", probe(model, UnsupervisedLoss::augmentation_consistency, xm, theta, slots).grads,
                   [&](const ParamSet& p) { return ref_marginal_entropy(logits_at(p, views), kMemoViews); }});
  cases.push_back({"cross-entropy", cross_entropy_grads(model, x, y, theta, slots),
                   [&](const ParamSet& p) { return ref_cross_entropy(logits_at(p, x), y); }});

  for (const auto& c : cases)
    for (const auto& id : slots) {
      CAPTURE(c.name);
      CAPTURE(id);
      CHECK(max_rel_error(c.f, theta, id, c.grads.entries.at(id)) <= 1e-4);
    }
}

TEST_CASE("uniform logits give a zero classifier gradient") {
  const Backbone model = warmed_backbone(1, 10);
  ParamSet p = model.extract_all();
  p.set(kClassifierSlot, Tensor({5, 32}, 0.0));
  const Tensor x = batch_of(small_domains(1)[2], 0, 8);
  const GradSet g = probe(model, UnsupervisedLoss::entropy, x, p, {kClassifierSlot, "bn3.gamma"}).grads;
  for (double v : g.entries.at(kClassifierSlot).values()) CHECK(std::abs(v) <= 1e-12);
  for (double v : g.entries.at("bn3.gamma").values()) CHECK(std::abs(v) <= 1e-12);
}

TEST_CASE("duplicating the batch leaves mean gradients unchanged") {
  const Backbone model = warmed_backbone(2, 10);
  const Tensor x = batch_of(small_domains(2)[3], 0, 7);
  const Tensor xx = concat_rows(std::vector<Tensor>{x, x});
  const ParamSet theta = model.extract_all();
  std::vector<std::string> slots;
  for (const auto& s : model.list_slots()) slots.push_back(s.id);
  for (auto loss : {UnsupervisedLoss::entropy, UnsupervisedLoss::pseudo_label, UnsupervisedLoss::augmentation_consistency}) {
    const Probe a = probe(model, loss, x, theta, slots);
    const Probe b = probe(model, loss, xx, theta, slots);
    for (const auto& id : slots) CHECK(max_abs_diff(a.grads.entries.at(id), b.grads.entries.at(id)) <= 1e-6);
    CHECK(b.features.dim(0) == 14);
  }
}

TEST_CASE("probe leaves the model untouched and rejects bad input") {
  const Backbone model = warmed_backbone(3, 5);
  const auto before = model.checksum();
  Tensor x = batch_of(small_domains(3)[0], 0, 4);
  const ParamSet theta = model.extract_all();
  (void)probe(model, UnsupervisedLoss::entropy, x, theta, {"bn1.gamma"});
  CHECK(model.checksum() == before);
  CHECK_THROWS_AS(probe(model, UnsupervisedLoss::entropy, x, theta, {"bn7.gamma"}), std::invalid_argument);
  x[5] = std::nan("");
  CHECK_THROWS(probe(model, UnsupervisedLoss::entropy, x, theta, {"bn1.gamma"}));
}

TEST_CASE("rms normalization") {
  GradSet g;
  g.entries.emplace("a", Tensor({4}, std::vector<double>{3, -3, 3, -3}));
  g.entries.emplace("z", Tensor({2}, 0.0));
  const GradSet n = rms_normalized(g);
  for (double v : n.entries.at("a").values()) CHECK(std::abs(v) == doctest::Approx(1.0).epsilon(1e-8));
  for (double v : n.entries.at("z").values()) CHECK(v == 0.0);
  // loss scale drops out up to the epsilon
  GradSet big = g;
  for (double& v : big.entries.at("a").values()) v *= 1e3;
  CHECK(max_abs_diff(rms_normalized(big).entries.at("a"), n.entries.at("a")) <= 1e-8);
}
