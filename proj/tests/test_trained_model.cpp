#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_support.hpp"

using namespace caps;
using namespace testsup;
using doctest::Approx;

// Empirical checks that need a converged model. One toy-preset model is
// trained once and shared across the cases.

namespace {

struct Fixture {
  ToySplits splits;
  Model<float> model;
  std::vector<EpochMetrics> metrics;

  Fixture() : splits(toy_splits(1)), model(init_model<float>(toy_config(), mix_seed(1, 4))) {
    metrics = train(model, splits.train, splits.test, toy_train_config(1));
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

// Softmax regression on raw pixels, the reference ceiling for how far a
// linear decision rule gets on this data.
double linear_baseline_accuracy(const Dataset<float>& tr, const Dataset<float>& te,
                                int classes, std::uint64_t seed) {
  const std::int64_t P = tr.images.numel() / tr.size();
  Tensor<float> W({P, classes});
  Tensor<float> b({classes});
  Rng rng(seed);
  for (std::int64_t i = 0; i < W.numel(); ++i)
    W[i] = static_cast<float>(rng.normal(0, 0.01));
  Tensor<float> vW = Tensor<float>::zeros(W.shape());
  Tensor<float> vb = Tensor<float>::zeros(b.shape());
  std::vector<std::int64_t> order(static_cast<std::size_t>(tr.size()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
  for (int epoch = 0; epoch < 60; ++epoch) {
    Rng sr(mix_seed(seed, 100 + epoch));
    sr.shuffle(order);
    for (std::int64_t from = 0; from < tr.size(); from += 64) {
      const std::int64_t cnt = std::min<std::int64_t>(64, tr.size() - from);
      std::vector<int> labels(static_cast<std::size_t>(cnt));
      Tensor<float> batch({cnt, P});
      for (std::int64_t k = 0; k < cnt; ++k) {
        const std::int64_t s = order[static_cast<std::size_t>(from + k)];
        labels[static_cast<std::size_t>(k)] = tr.labels[static_cast<std::size_t>(s)];
        for (std::int64_t p = 0; p < P; ++p) batch[k * P + p] = tr.images[s * P + p];
      }
      Tape<float> t;
      auto Wv = t.leaf(W, true);
      auto bv = t.leaf(b, true);
      auto loss = cross_entropy_with_logits(add(matmul(t.constant(batch), Wv), bv), labels);
      t.backward(loss);
      const auto& gW = Wv.grad();
      const auto& gb = bv.grad();
      for (std::int64_t i = 0; i < W.numel(); ++i) {
        vW[i] = 0.9f * vW[i] + gW[i];
        W[i] -= 0.1f * vW[i];
      }
      for (std::int64_t i = 0; i < b.numel(); ++i) {
        vb[i] = 0.9f * vb[i] + gb[i];
        b[i] -= 0.1f * vb[i];
      }
    }
  }
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < te.size(); ++i) {
    float best = -1e30f;
    int arg = 0;
    for (int m = 0; m < classes; ++m) {
      float z = b[m];
      for (std::int64_t p = 0; p < P; ++p) z += te.images[i * P + p] * W[p * classes + m];
      if (z > best) {
        best = z;
        arg = m;
      }
    }
    if (arg == te.labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(te.size());
}

}  // namespace

TEST_CASE("toy capsule model clears 95% while a linear readout cannot") {
  const Fixture& f = fixture();
  CHECK(f.metrics.back().test_acc >= 0.95);
  const double linear = linear_baseline_accuracy(f.splits.train, f.splits.test, 4, 1);
  CHECK(linear <= 0.92);
  CHECK(f.metrics.back().test_acc > linear);
}

TEST_CASE("training loss decreases from the first to the last epoch") {
  const Fixture& f = fixture();
  CHECK(f.metrics.back().train_loss < f.metrics.front().train_loss);
}

TEST_CASE("predictions agree with the argmax of the caps logits") {
  const Fixture& f = fixture();
  const auto info = forward_predict(f.model, f.splits.test.images);
  Tape<float> t;
  auto z = caps_logits(t.constant(info.capsules));
  const std::int64_t M = f.model.cfg.num_classes;
  for (std::int64_t e = 0; e < f.splits.test.size(); ++e)
    CHECK(argmax_lowest(z.value().data() + e * M, M) == info.predictions[e]);
}

TEST_CASE("ground-truth reconstructions beat non-ground-truth ones on average") {
  const Fixture& f = fixture();
  const auto& te = f.splits.test;
  Tape<float> t;
  auto bm = bind(t, f.model);
  const auto info = forward_predict(f.model, te.images);
  auto caps = t.constant(info.capsules);

  std::vector<int> gt = te.labels;
  std::vector<int> wrong(gt.size());
  Rng rng(7);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    int k = static_cast<int>(rng.uniform_int(4));
    while (k == gt[i]) k = static_cast<int>(rng.uniform_int(4));
    wrong[i] = k;
  }
  auto recon_gt = reconstruct_masked(bm, caps, gt);
  auto recon_wrong = reconstruct_masked(bm, caps, wrong);
  const std::int64_t P = f.model.cfg.pixels();
  double err_gt = 0, err_wrong = 0;
  for (std::int64_t e = 0; e < te.size(); ++e) {
    double a = 0, b = 0;
    for (std::int64_t p = 0; p < P; ++p) {
      const double dg = te.images[e * P + p] - recon_gt.value()[e * P + p];
      const double dw = te.images[e * P + p] - recon_wrong.value()[e * P + p];
      a += dg * dg;
      b += dw * dw;
    }
    err_gt += std::sqrt(a);
    err_wrong += std::sqrt(b);
  }
  CHECK(err_gt / te.size() < err_wrong / te.size());
}

TEST_CASE("benign flag rate on the calibration split is five percent") {
  const Fixture& f = fixture();
  const auto errors = reconstruction_errors(f.model, f.splits.val.images);
  const DetectionThreshold theta = calibrate_threshold(errors);
  const auto verdicts = detect(f.model, f.splits.val.images, theta);
  std::int64_t flagged = 0;
  for (const auto& v : verdicts)
    if (v.flagged) ++flagged;
  const double rate = static_cast<double>(flagged) / static_cast<double>(verdicts.size());
  CHECK(std::abs(rate - 0.05) <= 1.0 / static_cast<double>(verdicts.size()) + 1e-12);
}

TEST_CASE("robust accuracy never exceeds standard accuracy under a real budget") {
  const Fixture& f = fixture();
  const auto te = f.splits.test.take(0, 60);
  AttackConfig c;
  c.family = AttackFamily::pgd;
  c.target_head = TargetHead::caps;
  c.epsilon = 0.08;
  c.alpha = 0.008;
  c.iterations = 15;
  c.random_start = true;
  c.seed = 3;
  const auto r = evaluate(f.model, te, c);
  REQUIRE(r.robust_acc.has_value());
  CHECK(*r.robust_acc <= r.standard_acc);
}

TEST_CASE("untargeted success rate does not drop as the budget grows") {
  const Fixture& f = fixture();
  const auto te = f.splits.test.take(0, 60);
  double prev = -1.0;
  for (double eps : {0.0, 0.04, 0.08, 0.16}) {
    AttackConfig c;
    c.family = AttackFamily::pgd;
    c.target_head = TargetHead::votes;
    c.epsilon = eps;
    c.alpha = eps > 0 ? eps / 10 : 0.0;
    c.iterations = 20;
    c.random_start = true;
    c.seed = 11;
    std::int64_t succ = 0;
    for (std::int64_t i = 0; i < te.size(); ++i) {
      AttackConfig ci = c;
      ci.seed = c.seed ^ static_cast<std::uint64_t>(i);
      const auto out =
          gradient_attack(f.model, te.image(i), te.labels[static_cast<std::size_t>(i)], ci);
      if (out.success) ++succ;
    }
    const double rate = static_cast<double>(succ) / static_cast<double>(te.size());
    CHECK(rate >= prev - 0.01);  // allow one point of noise
    prev = rate;
  }
}

TEST_CASE("vote histograms concentrate after a successful caps attack") {
  const Fixture& f = fixture();
  const auto te = f.splits.test.take(0, 60);
  AttackConfig c;
  c.family = AttackFamily::pgd;
  c.target_head = TargetHead::caps;
  c.epsilon = 0.12;
  c.alpha = 0.12 / 20;
  c.iterations = 30;
  c.random_start = true;
  c.seed = 13;

  std::vector<std::int64_t> kept;
  const Shape& is = te.images.shape();
  const std::int64_t per = is[1] * is[2] * is[3];
  std::vector<Tensor<float>> advs;
  std::vector<int> labels;
  for (std::int64_t i = 0; i < te.size(); ++i) {
    AttackConfig ci = c;
    ci.seed = c.seed ^ static_cast<std::uint64_t>(i);
    const auto out =
        gradient_attack(f.model, te.image(i), te.labels[static_cast<std::size_t>(i)], ci);
    if (!out.success) continue;
    advs.push_back(out.adversarial);
    labels.push_back(te.labels[static_cast<std::size_t>(i)]);
  }
  REQUIRE(advs.size() >= 5);
  Tensor<float> adv_images({static_cast<std::int64_t>(advs.size()), is[1], is[2], is[3]});
  for (std::size_t k = 0; k < advs.size(); ++k)
    for (std::int64_t p = 0; p < per; ++p)
      adv_images[static_cast<std::int64_t>(k) * per + p] = advs[k][p];

  const double clean = mean_abs_cosine(f.model, te.images, te.labels,
                                       ClassSelector::ground_truth);
  const double attacked =
      mean_abs_cosine(f.model, adv_images, labels, ClassSelector::ground_truth);
  CHECK(attacked < clean);
}
