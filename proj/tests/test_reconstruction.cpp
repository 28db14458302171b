#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_support.hpp"

using namespace caps;
using namespace testsup;
using doctest::Approx;

TEST_CASE("masking keeps exactly one capsule's entries") {
  CapsNetConfig cfg = micro_config();
  Model<float> model = init_model<float>(cfg, 3);
  Tape<float> t;
  auto bm = bind(t, model);
  Tensor<float> caps({1, cfg.num_classes, cfg.out_dim});
  Rng rng(4);
  for (std::int64_t i = 0; i < caps.numel(); ++i)
    caps[i] = static_cast<float>(rng.normal()) + 2.0f;  // keep away from zero

  // inspect the masked decoder input by rebuilding the mask outside
  auto v = t.leaf(caps, true);
  auto out = reconstruct_masked(bm, v, {1});
  CHECK(out.value().shape() == Shape{1, cfg.pixels()});
  t.backward(sum_all(out));
  // gradient flows only through class 1's block
  const Tensor<float>& g = v.grad();
  for (std::int64_t j = 0; j < cfg.num_classes; ++j)
    for (std::int64_t d = 0; d < cfg.out_dim; ++d) {
      if (j == 1) continue;
      CHECK(g[j * cfg.out_dim + d] == 0.0f);
    }
}

TEST_CASE("masked entries are irrelevant to the reconstruction") {
  CapsNetConfig cfg = micro_config();
  Model<float> model = init_model<float>(cfg, 3);
  Rng rng(5);
  Tensor<float> a({1, cfg.num_classes, cfg.out_dim});
  for (std::int64_t i = 0; i < a.numel(); ++i)
    a[i] = static_cast<float>(rng.normal());
  Tensor<float> b = a;
  // change class 2's capsule only
  for (std::int64_t d = 0; d < cfg.out_dim; ++d)
    b[2 * cfg.out_dim + d] += 1.5f;

  Tape<float> t;
  auto bm = bind(t, model);
  auto ra = reconstruct_masked(bm, t.constant(a), {1});
  auto rb = reconstruct_masked(bm, t.constant(b), {1});
  for (std::int64_t p = 0; p < cfg.pixels(); ++p)
    CHECK(ra.value()[p] == rb.value()[p]);
}

TEST_CASE("class index outside the capsule range raises") {
  CapsNetConfig cfg = micro_config();
  Model<float> model = init_model<float>(cfg, 3);
  Tape<float> t;
  auto bm = bind(t, model);
  auto v = t.constant(Tensor<float>::zeros({1, cfg.num_classes, cfg.out_dim}));
  CHECK_THROWS_AS(reconstruct_masked(bm, v, {static_cast<int>(cfg.num_classes)}),
                  IndexError);
  CHECK_THROWS_AS(reconstruct_masked(bm, v, {-1}), IndexError);
}

TEST_CASE("reconstruction error values") {
  Tensor<double> x = Tensor<double>::zeros({2, 2});
  CHECK(reconstruction_error(x, x) == 0.0);
  Tensor<double> h = Tensor<double>::full({2, 2}, 0.5);
  CHECK(reconstruction_error(x, h) == Approx(1.0));
  CHECK_THROWS_AS(reconstruction_error(x, Tensor<double>::zeros({2, 3})),
                  ShapeError);
}

TEST_CASE("reconstruction error matches an independent flat-vector norm") {
  Rng rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor<double> a({3, 5}), b({3, 5});
    double acc = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
      a[i] = rng.normal();
      b[i] = rng.normal();
      acc += (a[i] - b[i]) * (a[i] - b[i]);
    }
    CHECK(reconstruction_error(a, b) == Approx(std::sqrt(acc)).epsilon(1e-6));
  }
}

TEST_CASE("masked reconstruction gradient passes a finite-difference check") {
  CapsNetConfig cfg = micro_config();
  Model<double> model = init_model<double>(cfg, 8);
  Tensor<double> caps({1, cfg.num_classes, cfg.out_dim});
  Rng rng(9);
  for (std::int64_t i = 0; i < caps.numel(); ++i) caps[i] = rng.normal();
  Tensor<double> target({1, cfg.pixels()});
  for (std::int64_t i = 0; i < target.numel(); ++i)
    target[i] = rng.uniform();

  const double err = grad_check(
      [&](Tape<double>& t, Var<double> v) {
        BoundModel<double> bm = bind(t, model);
        auto recon = reconstruct_masked(bm, v, {0});
        return sum_all(reconstruction_error_var(t.constant(target), recon));
      },
      caps);
  CHECK(err < 1e-4);
}

TEST_CASE("nearest-rank threshold calibration") {
  std::vector<double> errors;
  for (int i = 1; i <= 100; ++i) errors.push_back(i);
  // shuffle to prove order does not matter
  Rng rng(10);
  rng.shuffle(errors);
  const DetectionThreshold th = calibrate_threshold(errors, 0.95);
  CHECK(th.theta == 95.0);

  CHECK(calibrate_threshold({3.25}).theta == 3.25);
  CHECK(calibrate_threshold({2.0, 2.0, 2.0, 2.0}).theta == 2.0);
  CHECK_THROWS_AS(calibrate_threshold({}), CalibrationError);
}

TEST_CASE("detector flag rate on its own calibration set is one minus the percentile") {
  std::vector<double> errors;
  Rng rng(11);
  for (int i = 0; i < 200; ++i) errors.push_back(rng.uniform(0.5, 4.0));
  const DetectionThreshold th = calibrate_threshold(errors, 0.95);
  std::int64_t flagged = 0;
  for (double e : errors)
    if (e > th.theta) ++flagged;
  const double rate = static_cast<double>(flagged) / 200.0;
  CHECK(std::abs(rate - 0.05) <= 1.0 / 200.0 + 1e-12);
}

TEST_CASE("detect honors threshold bounds and is pure") {
  CapsNetConfig cfg = micro_config();
  Model<float> model = init_model<float>(cfg, 12);
  const Tensor<float> images = random_image({6, 1, 8, 8}, 13);

  const auto never = detect(model, images, {std::numeric_limits<double>::max(), 0.95});
  for (const auto& v : never) CHECK_FALSE(v.flagged);

  const auto always = detect(model, images, {0.0, 0.95});
  for (const auto& v : always) {
    CHECK(v.error > 0.0);
    CHECK(v.flagged);
  }

  const auto a = detect(model, images, {2.0, 0.95});
  const auto b = detect(model, images, {2.0, 0.95});
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].prediction == b[i].prediction);
    CHECK(a[i].flagged == b[i].flagged);
    CHECK(a[i].error == b[i].error);
  }
}

TEST_CASE("cnn baselines reconstruct and classify through their heads") {
  for (ModelKind kind : {ModelKind::cnn_cr, ModelKind::cnn_r}) {
    CapsNetConfig cfg = micro_config();
    cfg.kind = kind;
    Model<float> model = init_model<float>(cfg, 14);
    const Tensor<float> images = random_image({3, 1, 8, 8}, 15);
    const auto info = forward_predict(model, images);
    CHECK(info.activations.shape() ==
          Shape{3, cfg.num_classes * cfg.out_dim});
    CHECK(info.class_scores.shape() == Shape{3, cfg.num_classes});
    const auto verdicts = detect(model, images, {1.0, 0.95});
    CHECK(verdicts.size() == 3);
    for (const auto& v : verdicts) CHECK(v.error >= 0.0);
  }
}

TEST_CASE("cnn_cr grouped logits sum activation blocks") {
  CapsNetConfig cfg = micro_config();
  cfg.kind = ModelKind::cnn_cr;
  Model<float> model = init_model<float>(cfg, 16);
  Tape<float> t;
  auto bm = bind(t, model);
  Tensor<float> acts({1, cfg.num_classes * cfg.out_dim});
  Rng rng(17);
  for (std::int64_t i = 0; i < acts.numel(); ++i)
    acts[i] = static_cast<float>(rng.uniform());
  auto logits = cnn_logits(bm, t.constant(acts));
  for (std::int64_t j = 0; j < cfg.num_classes; ++j) {
    float expect = 0;
    for (std::int64_t d = 0; d < cfg.out_dim; ++d)
      expect += acts[j * cfg.out_dim + d];
    CHECK(logits.value()[j] == Approx(expect).epsilon(1e-6));
  }
}
