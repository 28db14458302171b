#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "test_support.hpp"

using namespace caps;
using namespace testsup;
using doctest::Approx;

TEST_CASE("histogram bin rule: edges and the closed last bin") {
  CHECK(VoteHistogram::bin_of(-1.0) == 0);
  CHECK(VoteHistogram::bin_of(1.0) == 99);
  CHECK(VoteHistogram::bin_of(0.0) == 50);
  CHECK(VoteHistogram::bin_of(-0.999) == 0);
  CHECK(VoteHistogram::bin_of(0.98) == 99);
  CHECK(VoteHistogram::bin_of(0.9799) == 98);
  CHECK(VoteHistogram::bin_of(1.0000001) == 99);  // numeric spill clamps
  CHECK(VoteHistogram::bin_low(0) == Approx(-1.0));
  CHECK(VoteHistogram::bin_high(99) == Approx(1.0));
  // equal widths of 0.02
  for (int b = 0; b < 100; ++b)
    CHECK(VoteHistogram::bin_high(b) - VoteHistogram::bin_low(b) ==
          Approx(0.02));
}

TEST_CASE("histogram mass conservation on a random capsule model") {
  CapsNetConfig cfg = micro_config();
  Model<float> model = init_model<float>(cfg, 50);
  const auto ds = synthetic_dataset<float>(3, 8, 8, 100, 1);
  for (ClassSelector sel :
       {ClassSelector::ground_truth, ClassSelector::largest_non_gt}) {
    const VoteHistogram h =
        vote_agreement_histogram(model, ds.images, ds.labels, sel);
    double total = 0;
    for (double f : h.vote_fraction) total += f;
    CHECK(total == Approx(1.0).epsilon(1e-6));
    CHECK(h.total_votes == ds.size() * cfg.num_primary);
  }
  CHECK_THROWS_AS(vote_agreement_histogram(
                      model, Tensor<float>({0, 1, 8, 8}), {}, ClassSelector::ground_truth),
                  Error);
}

TEST_CASE("votes parallel to the output capsule fill the top bin") {
  // Constant backbone output puts the same vote everywhere; the routed
  // capsule is then parallel to every vote, cosine 1, bin 99.
  CapsNetConfig cfg = micro_config();
  Model<float> model = init_model<float>(cfg, 59);
  for (auto& p : model.params) {
    if (p.name.rfind("conv", 0) != 0) continue;
    const bool bias = p.name.ends_with(".bias");
    for (std::int64_t i = 0; i < p.value.numel(); ++i)
      p.value[i] = bias ? 0.7f : 0.0f;
  }
  // identical transform for every primary capsule
  Tensor<float>& W = model.param("votes.W");
  Rng rng(60);
  Tensor<float> row({cfg.primary_dim * cfg.num_classes * cfg.out_dim});
  for (std::int64_t i = 0; i < row.numel(); ++i)
    row[i] = static_cast<float>(rng.normal());
  for (std::int64_t n = 0; n < cfg.num_primary; ++n)
    for (std::int64_t i = 0; i < row.numel(); ++i)
      W[n * row.numel() + i] = row[i];

  const Tensor<float> any = random_image({1, 1, 8, 8}, 61);
  const VoteHistogram h =
      vote_agreement_histogram(model, any, {0}, ClassSelector::ground_truth);
  CHECK(h.vote_fraction[99] == doctest::Approx(1.0));
}

TEST_CASE("zero votes land in the abstention bin") {
  CapsNetConfig cfg = micro_config();
  Model<float> model = init_model<float>(cfg, 51);
  // zero image with zero biases gives all-zero votes, cosine 0 for every vote
  const Tensor<float> zeros = Tensor<float>::zeros({1, 1, 8, 8});
  const VoteHistogram h = vote_agreement_histogram(
      model, zeros, {0}, ClassSelector::ground_truth);
  CHECK(h.vote_fraction[50] == Approx(1.0));
}

TEST_CASE("histogram csv has the documented header and layout") {
  CapsNetConfig cfg = micro_config();
  Model<float> model = init_model<float>(cfg, 52);
  const auto ds = synthetic_dataset<float>(3, 4, 8, 101, 1);
  const VoteHistogram h = vote_agreement_histogram(model, ds.images, ds.labels,
                                                   ClassSelector::ground_truth);
  std::ostringstream os;
  write_histogram_csv(h, os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line ==
        "bin_index,bin_low,bin_high,vote_fraction,mean_vote_length,mean_coupling");
  int rows = 0;
  while (std::getline(is, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 100);
}

TEST_CASE("perturbation norms on hand values") {
  Tensor<float> d({3}, {0.5f, 0.0f, -0.5f});
  const NormReport r = perturbation_norms<float>({d});
  CHECK(r.l0 == Approx(2.0));
  CHECK(r.l1 == Approx(1.0));
  CHECK(r.l2 == Approx(std::sqrt(0.5)).epsilon(1e-6));

  const NormReport z = perturbation_norms<float>({Tensor<float>::zeros({4})});
  CHECK(z.l0 == 0.0);
  CHECK(z.l1 == 0.0);
  CHECK(z.l2 == 0.0);

  CHECK_THROWS_AS(perturbation_norms<float>({}), Error);
}

TEST_CASE("sign perturbations meet the closed-form norm bounds") {
  Rng rng(60);
  for (int rep = 0; rep < 50; ++rep) {
    const double eps = rng.uniform(0.01, 0.2);
    const std::int64_t dim = 16;
    Tensor<float> d({dim});
    std::int64_t nonzero = 0;
    for (std::int64_t i = 0; i < dim; ++i) {
      const double u = rng.uniform();
      d[i] = u < 0.2 ? 0.0f : static_cast<float>(u < 0.6 ? eps : -eps);
      if (d[i] != 0.0f) ++nonzero;
    }
    const NormReport r = perturbation_norms<float>({d});
    CHECK(r.l1 <= eps * dim + 1e-9);
    CHECK(r.l2 <= eps * std::sqrt(static_cast<double>(dim)) + 1e-9);
    if (nonzero == dim) {
      CHECK(r.l1 == Approx(eps * dim).epsilon(1e-5));
      CHECK(r.l2 == Approx(eps * std::sqrt(static_cast<double>(dim))).epsilon(1e-5));
    }
  }
}

TEST_CASE("norm identities hold for every perturbation") {
  Rng rng(61);
  for (int rep = 0; rep < 100; ++rep) {
    Tensor<float> d({24});
    for (std::int64_t i = 0; i < d.numel(); ++i)
      d[i] = rng.uniform() < 0.3 ? 0.0f : static_cast<float>(rng.normal());
    const NormReport r = perturbation_norms<float>({d});
    CHECK(r.l2 <= r.l1 + 1e-6);
    CHECK(r.l1 <= std::sqrt(r.l0) * r.l2 + 1e-6);
  }
}

TEST_CASE("success and undetected rates count misclassified unflagged examples") {
  std::vector<AttackOutcome<float>> results(4);
  results[0].success = true;
  results[0].flagged = false;
  results[1].success = true;
  results[1].flagged = true;
  results[2].success = true;
  results[2].flagged = false;
  results[3].success = false;
  results[3].flagged = false;
  const RateReport r = success_and_undetected_rates(results);
  CHECK(r.samples == 4);
  CHECK(r.success_rate == Approx(0.75));
  CHECK(r.undetected_rate == Approx(0.5));
  CHECK(r.undetected_rate <= r.success_rate);

  // nothing flagged: R equals S
  for (auto& res : results) res.flagged = false;
  const RateReport r2 = success_and_undetected_rates(results);
  CHECK(r2.undetected_rate == Approx(r2.success_rate));

  // everything flagged: R is zero
  for (auto& res : results) res.flagged = true;
  const RateReport r3 = success_and_undetected_rates(results);
  CHECK(r3.undetected_rate == 0.0);
}

TEST_CASE("self-transfer of source-successful examples is total") {
  CapsNetConfig cfg = micro_config();
  Model<float> model = init_model<float>(cfg, 53);
  const auto ds = synthetic_dataset<float>(3, 6, 8, 102, 1);
  const auto info = forward_predict(model, ds.images);
  std::vector<bool> success(ds.labels.size());
  int successes = 0;
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    success[i] = info.predictions[i] != ds.labels[i];
    successes += success[i];
  }
  if (successes == 0) return;  // untrained model rarely classifies everything
  const double tsr = transfer_eval(ds.images, ds.labels, success, model);
  CHECK(tsr == Approx(1.0));
}

TEST_CASE("transfer against a constant predictor misses one class") {
  CapsNetConfig cfg = micro_config();
  cfg.kind = ModelKind::cnn_r;
  Model<float> constant = init_model<float>(cfg, 54);
  Tensor<float>& w = constant.param("cls.weight");
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = 0;
  const auto ds = synthetic_dataset<float>(3, 9, 8, 103, 1);
  const std::vector<bool> success(ds.labels.size(), true);
  const double tsr = transfer_eval(ds.images, ds.labels, success, constant);
  CHECK(tsr == Approx(1.0 - 1.0 / 3.0).epsilon(1e-9));

  CHECK_THROWS_AS(transfer_eval(ds.images, ds.labels,
                                std::vector<bool>(ds.labels.size(), false),
                                constant),
                  Error);
}

TEST_CASE("transfer rate ignores evaluation order") {
  CapsNetConfig cfg = micro_config();
  Model<float> source = init_model<float>(cfg, 55);
  Model<float> target = init_model<float>(cfg, 56);
  const auto ds = synthetic_dataset<float>(3, 8, 8, 104, 1);
  const auto info = forward_predict(source, ds.images);
  std::vector<bool> success(ds.labels.size());
  int cnt = 0;
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    success[i] = info.predictions[i] != ds.labels[i];
    cnt += success[i];
  }
  if (cnt == 0) return;
  const double a = transfer_eval(ds.images, ds.labels, success, target);

  // shuffled copy
  std::vector<std::int64_t> perm(ds.labels.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<std::int64_t>(i);
  Rng rng(105);
  rng.shuffle(perm);
  const Shape& is = ds.images.shape();
  const std::int64_t per = is[1] * is[2] * is[3];
  Tensor<float> shuffled(is);
  std::vector<int> labels(ds.labels.size());
  std::vector<bool> success2(ds.labels.size());
  for (std::size_t k = 0; k < perm.size(); ++k) {
    for (std::int64_t p = 0; p < per; ++p)
      shuffled[static_cast<std::int64_t>(k) * per + p] = ds.images[perm[k] * per + p];
    labels[k] = ds.labels[static_cast<std::size_t>(perm[k])];
    success2[k] = success[static_cast<std::size_t>(perm[k])];
  }
  const double b = transfer_eval(shuffled, labels, success2, target);
  CHECK(a == Approx(b));
}

TEST_CASE("affine eval with identity transforms equals plain evaluation") {
  CapsNetConfig cfg = micro_config();
  Model<float> model = init_model<float>(cfg, 57);
  const auto ds = synthetic_dataset<float>(3, 6, 8, 106, 1);
  const EvalReport plain = evaluate(model, ds);
  const EvalReport affine = affine_eval(model, ds, 0, 0.0, std::nullopt, 9);
  CHECK(affine.standard_acc == Approx(plain.standard_acc));
}

TEST_CASE("bench requires examples beyond the warm-up") {
  CapsNetConfig cfg = micro_config();
  Model<float> model = init_model<float>(cfg, 58);
  const auto tiny = synthetic_dataset<float>(3, 1, 8, 107, 1);
  AttackConfig c;
  c.family = AttackFamily::pgd;
  c.target_head = TargetHead::votes;
  c.epsilon = 0.05;
  c.alpha = 0.01;
  c.iterations = 2;
  CHECK_THROWS_AS(bench_attack_time(model, c, tiny, 5), Error);

  const auto sample = synthetic_dataset<float>(3, 3, 8, 108, 1);
  const TimingReport r = bench_attack_time(model, c, sample, 2);
  CHECK(r.n == 7);
  CHECK(r.mean_ms > 0.0);
  CHECK(r.single_inference_ms > 0.0);
}

TEST_CASE("attack time grows about linearly with the iteration count") {
  CapsNetConfig cfg = micro_config(3);
  Model<float> model = init_model<float>(cfg, 63);
  const auto sample = synthetic_dataset<float>(3, 12, 8, 109, 1);
  AttackConfig c;
  c.family = AttackFamily::pgd;
  c.target_head = TargetHead::caps;
  c.epsilon = 0.06;
  c.alpha = 0.006;
  c.random_start = true;
  c.iterations = 16;
  const TimingReport r1 = bench_attack_time(model, c, sample, 4);
  c.iterations = 32;
  const TimingReport r2 = bench_attack_time(model, c, sample, 4);
  const double ratio = r2.mean_ms / r1.mean_ms;
  CHECK(ratio > 2.0 * 0.75);
  CHECK(ratio < 2.0 * 1.25);
}
