#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "caps/attacks.hpp"
#include "caps/capsnet.hpp"
#include "caps/data.hpp"
#include "caps/training.hpp"

// Measurement procedures over trained models and attack results: vote
// agreement histograms, perturbation norms, success/undetected rates,
// transfer rates, affine-transformed evaluation, and attack timing.

namespace caps {

constexpr int kHistogramBins = 100;

enum class ClassSelector { ground_truth, largest_non_gt };

// Cosine-agreement histogram between votes and the selected output capsule.
// 100 equal-width bins partition [-1, 1]; bins are left-closed, right-open
// except the last, which closes at 1. Zero votes or a zero capsule count as
// cosine 0 (abstention).
struct VoteHistogram {
  std::vector<double> vote_fraction =
      std::vector<double>(kHistogramBins, 0.0);
  std::vector<double> mean_vote_length =
      std::vector<double>(kHistogramBins, 0.0);
  std::vector<double> mean_coupling = std::vector<double>(kHistogramBins, 0.0);
  std::int64_t total_votes = 0;

  static double bin_low(int b) { return -1.0 + 0.02 * b; }
  static double bin_high(int b) { return -1.0 + 0.02 * (b + 1); }
  static int bin_of(double cosine) {
    if (cosine >= 1.0) return kHistogramBins - 1;
    int b = static_cast<int>(std::floor((cosine + 1.0) * 50.0));
    if (b < 0) b = 0;
    if (b >= kHistogramBins) b = kHistogramBins - 1;
    return b;
  }
};

namespace detail {

// Visits (cosine, vote length, coupling) of every vote toward the selected
// class of every example.
template <typename S, typename Fn>
void for_each_vote_agreement(const Model<S>& model, const Tensor<S>& images,
                             const std::vector<int>& labels,
                             ClassSelector selector, Fn&& fn) {
  if (images.rank() != 4 || images.shape()[0] == 0)
    throw Error("vote agreement: empty dataset");
  if (model.cfg.kind != ModelKind::capsnet)
    throw ConfigError("vote agreement requires a capsule model");
  const auto info = forward_predict(model, images);
  const std::int64_t n = images.shape()[0];
  const std::int64_t N = model.cfg.num_primary;
  const std::int64_t M = model.cfg.num_classes;
  const std::int64_t d = model.cfg.out_dim;
  for (std::int64_t e = 0; e < n; ++e) {
    std::int64_t j = labels[static_cast<std::size_t>(e)];
    if (selector == ClassSelector::largest_non_gt) {
      const S* scores = info.class_scores.data() + e * M;
      std::int64_t best = -1;
      for (std::int64_t k = 0; k < M; ++k) {
        if (k == labels[static_cast<std::size_t>(e)]) continue;
        if (best < 0 || scores[k] > scores[best]) best = k;
      }
      j = best;
    }
    const S* v = info.capsules.data() + (e * M + j) * d;
    double vn2 = 0.0;
    for (std::int64_t k = 0; k < d; ++k)
      vn2 += static_cast<double>(v[k]) * static_cast<double>(v[k]);
    const double vn = std::sqrt(vn2);
    for (std::int64_t i = 0; i < N; ++i) {
      const S* u = info.votes.data() + ((e * N + i) * M + j) * d;
      double un2 = 0.0, dot = 0.0;
      for (std::int64_t k = 0; k < d; ++k) {
        un2 += static_cast<double>(u[k]) * static_cast<double>(u[k]);
        dot += static_cast<double>(u[k]) * static_cast<double>(v[k]);
      }
      const double un = std::sqrt(un2);
      const double cosine = (un > 0.0 && vn > 0.0) ? dot / (un * vn) : 0.0;
      fn(cosine, un, static_cast<double>(info.coupling[(e * N + i) * M + j]));
    }
  }
}

}  // namespace detail

template <typename S>
VoteHistogram vote_agreement_histogram(const Model<S>& model,
                                       const Tensor<S>& images,
                                       const std::vector<int>& labels,
                                       ClassSelector selector) {
  std::vector<std::int64_t> count(kHistogramBins, 0);
  std::vector<double> len_sum(kHistogramBins, 0.0);
  std::vector<double> coup_sum(kHistogramBins, 0.0);
  detail::for_each_vote_agreement(
      model, images, labels, selector,
      [&](double cosine, double length, double coupling) {
        const int b = VoteHistogram::bin_of(cosine);
        count[static_cast<std::size_t>(b)]++;
        len_sum[static_cast<std::size_t>(b)] += length;
        coup_sum[static_cast<std::size_t>(b)] += coupling;
      });

  VoteHistogram h;
  std::int64_t total = 0;
  for (auto c : count) total += c;
  h.total_votes = total;
  if (total == 0) throw Error("vote_agreement_histogram: no votes recorded");
  for (int b = 0; b < kHistogramBins; ++b) {
    h.vote_fraction[b] =
        static_cast<double>(count[static_cast<std::size_t>(b)]) /
        static_cast<double>(total);
    if (count[static_cast<std::size_t>(b)] > 0) {
      h.mean_vote_length[b] = len_sum[static_cast<std::size_t>(b)] /
                              static_cast<double>(count[static_cast<std::size_t>(b)]);
      h.mean_coupling[b] = coup_sum[static_cast<std::size_t>(b)] /
                           static_cast<double>(count[static_cast<std::size_t>(b)]);
    }
  }
  return h;
}

inline void write_histogram_csv(const VoteHistogram& h, std::ostream& os) {
  os << "bin_index,bin_low,bin_high,vote_fraction,mean_vote_length,mean_coupling\n";
  char line[160];
  for (int b = 0; b < kHistogramBins; ++b) {
    std::snprintf(line, sizeof(line), "%d,%.2f,%.2f,%.9g,%.9g,%.9g\n", b,
                  VoteHistogram::bin_low(b), VoteHistogram::bin_high(b),
                  h.vote_fraction[b], h.mean_vote_length[b], h.mean_coupling[b]);
    os << line;
  }
}

// Mean absolute cosine against the selected class, a summary of how much vote
// mass sits away from zero agreement.
template <typename S>
double mean_abs_cosine(const Model<S>& model, const Tensor<S>& images,
                       const std::vector<int>& labels, ClassSelector selector) {
  double acc = 0.0;
  std::int64_t total = 0;
  detail::for_each_vote_agreement(model, images, labels, selector,
                                  [&](double cosine, double, double) {
                                    acc += std::abs(cosine);
                                    ++total;
                                  });
  return acc / static_cast<double>(total);
}

struct NormReport {
  double l0 = 0.0;
  double l1 = 0.0;
  double l2 = 0.0;
  std::int64_t count = 0;
};

// Mean perturbation norms over successful attacks; l0 counts exact nonzeros.
template <typename S>
NormReport perturbation_norms(const std::vector<Tensor<S>>& deltas) {
  if (deltas.empty()) throw Error("perturbation_norms: empty set");
  NormReport r;
  for (const auto& d : deltas) {
    double l0 = 0, l1 = 0, l2 = 0;
    for (std::int64_t i = 0; i < d.numel(); ++i) {
      const double v = static_cast<double>(d[i]);
      if (v != 0.0) l0 += 1.0;
      l1 += std::abs(v);
      l2 += v * v;
    }
    r.l0 += l0;
    r.l1 += l1;
    r.l2 += std::sqrt(l2);
  }
  const double n = static_cast<double>(deltas.size());
  r.l0 /= n;
  r.l1 /= n;
  r.l2 /= n;
  r.count = static_cast<std::int64_t>(deltas.size());
  return r;
}

struct RateReport {
  double success_rate = 0.0;    // S
  double undetected_rate = 0.0; // R, misclassified and not flagged
  std::int64_t samples = 0;     // K
};

template <typename S>
RateReport success_and_undetected_rates(const std::vector<AttackOutcome<S>>& results) {
  RateReport r;
  r.samples = static_cast<std::int64_t>(results.size());
  if (results.empty()) return r;
  std::int64_t s = 0, u = 0;
  for (const auto& res : results) {
    if (res.success) {
      ++s;
      if (!res.flagged) ++u;
    }
  }
  r.success_rate = static_cast<double>(s) / static_cast<double>(r.samples);
  r.undetected_rate = static_cast<double>(u) / static_cast<double>(r.samples);
  return r;
}

// Fraction of source-successful adversarial examples that also mislead the
// target model.
template <typename S>
double transfer_eval(const Tensor<S>& adv_images, const std::vector<int>& labels,
                     const std::vector<bool>& source_success,
                     const Model<S>& target) {
  const std::int64_t n = adv_images.shape()[0];
  std::vector<std::int64_t> chosen;
  for (std::int64_t i = 0; i < n; ++i)
    if (source_success[static_cast<std::size_t>(i)]) chosen.push_back(i);
  if (chosen.empty()) throw Error("transfer_eval: no source-successful examples");
  const Shape& s = adv_images.shape();
  const std::int64_t per = s[1] * s[2] * s[3];
  Tensor<S> subset({static_cast<std::int64_t>(chosen.size()), s[1], s[2], s[3]});
  for (std::size_t k = 0; k < chosen.size(); ++k)
    for (std::int64_t p = 0; p < per; ++p)
      subset[static_cast<std::int64_t>(k) * per + p] =
          adv_images[chosen[k] * per + p];
  const auto info = forward_predict(target, subset);
  std::int64_t transferred = 0;
  for (std::size_t k = 0; k < chosen.size(); ++k)
    if (info.predictions[k] != labels[static_cast<std::size_t>(chosen[k])])
      ++transferred;
  return static_cast<double>(transferred) / static_cast<double>(chosen.size());
}

// Accuracy and attacked accuracy on an affine-transformed copy of the test
// set; transform parameters are drawn per example from the run seed.
template <typename S>
EvalReport affine_eval(const Model<S>& model, const Dataset<S>& ds,
                       std::int64_t translate_px, double rotate_deg,
                       const std::optional<AttackConfig>& attack,
                       std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xaff1));
  Dataset<S> transformed;
  transformed.split = ds.split + "-affine";
  transformed.labels = ds.labels;
  transformed.images = Tensor<S>(ds.images.shape());
  const Shape& s = ds.images.shape();
  const std::int64_t per = s[1] * s[2] * s[3];
  for (std::int64_t i = 0; i < ds.size(); ++i) {
    const Tensor<S> img = random_affine(ds.image(i), translate_px, rotate_deg, rng);
    for (std::int64_t p = 0; p < per; ++p)
      transformed.images[i * per + p] = img[p];
  }
  return evaluate(model, transformed, attack);
}

struct TimingReport {
  double mean_ms = 0.0;            // per adversarial example
  std::int64_t n = 0;              // measured examples (after warm-up)
  double single_inference_ms = 0.0;
};

// Monotonic-clock timing of attack generation, single-threaded; the first
// `warmup` examples are discarded.
template <typename S>
TimingReport bench_attack_time(const Model<S>& model, const AttackConfig& cfg,
                               const Dataset<S>& sample, std::int64_t warmup = 5) {
  using clock = std::chrono::steady_clock;
  if (sample.size() <= warmup)
    throw Error("bench_attack_time: no examples left after warm-up");
  TimingReport r;
  double attack_total = 0.0, infer_total = 0.0;
  for (std::int64_t i = 0; i < sample.size(); ++i) {
    AttackConfig c = cfg;
    c.seed = cfg.seed ^ static_cast<std::uint64_t>(i);
    const Tensor<S> x = sample.image(i);
    const int label = sample.labels[static_cast<std::size_t>(i)];
    const auto t0 = clock::now();
    (void)gradient_attack(model, x, label, c);
    const auto t1 = clock::now();
    Shape batched = x.shape();
    batched.insert(batched.begin(), 1);
    (void)forward_predict(model, x.reshaped(batched));
    const auto t2 = clock::now();
    if (i < warmup) continue;
    attack_total += std::chrono::duration<double, std::milli>(t1 - t0).count();
    infer_total += std::chrono::duration<double, std::milli>(t2 - t1).count();
    ++r.n;
  }
  r.mean_ms = attack_total / static_cast<double>(r.n);
  r.single_inference_ms = infer_total / static_cast<double>(r.n);
  return r;
}

}  // namespace caps
