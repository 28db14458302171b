#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "caps/attacks.hpp"
#include "caps/capsnet.hpp"
#include "caps/data.hpp"
#include "caps/reconstruction.hpp"

namespace caps {

enum class LossKind { margin, ce_log_lengths };

enum class ATMode { none, caps, caps_plus_votes, votes_only };

struct TrainConfig {
  std::int64_t epochs = 20;
  std::int64_t batch_size = 64;
  double lr = 0.1;
  double lr_decayed = 0.01;
  std::int64_t decay_epoch = 12;
  double momentum = 0.9;
  LossKind loss = LossKind::margin;
  double recon_weight = 0.0005;
  ATMode at_mode = ATMode::none;
  std::int64_t at_iterations = 0;
  double at_epsilon = 0.0;
  double at_alpha = 0.0;
  double at_vote_weight = 1.0;  // weight of the vote term in the combined loss
  std::int64_t at_warmup_epochs = 0;  // clean epochs before the inner attack
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0 || batch_size < 1) throw ConfigError("bad schedule");
    if (epochs > 0 && decay_epoch >= epochs)
      throw ConfigError("decay_epoch must precede epochs");
  }
};

struct EpochMetrics {
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  double test_acc = 0.0;
};

inline double effective_lr(const TrainConfig& cfg, std::int64_t epoch) {
  return epoch <= cfg.decay_epoch ? cfg.lr : cfg.lr_decayed;
}

namespace detail {

template <typename S>
Tensor<S> gather_batch(const Dataset<S>& ds, const std::vector<std::int64_t>& idx,
                       std::int64_t from, std::int64_t count,
                       std::vector<int>& labels_out) {
  const Shape& s = ds.images.shape();
  const std::int64_t per = s[1] * s[2] * s[3];
  Tensor<S> batch({count, s[1], s[2], s[3]});
  labels_out.resize(static_cast<std::size_t>(count));
  for (std::int64_t b = 0; b < count; ++b) {
    const std::int64_t src = idx[static_cast<std::size_t>(from + b)];
    for (std::int64_t p = 0; p < per; ++p)
      batch[b * per + p] = ds.images[src * per + p];
    labels_out[static_cast<std::size_t>(b)] = ds.labels[static_cast<std::size_t>(src)];
  }
  return batch;
}

// Classification + reconstruction-regularizer loss on a bound model. Ground
// truth selects the reconstruction mask at train time.
template <typename S>
Var<S> training_loss(Tape<S>& tape, const BoundModel<S>& bm, Var<S> x,
                     const std::vector<int>& labels, const TrainConfig& cfg) {
  const auto& mc = bm.cfg();
  const std::int64_t n = x.value().shape()[0];
  Var<S> cls_loss, recon_in;
  if (mc.kind == ModelKind::capsnet) {
    Var<S> votes = compute_votes(bm, extract_primary(bm, x));
    auto routed = dynamic_routing(tape, votes, mc.routing_iters,
                                  bm.model->routing_runs.get());
    Var<S> lengths = l2_norm_axis(routed.capsules, -1);
    cls_loss = cfg.loss == LossKind::margin
                   ? margin_loss(lengths, labels)
                   : cross_entropy_with_logits(
                         log_op(clamp_min(lengths, static_cast<S>(kLengthFloor))),
                         labels);
    recon_in = reconstruct_masked(bm, routed.capsules, labels);
  } else {
    Var<S> acts = cnn_activations(bm, x);
    cls_loss = cross_entropy_with_logits(cnn_logits(bm, acts), labels);
    recon_in = reconstruct_cnn(bm, acts, labels);
  }
  if (cfg.recon_weight <= 0.0) return cls_loss;
  Var<S> flat = reshape(x, {n, mc.pixels()});
  Var<S> diff = sub(recon_in, flat);
  Var<S> sse = scale(sum_all(mul(diff, diff)), S(1) / static_cast<S>(n));
  return add(cls_loss, scale(sse, static_cast<S>(cfg.recon_weight)));
}

// Inner maximization objective for adversarial training.
template <typename S>
Var<S> at_inner_loss(Tape<S>& tape, const BoundModel<S>& bm, Var<S> x,
                     const std::vector<int>& labels, const TrainConfig& cfg) {
  const auto& mc = bm.cfg();
  if (mc.kind != ModelKind::capsnet) {
    return cross_entropy_with_logits(cnn_logits(bm, cnn_activations(bm, x)),
                                     labels);
  }
  Var<S> votes = compute_votes(bm, extract_primary(bm, x));
  Var<S> caps_ce, vote_ce;
  if (cfg.at_mode != ATMode::votes_only) {
    auto routed = dynamic_routing(tape, votes, mc.routing_iters,
                                  bm.model->routing_runs.get());
    caps_ce = cross_entropy_with_logits(caps_logits(routed.capsules), labels);
  }
  if (cfg.at_mode != ATMode::caps) {
    vote_ce = cross_entropy_with_logits(
        vote_logits(votes, VoteHead::average_then_squash), labels);
  }
  switch (cfg.at_mode) {
    case ATMode::caps: return caps_ce;
    case ATMode::votes_only: return vote_ce;
    default:
      return add(caps_ce, scale(vote_ce, static_cast<S>(cfg.at_vote_weight)));
  }
}

// Batched PGD on the inner loss; gradients of a mean decouple per example, so
// this equals per-example attacks at much lower tape overhead.
template <typename S>
Tensor<S> at_perturb(const Model<S>& model, const Tensor<S>& batch,
                     const std::vector<int>& labels, const TrainConfig& cfg,
                     Rng& rng) {
  Tensor<S> delta(batch.shape());
  for (std::int64_t i = 0; i < delta.numel(); ++i)
    delta[i] = static_cast<S>(rng.uniform(-cfg.at_epsilon, cfg.at_epsilon));
  project_ball(delta, batch, cfg.at_epsilon);
  for (std::int64_t it = 0; it < cfg.at_iterations; ++it) {
    Tape<S> tape;
    BoundModel<S> bm = bind(tape, model, false);
    Var<S> dvar = tape.leaf(delta, true);
    Var<S> x = add(tape.constant(batch), dvar);
    Var<S> loss = at_inner_loss(tape, bm, x, labels, cfg);
    tape.backward(loss);
    Tensor<S> grad = dvar.grad();
    if (grad.numel() == 0) break;
    for (std::int64_t i = 0; i < delta.numel(); ++i)
      delta[i] += static_cast<S>(cfg.at_alpha) * sign_of(grad[i]);
    project_ball(delta, batch, cfg.at_epsilon);
  }
  return delta;
}

}  // namespace detail

// SGD with classic momentum; velocity buffers keyed by parameter name.
template <typename S>
class SgdOptimizer {
 public:
  explicit SgdOptimizer(double momentum) : momentum_(momentum) {}

  void step(Model<S>& model, const BoundModel<S>& bm, double lr) {
    for (auto& p : model.params) {
      const Tensor<S>& g = bm[p.name].grad();
      if (g.numel() == 0) continue;
      Tensor<S>& v = velocity_[p.name];
      if (v.numel() == 0) v = Tensor<S>::zeros(p.value.shape());
      for (std::int64_t i = 0; i < p.value.numel(); ++i) {
        v[i] = static_cast<S>(momentum_) * v[i] + g[i];
        p.value[i] -= static_cast<S>(lr) * v[i];
      }
    }
  }

 private:
  double momentum_;
  std::unordered_map<std::string, Tensor<S>> velocity_;
};

template <typename S>
double standard_accuracy(const Model<S>& model, const Dataset<S>& ds) {
  if (ds.size() == 0) return 0.0;
  const auto info = forward_predict(model, ds.images);
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    if (info.predictions[i] == ds.labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(ds.size());
}

struct EvalReport {
  double standard_acc = 0.0;
  std::optional<double> robust_acc;
};

// Standard accuracy, and robust accuracy under a per-example attack when an
// attack config is supplied. Per-example seeds are derived from the config
// seed xor the example index.
template <typename S>
EvalReport evaluate(const Model<S>& model, const Dataset<S>& ds,
                    const std::optional<AttackConfig>& attack = std::nullopt) {
  EvalReport r;
  r.standard_acc = standard_accuracy(model, ds);
  if (!attack) return r;
  std::int64_t correct = 0;
  for (std::int64_t i = 0; i < ds.size(); ++i) {
    AttackConfig cfg = *attack;
    cfg.seed = attack->seed ^ static_cast<std::uint64_t>(i);
    const auto outcome =
        gradient_attack(model, ds.image(i), ds.labels[static_cast<std::size_t>(i)], cfg);
    if (outcome.final_prediction == ds.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  r.robust_acc = static_cast<double>(correct) / static_cast<double>(ds.size());
  return r;
}

// Shared training loop. at_mode selects between standard training and
// adversarial training on PGD perturbations of each batch.
template <typename S>
std::vector<EpochMetrics> train(Model<S>& model, const Dataset<S>& train_ds,
                                const Dataset<S>& test_ds, const TrainConfig& cfg) {
  cfg.validate();
  if (train_ds.size() == 0) throw TrainingError("empty training set");
  SgdOptimizer<S> opt(cfg.momentum);
  std::vector<EpochMetrics> metrics;
  std::vector<std::int64_t> order(static_cast<std::size_t>(train_ds.size()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);

  const bool adversarial =
      cfg.at_mode != ATMode::none && cfg.at_iterations > 0;
  Rng attack_rng(mix_seed(cfg.seed, 0xadf0));

  for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, 0x5f5f + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    const double lr = effective_lr(cfg, epoch);
    double loss_sum = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t from = 0; from < train_ds.size(); from += cfg.batch_size) {
      const std::int64_t count =
          std::min(cfg.batch_size, train_ds.size() - from);
      std::vector<int> labels;
      Tensor<S> batch = detail::gather_batch(train_ds, order, from, count, labels);
      if (adversarial && epoch > cfg.at_warmup_epochs) {
        const Tensor<S> delta =
            detail::at_perturb(model, batch, labels, cfg, attack_rng);
        for (std::int64_t i = 0; i < batch.numel(); ++i) batch[i] += delta[i];
      }
      Tape<S> tape;
      BoundModel<S> bm = bind(tape, model, true);
      Var<S> x = tape.constant(batch);
      Var<S> loss = detail::training_loss(tape, bm, x, labels, cfg);
      const double lv = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(lv))
        throw TrainingError("training diverged at epoch " + std::to_string(epoch));
      tape.backward(loss);
      opt.step(model, bm, lr);
      loss_sum += lv;
      ++batches;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    m.test_acc = standard_accuracy(model, test_ds);
    metrics.push_back(m);
  }
  return metrics;
}

template <typename S>
std::vector<EpochMetrics> train_standard(Model<S>& model, const Dataset<S>& train_ds,
                                         const Dataset<S>& test_ds,
                                         TrainConfig cfg) {
  cfg.at_mode = ATMode::none;
  return train(model, train_ds, test_ds, cfg);
}

template <typename S>
std::vector<EpochMetrics> train_adversarial(Model<S>& model,
                                            const Dataset<S>& train_ds,
                                            const Dataset<S>& test_ds,
                                            const TrainConfig& cfg) {
  if (cfg.at_mode == ATMode::none)
    throw ConfigError("train_adversarial requires an at_mode");
  return train(model, train_ds, test_ds, cfg);
}

}  // namespace caps
