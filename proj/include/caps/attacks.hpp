#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "caps/capsnet.hpp"
#include "caps/reconstruction.hpp"
#include "caps/rng.hpp"

// Perturbation generators: sign-gradient families under an l_inf budget,
// selectable loss heads (CNN logits, routed capsules, routing-free votes),
// targeted mode, and the two-stage detection-aware variant.

namespace caps {

enum class AttackFamily { fgsm, bim, pgd, mim };

enum class TargetHead { cnn_logits, caps, votes, votes_variant1, votes_variant2 };

struct AttackConfig {
  AttackFamily family = AttackFamily::pgd;
  TargetHead target_head = TargetHead::caps;
  double epsilon = 0.0;
  double alpha = 0.0;
  std::int64_t iterations = 1;
  double momentum_decay = 1.0;  // mim only
  bool random_start = false;    // pgd default on, others off
  std::optional<int> targeted;
  double beta = 0.5;              // two-stage balance, detection-aware only
  bool stage2_descend = true;     // step down the reconstruction error
  bool stages_sequential = false; // run stage 1 fully, then stage 2
  bool stage2_clean_ref = false;  // measure recon distance to the clean image
  std::uint64_t seed = 0;

  void validate() const {
    if (epsilon < 0) throw ConfigError("epsilon must be >= 0");
    if (family == AttackFamily::fgsm) {
      if (iterations != 1) throw ConfigError("fgsm uses exactly one iteration");
      if (alpha != epsilon) throw ConfigError("fgsm requires alpha == epsilon");
    } else {
      if (iterations < 1) throw ConfigError("iterations must be >= 1");
      if (epsilon > 0 && !(alpha > 0 && alpha <= epsilon))
        throw ConfigError("need 0 < alpha <= epsilon for multi-step attacks");
      if (epsilon == 0 && alpha != 0)
        throw ConfigError("alpha must be 0 when epsilon is 0");
    }
    if (beta < 0 || beta > 1) throw ConfigError("beta must lie in [0, 1]");
  }
};

template <typename S>
struct AttackOutcome {
  Tensor<S> adversarial;  // [c, h, w], pixels in [0, 1]
  Tensor<S> delta;        // same shape, |delta|_inf <= epsilon
  bool success = false;
  int final_prediction = 0;
  std::vector<double> loss_trace;   // surrogate loss per iteration
  bool flagged = false;             // only meaningful with a detector
  double recon_error = 0.0;
  std::uint64_t routing_runs_in_steps = 0;
};

// Per-coordinate clamp of delta to [-eps, eps], then of x+delta to [0, 1]
// (delta adjusted accordingly).
template <typename S>
void project_ball(Tensor<S>& delta, const Tensor<S>& x, double epsilon) {
  if (delta.shape() != x.shape())
    throw ShapeError("project_ball shape mismatch");
  const S eps = static_cast<S>(epsilon);
  for (std::int64_t i = 0; i < delta.numel(); ++i) {
    S d = delta[i];
    if (d > eps) d = eps;
    if (d < -eps) d = -eps;
    S v = x[i] + d;
    if (v > S(1)) d = S(1) - x[i];
    if (v < S(0)) d = -x[i];
    delta[i] = d;
  }
}

template <typename S>
S sign_of(S v) {
  if (v > S(0)) return S(1);
  if (v < S(0)) return S(-1);
  return S(0);  // dead-gradient pixels stay put
}

// Differentiable surrogate the attack ascends. Untargeted: cross-entropy of
// the selected head against the true label. Targeted: negated cross-entropy
// against the target class.
template <typename S>
Var<S> attack_loss(Tape<S>& tape, const BoundModel<S>& bm, Var<S> x,
                   int label, const AttackConfig& cfg) {
  if (cfg.targeted && *cfg.targeted == label)
    throw ConfigError("targeted class equals the true label");
  const auto& mc = bm.cfg();
  const bool cnn = mc.kind != ModelKind::capsnet;
  if (cnn != (cfg.target_head == TargetHead::cnn_logits))
    throw ConfigError("target head does not match model kind");
  Var<S> logits;
  if (cfg.target_head == TargetHead::cnn_logits) {
    logits = cnn_logits(bm, cnn_activations(bm, x));
  } else {
    Var<S> votes = compute_votes(bm, extract_primary(bm, x));
    switch (cfg.target_head) {
      case TargetHead::caps: {
        auto routed = dynamic_routing(tape, votes, mc.routing_iters,
                                      bm.model->routing_runs.get());
        logits = caps_logits(routed.capsules);
        break;
      }
      case TargetHead::votes:
        logits = vote_logits(votes, VoteHead::average_then_squash);
        break;
      case TargetHead::votes_variant1:
        logits = vote_logits(votes, VoteHead::squash_then_average);
        break;
      case TargetHead::votes_variant2: {
        const std::vector<int> lab = {cfg.targeted ? *cfg.targeted : label};
        Var<S> loss = per_vote_losses(votes, lab);
        return cfg.targeted ? scale(loss, S(-1)) : loss;
      }
      default:
        throw ConfigError("unsupported target head");
    }
  }
  const std::vector<int> lab = {cfg.targeted ? *cfg.targeted : label};
  Var<S> ce = cross_entropy_with_logits(logits, lab);
  return cfg.targeted ? scale(ce, S(-1)) : ce;
}

namespace detail {

template <typename S>
Tensor<S> loss_gradient(const Model<S>& model, const Tensor<S>& x,
                        const Tensor<S>& delta, int label,
                        const AttackConfig& cfg, double& loss_out) {
  Tape<S> tape;
  BoundModel<S> bm = bind(tape, model, false);
  Var<S> dvar = tape.leaf(delta, true);
  Var<S> input = add(tape.constant(x), dvar);
  Shape batched = x.shape();
  batched.insert(batched.begin(), 1);
  Var<S> loss = attack_loss(tape, bm, reshape(input, batched), label, cfg);
  tape.backward(loss);
  loss_out = static_cast<double>(loss.value()[0]);
  return dvar.grad();
}

template <typename S>
bool judge_success(const Model<S>& model, const Tensor<S>& adv, int label,
                   const AttackConfig& cfg, int& pred_out) {
  Shape batched = adv.shape();
  batched.insert(batched.begin(), 1);
  const auto info = forward_predict(model, adv.reshaped(batched));
  pred_out = info.predictions[0];
  return cfg.targeted ? pred_out == *cfg.targeted : pred_out != label;
}

}  // namespace detail

// Sign-gradient attack on one example. Success is always judged by the full
// model with routing, whatever head supplied the gradients.
template <typename S>
AttackOutcome<S> gradient_attack(const Model<S>& model, const Tensor<S>& x,
                                 int label, const AttackConfig& cfg) {
  cfg.validate();
  AttackOutcome<S> out;
  Tensor<S> delta = Tensor<S>::zeros(x.shape());
  Rng rng(cfg.seed);
  const bool random_start = cfg.family == AttackFamily::pgd && cfg.random_start;
  if (random_start) {
    for (std::int64_t i = 0; i < delta.numel(); ++i)
      delta[i] = static_cast<S>(rng.uniform(-cfg.epsilon, cfg.epsilon));
    project_ball(delta, x, cfg.epsilon);
  }
  Tensor<S> momentum = Tensor<S>::zeros(x.shape());
  const std::uint64_t runs_before = model.routing_runs->load();
  for (std::int64_t it = 0; it < cfg.iterations; ++it) {
    double loss = 0.0;
    Tensor<S> grad = detail::loss_gradient(model, x, delta, label, cfg, loss);
    out.loss_trace.push_back(loss);
    if (grad.numel() == 0) grad = Tensor<S>::zeros(x.shape());
    if (cfg.family == AttackFamily::mim) {
      double l1 = 0.0;
      for (std::int64_t i = 0; i < grad.numel(); ++i)
        l1 += std::abs(static_cast<double>(grad[i]));
      for (std::int64_t i = 0; i < grad.numel(); ++i) {
        momentum[i] =
            static_cast<S>(cfg.momentum_decay) * momentum[i] +
            (l1 > 0 ? static_cast<S>(static_cast<double>(grad[i]) / l1) : S(0));
      }
      for (std::int64_t i = 0; i < delta.numel(); ++i)
        delta[i] += static_cast<S>(cfg.alpha) * sign_of(momentum[i]);
    } else {
      for (std::int64_t i = 0; i < delta.numel(); ++i)
        delta[i] += static_cast<S>(cfg.alpha) * sign_of(grad[i]);
    }
    project_ball(delta, x, cfg.epsilon);
  }
  out.routing_runs_in_steps = model.routing_runs->load() - runs_before;
  out.delta = delta;
  out.adversarial = x;
  for (std::int64_t i = 0; i < x.numel(); ++i) out.adversarial[i] = x[i] + delta[i];
  out.success =
      detail::judge_success(model, out.adversarial, label, cfg, out.final_prediction);
  return out;
}

namespace detail {

// Gradient of the stage-2 objective d(., r(v_p)), the winning-class
// reconstruction distance of the perturbed input. By default the distance is
// taken against the presented input x+delta, the quantity the detector
// thresholds; descending it pulls the input and its reconstruction together.
// With clean_ref the clean image is the fixed reference instead and only the
// reconstruction path carries gradient. Also reports the current prediction.
template <typename S>
Tensor<S> recon_error_gradient(const Model<S>& model, const Tensor<S>& x,
                               const Tensor<S>& delta, bool clean_ref,
                               double& err_out, int& pred_out) {
  Tape<S> tape;
  BoundModel<S> bm = bind(tape, model, false);
  Var<S> dvar = tape.leaf(delta, true);
  Var<S> input = add(tape.constant(x), dvar);
  Shape batched = x.shape();
  batched.insert(batched.begin(), 1);
  Var<S> xb = reshape(input, batched);
  Var<S> recon;
  std::vector<int> pred(1);
  if (model.cfg.kind == ModelKind::capsnet) {
    Var<S> votes = compute_votes(bm, extract_primary(bm, xb));
    auto routed = dynamic_routing(tape, votes, model.cfg.routing_iters,
                                  model.routing_runs.get());
    const Tensor<S> lengths = l2_norm_axis(routed.capsules, -1).value();
    pred[0] = argmax_lowest(lengths.data(), model.cfg.num_classes);
    recon = reconstruct_masked(bm, routed.capsules, pred);
  } else {
    Var<S> acts = cnn_activations(bm, xb);
    const Tensor<S> logits = cnn_logits(bm, acts).value();
    pred[0] = argmax_lowest(logits.data(), model.cfg.num_classes);
    recon = reconstruct_cnn(bm, acts, pred);
  }
  Var<S> ref = clean_ref ? tape.constant(x.reshaped({1, model.cfg.pixels()}))
                         : reshape(xb, {1, model.cfg.pixels()});
  Var<S> err = sum_all(reconstruction_error_var(ref, recon));
  tape.backward(err);
  err_out = static_cast<double>(err.value()[0]);
  pred_out = pred[0];
  Tensor<S> g = dvar.grad();
  if (g.numel() == 0) g = Tensor<S>::zeros(x.shape());
  return g;
}

}  // namespace detail

// Two-stage detection-aware attack: a classification-loss ascent step of size
// alpha*beta, then a reconstruction-error step of size alpha*(1-beta),
// descending by default. The reconstruction step only refines perturbations
// that currently fool the model; while the prediction is still correct it
// would pull the input back toward its own class instead. Stages alternate
// per iteration unless stages_sequential is set, which runs all stage-1 steps
// first.
template <typename S>
AttackOutcome<S> detection_aware_attack(const Model<S>& model, const Tensor<S>& x,
                                        int label, const AttackConfig& cfg,
                                        const DetectionThreshold& threshold) {
  cfg.validate();
  AttackOutcome<S> out;
  Tensor<S> delta = Tensor<S>::zeros(x.shape());
  Rng rng(cfg.seed);
  if (cfg.family == AttackFamily::pgd && cfg.random_start) {
    for (std::int64_t i = 0; i < delta.numel(); ++i)
      delta[i] = static_cast<S>(rng.uniform(-cfg.epsilon, cfg.epsilon));
    project_ball(delta, x, cfg.epsilon);
  }

  const auto fooling = [&](const Tensor<S>& d) {
    int pred = 0;
    Tensor<S> adv = x;
    for (std::int64_t i = 0; i < x.numel(); ++i) adv[i] = x[i] + d[i];
    detail::judge_success(model, adv, label, cfg, pred);
    return cfg.targeted ? pred == *cfg.targeted : pred != label;
  };
  const auto stage1 = [&](Tensor<S>& d) {
    if (cfg.beta == 0.0) return;  // pure reconstruction descent
    double loss = 0.0;
    Tensor<S> grad = detail::loss_gradient(model, x, d, label, cfg, loss);
    out.loss_trace.push_back(loss);
    const S step = static_cast<S>(cfg.alpha * cfg.beta);
    for (std::int64_t i = 0; i < d.numel(); ++i)
      d[i] += step * sign_of(grad[i]);
    project_ball(d, x, cfg.epsilon);
  };
  const auto stage2 = [&](Tensor<S>& d) {
    if (cfg.beta == 1.0) return;  // reduces to the detection-agnostic attack
    double err = 0.0;
    int pred = 0;
    Tensor<S> grad = detail::recon_error_gradient(model, x, d,
                                                  cfg.stage2_clean_ref, err, pred);
    const bool fooled = cfg.targeted ? pred == *cfg.targeted : pred != label;
    if (!fooled) return;
    const S step = static_cast<S>(cfg.alpha * (1.0 - cfg.beta)) *
                   (cfg.stage2_descend ? S(-1) : S(1));
    Tensor<S> trial = d;
    for (std::int64_t i = 0; i < trial.numel(); ++i)
      trial[i] += step * sign_of(grad[i]);
    project_ball(trial, x, cfg.epsilon);
    if (fooling(trial)) d = trial;
  };

  if (cfg.stages_sequential) {
    for (std::int64_t it = 0; it < cfg.iterations; ++it) stage1(delta);
    for (std::int64_t it = 0; it < cfg.iterations; ++it) stage2(delta);
  } else {
    for (std::int64_t it = 0; it < cfg.iterations; ++it) {
      stage1(delta);
      stage2(delta);
    }
  }

  out.delta = delta;
  out.adversarial = x;
  for (std::int64_t i = 0; i < x.numel(); ++i) out.adversarial[i] = x[i] + delta[i];
  out.success =
      detail::judge_success(model, out.adversarial, label, cfg, out.final_prediction);
  Shape batched = x.shape();
  batched.insert(batched.begin(), 1);
  const auto verdicts =
      detect(model, out.adversarial.reshaped(batched), threshold);
  out.flagged = verdicts[0].flagged;
  out.recon_error = verdicts[0].error;
  return out;
}

}  // namespace caps
