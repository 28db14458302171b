#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "caps/ops.hpp"
#include "caps/rng.hpp"

// Capsule network forward pass: primary capsule extraction, per-capsule class
// votes, iterative routing-by-agreement, and the logit heads the attacks
// target. Two CNN baselines share the backbone and reconstruction machinery.

namespace caps {

enum class Activation { linear, relu, sigmoid };

enum class ModelKind { capsnet, cnn_cr, cnn_r };

struct ConvSpec {
  std::int64_t channels = 0;
  std::int64_t kernel = 0;
  std::int64_t stride = 1;
  Activation act = Activation::relu;
};

struct CapsNetConfig {
  ModelKind kind = ModelKind::capsnet;
  std::int64_t in_channels = 1;
  std::int64_t in_h = 0;
  std::int64_t in_w = 0;
  std::vector<ConvSpec> backbone;
  std::int64_t num_primary = 0;   // N
  std::int64_t primary_dim = 0;   // d_in
  std::int64_t num_classes = 0;   // M
  std::int64_t out_dim = 0;       // d_out
  std::int64_t routing_iters = 1; // r
  std::vector<std::int64_t> recon_hidden;  // hidden FC widths

  std::int64_t pixels() const { return in_channels * in_h * in_w; }

  // [channels, height, width] after the conv stack.
  std::array<std::int64_t, 3> backbone_out() const {
    std::int64_t c = in_channels, h = in_h, w = in_w;
    for (const auto& l : backbone) {
      if (l.kernel > h || l.kernel > w)
        throw ConfigError("backbone kernel exceeds feature map size");
      h = (h - l.kernel) / l.stride + 1;
      w = (w - l.kernel) / l.stride + 1;
      c = l.channels;
    }
    return {c, h, w};
  }

  std::int64_t feature_count() const {
    const auto o = backbone_out();
    return o[0] * o[1] * o[2];
  }

  // Width of the reconstruction input: one activation per class and output
  // dimension for every model kind.
  std::int64_t recon_in() const { return num_classes * out_dim; }

  void validate() const {
    if (in_h <= 0 || in_w <= 0 || in_channels <= 0)
      throw ConfigError("invalid input dimensions");
    if (num_classes <= 0 || out_dim <= 0)
      throw ConfigError("num_classes and out_dim must be positive");
    if (kind == ModelKind::capsnet) {
      if (routing_iters < 1) throw ConfigError("routing_iters must be >= 1");
      if (num_primary <= 0 || primary_dim <= 0)
        throw ConfigError("num_primary and primary_dim must be positive");
      const auto o = backbone_out();
      if (o[0] % primary_dim != 0)
        throw ConfigError("backbone channels not divisible by primary_dim");
      if (feature_count() != num_primary * primary_dim)
        throw ConfigError("backbone output count " +
                          std::to_string(feature_count()) +
                          " != num_primary*primary_dim " +
                          std::to_string(num_primary * primary_dim));
      if ((o[0] / primary_dim) * o[1] * o[2] != num_primary)
        throw ConfigError("num_primary does not match capsule grid");
    }
  }
};

// Named parameter with unique name within a model.
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
};

template <typename S>
struct Model {
  CapsNetConfig cfg;
  std::vector<Parameter<S>> params;
  // Number of routing-loop executions; shared across copies so worker threads
  // and benchmarks observe one counter per logical model.
  std::shared_ptr<std::atomic<std::uint64_t>> routing_runs =
      std::make_shared<std::atomic<std::uint64_t>>(0);

  Tensor<S>& param(const std::string& name) {
    for (auto& p : params)
      if (p.name == name) return p.value;
    throw ConfigError("unknown parameter " + name);
  }
  const Tensor<S>& param(const std::string& name) const {
    return const_cast<Model*>(this)->param(name);
  }
  bool has_param(const std::string& name) const {
    for (const auto& p : params)
      if (p.name == name) return true;
    return false;
  }
  void add_param(std::string name, Tensor<S> value) {
    if (has_param(name)) throw ConfigError("duplicate parameter " + name);
    params.push_back({std::move(name), std::move(value)});
  }
};

namespace detail {

template <typename S>
Tensor<S> normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor<S> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<S>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace detail

// Expected parameter names and shapes for a config, in registration order.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(
    const CapsNetConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<std::string, Shape>> out;
  std::int64_t cin = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
    const auto& l = cfg.backbone[i];
    out.push_back({"conv" + std::to_string(i) + ".weight",
                   {l.channels, cin, l.kernel, l.kernel}});
    out.push_back({"conv" + std::to_string(i) + ".bias", {l.channels, 1, 1}});
    cin = l.channels;
  }
  const std::int64_t md = cfg.num_classes * cfg.out_dim;
  if (cfg.kind == ModelKind::capsnet) {
    out.push_back({"votes.W", {cfg.num_primary, cfg.primary_dim, md}});
  } else {
    out.push_back({"fc.weight", {cfg.feature_count(), md}});
    out.push_back({"fc.bias", {md}});
    if (cfg.kind == ModelKind::cnn_r) {
      out.push_back({"cls.weight", {md, cfg.num_classes}});
      out.push_back({"cls.bias", {cfg.num_classes}});
    }
  }
  std::int64_t w = cfg.recon_in();
  for (std::size_t i = 0; i <= cfg.recon_hidden.size(); ++i) {
    const std::int64_t next =
        i < cfg.recon_hidden.size() ? cfg.recon_hidden[i] : cfg.pixels();
    out.push_back({"recon.fc" + std::to_string(i) + ".weight", {w, next}});
    out.push_back({"recon.fc" + std::to_string(i) + ".bias", {next}});
    w = next;
  }
  return out;
}

template <typename S>
Model<S> init_model(const CapsNetConfig& cfg, std::uint64_t seed) {
  Model<S> m;
  m.cfg = cfg;
  Rng rng(mix_seed(seed, 0x1717));
  const std::string final_recon_bias =
      "recon.fc" + std::to_string(cfg.recon_hidden.size()) + ".bias";
  for (const auto& [name, shape] : parameter_layout(cfg)) {
    if (name.ends_with(".bias")) {
      // The decoder's sigmoid output starts near the dark background level;
      // a zero start saturates the whole pixel bank downward early on.
      m.add_param(name, name == final_recon_bias
                            ? Tensor<S>::full(shape, S(-2))
                            : Tensor<S>::zeros(shape));
      continue;
    }
    std::int64_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    if (shape.size() == 2) fan_in = shape[0];
    double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    if (name == "votes.W")
      stddev = std::sqrt(1.0 / static_cast<double>(cfg.primary_dim));
    m.add_param(name, detail::normal_init<S>(shape, stddev, rng));
  }
  return m;
}

// Model parameters leafed onto one tape (trainable leaves or constants).
template <typename S>
struct BoundModel {
  const Model<S>* model = nullptr;
  Tape<S>* tape = nullptr;
  std::unordered_map<std::string, Var<S>> vars;

  Var<S> operator[](const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw ConfigError("unbound parameter " + name);
    return it->second;
  }
  const CapsNetConfig& cfg() const { return model->cfg; }
};

template <typename S>
BoundModel<S> bind(Tape<S>& tape, const Model<S>& model, bool trainable = false) {
  BoundModel<S> bm;
  bm.model = &model;
  bm.tape = &tape;
  for (const auto& p : model.params)
    bm.vars.emplace(p.name, tape.leaf(p.value, trainable));
  return bm;
}

template <typename S>
Var<S> apply_activation(Var<S> x, Activation act) {
  switch (act) {
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::linear: return x;
  }
  return x;
}

// Conv stack over [n, c, h, w] images.
template <typename S>
Var<S> backbone_features(const BoundModel<S>& bm, Var<S> x) {
  const auto& cfg = bm.cfg();
  if (x.value().rank() != 4)
    throw ConfigError("backbone expects [n, c, h, w] input");
  if (x.value().shape()[1] != cfg.in_channels ||
      x.value().shape()[2] != cfg.in_h || x.value().shape()[3] != cfg.in_w)
    throw ConfigError("input shape " + shape_str(x.value().shape()) +
                      " does not match configured " +
                      shape_str({x.value().shape()[0], cfg.in_channels,
                                 cfg.in_h, cfg.in_w}));
  Var<S> f = x;
  for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
    const auto& l = cfg.backbone[i];
    f = conv2d(f, bm["conv" + std::to_string(i) + ".weight"], l.stride);
    f = add(f, bm["conv" + std::to_string(i) + ".bias"]);
    f = apply_activation(f, l.act);
  }
  return f;
}

// Backbone features regrouped into N primary capsule vectors of width d_in.
// Channels split into groups of d_in; capsule order is (group, y, x).
template <typename S>
Var<S> extract_primary(const BoundModel<S>& bm, Var<S> x) {
  const auto& cfg = bm.cfg();
  Var<S> f = backbone_features(bm, x);
  const Shape& fs = f.value().shape();
  const std::int64_t n = fs[0], c = fs[1], h = fs[2], w = fs[3];
  const std::int64_t g = c / cfg.primary_dim;
  Var<S> grouped = reshape(f, {n, g, cfg.primary_dim, h, w});
  Var<S> moved = permute(grouped, {0, 1, 3, 4, 2});
  return reshape(moved, {n, cfg.num_primary, cfg.primary_dim});
}

// Per-capsule votes for every class: votes[i][j] = W_ij . u_i, where the
// columns [j*d_out, (j+1)*d_out) of W[i] hold class j's transform.
template <typename S>
Var<S> compute_votes(const BoundModel<S>& bm, Var<S> u) {
  const auto& cfg = bm.cfg();
  Var<S> W = bm["votes.W"];
  const Shape& ws = W.value().shape();
  const Shape& us = u.value().shape();
  if (us.size() != 3 || us[1] != cfg.num_primary || us[2] != cfg.primary_dim)
    throw ConfigError("primary capsules shaped " + shape_str(us) +
                      ", expected [n, N, d_in]");
  if (ws[0] != cfg.num_primary || ws[1] != cfg.primary_dim ||
      ws[2] != cfg.num_classes * cfg.out_dim)
    throw ConfigError("vote transform shaped " + shape_str(ws));
  const std::int64_t n = us[0];
  Var<S> rows = reshape(u, {n, cfg.num_primary, 1, cfg.primary_dim});
  Var<S> prod = matmul(rows, W);  // [n, N, 1, M*d_out]
  return reshape(prod, {n, cfg.num_primary, cfg.num_classes, cfg.out_dim});
}

template <typename S>
struct RoutingResult {
  Var<S> capsules;  // [n, M, d_out]
  Var<S> coupling;  // [n, N, M]
};

// Routing by agreement, unrolled and fully differentiable. Priors are zero at
// every forward pass; agreement logits accumulate across iterations.
template <typename S>
RoutingResult<S> dynamic_routing(Tape<S>& tape, Var<S> votes,
                                 std::int64_t iterations,
                                 std::atomic<std::uint64_t>* counter = nullptr) {
  if (iterations < 1) throw ConfigError("routing_iters must be >= 1");
  const bool batched = votes.value().rank() == 4;
  if (!batched && votes.value().rank() != 3)
    throw ConfigError("votes must be [n, N, M, d] or [N, M, d]");
  Var<S> v4 = votes;
  if (!batched) {
    Shape s = votes.value().shape();
    v4 = reshape(votes, {1, s[0], s[1], s[2]});
  }
  const Shape& s = v4.value().shape();
  const std::int64_t n = s[0], N = s[1], M = s[2], d = s[3];

  Var<S> agreement;  // [n, N, M], accumulated v . u_hat terms
  Var<S> coupling, capsules;
  for (std::int64_t t = 1; t <= iterations; ++t) {
    Var<S> logits = (t == 1) ? tape.constant(Tensor<S>::zeros({n, N, M}))
                             : agreement;
    coupling = softmax_axis(logits, 2);
    Var<S> weighted = mul(reshape(coupling, {n, N, M, 1}), v4);
    Var<S> pre = sum_axis(weighted, 1);  // [n, M, d]
    capsules = squash(pre);
    if (t < iterations) {
      Var<S> agree = sum_axis(mul(reshape(capsules, {n, 1, M, d}), v4), 3);
      agreement = (t == 1) ? agree : add(agreement, agree);
    }
  }
  if (counter) counter->fetch_add(1, std::memory_order_relaxed);
  if (!batched) {
    capsules = reshape(capsules, {M, d});
    coupling = reshape(coupling, {N, M});
  }
  return {capsules, coupling};
}

constexpr double kLengthFloor = 1e-12;  // keeps log finite for dead capsules

// Log of capsule lengths: the logit vector attacked through routing.
template <typename S>
Var<S> caps_logits(Var<S> capsules) {
  Var<S> len = l2_norm_axis(capsules, -1);
  return log_op(clamp_min(len, static_cast<S>(kLengthFloor)));
}

enum class VoteHead { average_then_squash, squash_then_average };

// Routing-free logits computed straight from the votes.
template <typename S>
Var<S> vote_logits(Var<S> votes, VoteHead head) {
  const std::size_t r = votes.value().rank();
  if (r != 3 && r != 4) throw ConfigError("votes must be rank 3 or 4");
  const int vote_axis = r == 4 ? 1 : 0;
  Var<S> agg;
  if (head == VoteHead::average_then_squash) {
    agg = squash(mean_axis(votes, vote_axis));
  } else {
    agg = mean_axis(squash(votes), vote_axis);
  }
  Var<S> len = l2_norm_axis(agg, -1);
  return log_op(clamp_min(len, static_cast<S>(kLengthFloor)));
}

// Mean over voters of the cross-entropy each individual squashed vote incurs.
template <typename S>
Var<S> per_vote_losses(Var<S> votes, const std::vector<int>& labels) {
  Tape<S>& t = *votes.tape;
  Var<S> v4 = votes;
  if (votes.value().rank() == 3) {
    Shape s = votes.value().shape();
    v4 = reshape(votes, {1, s[0], s[1], s[2]});
  }
  const Shape& s = v4.value().shape();
  const std::int64_t n = s[0], N = s[1], M = s[2];
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw ShapeError("per_vote_losses: labels do not match batch");
  Var<S> len = l2_norm_axis(squash(v4), -1);                 // [n, N, M]
  Var<S> logit = log_op(clamp_min(len, static_cast<S>(kLengthFloor)));
  Var<S> ls = log_softmax_axis(logit, 2);
  Tensor<S> mask3 = one_hot<S>(labels, M).reshaped({n, 1, M});
  Var<S> picked = mul(ls, t.constant(mask3));
  return scale(sum_all(picked), S(-1) / static_cast<S>(n * N));
}

// ---------------------------------------------------------------------------
// CNN baselines: shared backbone, one fully connected activation bank of
// width M*d_out. cnn_cr groups activations per class and sums them into
// logits; cnn_r adds a linear classifier head instead.
// ---------------------------------------------------------------------------

template <typename S>
Var<S> cnn_activations(const BoundModel<S>& bm, Var<S> x) {
  const auto& cfg = bm.cfg();
  Var<S> f = backbone_features(bm, x);
  const std::int64_t n = f.value().shape()[0];
  Var<S> flat = reshape(f, {n, cfg.feature_count()});
  Var<S> a = add(matmul(flat, bm["fc.weight"]), bm["fc.bias"]);
  return relu(a);
}

template <typename S>
Var<S> cnn_logits(const BoundModel<S>& bm, Var<S> activations) {
  const auto& cfg = bm.cfg();
  const std::int64_t n = activations.value().shape()[0];
  if (cfg.kind == ModelKind::cnn_cr) {
    Var<S> grouped = reshape(activations, {n, cfg.num_classes, cfg.out_dim});
    return sum_axis(grouped, 2);
  }
  return add(matmul(activations, bm["cls.weight"]), bm["cls.bias"]);
}

// ---------------------------------------------------------------------------
// Full forward pass for evaluation (parameters bound as constants).
// ---------------------------------------------------------------------------

template <typename S>
struct ForwardInfo {
  std::vector<int> predictions;
  Tensor<S> class_scores;  // capsule lengths or CNN logits, [n, M]
  Tensor<S> capsules;      // [n, M, d_out]; capsnet only
  Tensor<S> votes;         // [n, N, M, d_out]; capsnet only
  Tensor<S> coupling;      // [n, N, M]; capsnet only
  Tensor<S> activations;   // [n, M*d_out]; cnn kinds only
};

template <typename S>
int argmax_lowest(const S* row, std::int64_t m) {
  int best = 0;
  for (std::int64_t j = 1; j < m; ++j)
    if (row[j] > row[best]) best = static_cast<int>(j);
  return best;
}

template <typename S>
ForwardInfo<S> forward_predict(const Model<S>& model, const Tensor<S>& images) {
  Tape<S> tape;
  BoundModel<S> bm = bind(tape, model, false);
  Var<S> x = tape.constant(images);
  ForwardInfo<S> info;
  const std::int64_t n = images.shape()[0];
  const std::int64_t M = model.cfg.num_classes;
  if (model.cfg.kind == ModelKind::capsnet) {
    Var<S> u = extract_primary(bm, x);
    Var<S> votes = compute_votes(bm, u);
    auto routed = dynamic_routing(tape, votes, model.cfg.routing_iters,
                                  model.routing_runs.get());
    info.capsules = routed.capsules.value();
    info.votes = votes.value();
    info.coupling = routed.coupling.value();
    info.class_scores = l2_norm_axis(routed.capsules, -1).value();
  } else {
    Var<S> acts = cnn_activations(bm, x);
    info.activations = acts.value();
    info.class_scores = cnn_logits(bm, acts).value();
  }
  info.predictions.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    info.predictions[static_cast<std::size_t>(i)] =
        argmax_lowest(info.class_scores.data() + i * M, M);
  return info;
}

// Margin loss over capsule lengths; keeps lengths calibrated for detection.
template <typename S>
Var<S> margin_loss(Var<S> lengths, const std::vector<int>& labels,
                   S m_plus = S(0.9), S m_minus = S(0.1), S lambda = S(0.5)) {
  Tape<S>& t = *lengths.tape;
  const Shape s = lengths.value().shape();  // copy: emits may grow the tape
  if (s.size() != 2 || s[0] != static_cast<std::int64_t>(labels.size()))
    throw ShapeError("margin_loss expects [n, M] lengths");
  Var<S> pos = square(relu(add_scalar(neg(lengths), m_plus)));
  Var<S> negv = square(relu(add_scalar(lengths, -m_minus)));
  Tensor<S> mask = one_hot<S>(labels, s[1]);
  Tensor<S> inv_mask(mask.shape());
  for (std::int64_t i = 0; i < mask.numel(); ++i) inv_mask[i] = S(1) - mask[i];
  Var<S> total = add(mul(pos, t.constant(mask)),
                     scale(mul(negv, t.constant(inv_mask)), lambda));
  return scale(sum_all(total), S(1) / static_cast<S>(labels.size()));
}

}  // namespace caps
