#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "caps/capsnet.hpp"

// Class-conditional reconstruction, the reconstruction-error detector, and
// its threshold calibration.

namespace caps {

struct DetectionThreshold {
  double theta = 0.0;
  double calibration_percentile = 0.95;
};

// Fully connected decoder: hidden layers relu, final layer sigmoid into pixel
// space.
template <typename S>
Var<S> recon_forward(const BoundModel<S>& bm, Var<S> input) {
  const auto& cfg = bm.cfg();
  Var<S> h = input;
  for (std::size_t i = 0; i <= cfg.recon_hidden.size(); ++i) {
    h = add(matmul(h, bm["recon.fc" + std::to_string(i) + ".weight"]),
            bm["recon.fc" + std::to_string(i) + ".bias"]);
    h = (i < cfg.recon_hidden.size()) ? relu(h) : sigmoid(h);
  }
  return h;
}

// Decoder input for the capsule model: all capsules except the selected class
// zeroed, then flattened. Train time selects ground truth, test time the
// winning capsule.
template <typename S>
Var<S> reconstruct_masked(const BoundModel<S>& bm, Var<S> capsules,
                          const std::vector<int>& classes) {
  Tape<S>& t = *bm.tape;
  const Shape& s = capsules.value().shape();
  const bool batched = s.size() == 3;
  if (!batched && s.size() != 2)
    throw ShapeError("capsules must be [n, M, d] or [M, d]");
  Var<S> caps3 = batched ? capsules : reshape(capsules, {1, s[0], s[1]});
  const std::int64_t n = caps3.value().shape()[0];
  const std::int64_t M = caps3.value().shape()[1];
  const std::int64_t d = caps3.value().shape()[2];
  if (static_cast<std::int64_t>(classes.size()) != n)
    throw ShapeError("one selected class per example required");
  for (int k : classes)
    if (k < 0 || k >= M)
      throw IndexError("class " + std::to_string(k) + " out of [0, " +
                       std::to_string(M) + ")");
  Tensor<S> mask = one_hot<S>(classes, M).reshaped({n, M, 1});
  Var<S> masked = mul(caps3, t.constant(mask));
  Var<S> flat = reshape(masked, {n, M * d});
  Var<S> out = recon_forward(bm, flat);
  return batched ? out : reshape(out, {out.value().shape()[1]});
}

// Reconstruction input for the CNN baselines: cnn_cr masks activation groups
// like capsules, cnn_r feeds all activations through unmasked.
template <typename S>
Var<S> reconstruct_cnn(const BoundModel<S>& bm, Var<S> activations,
                       const std::vector<int>& classes) {
  const auto& cfg = bm.cfg();
  if (cfg.kind == ModelKind::cnn_r) return recon_forward(bm, activations);
  const std::int64_t n = activations.value().shape()[0];
  Var<S> grouped =
      reshape(activations, {n, cfg.num_classes, cfg.out_dim});
  return reconstruct_masked(bm, grouped, classes);
}

// Euclidean pixel distance between two same-shape images (any rank).
template <typename S>
S reconstruction_error(const Tensor<S>& x, const Tensor<S>& xhat) {
  if (x.shape() != xhat.shape())
    throw ShapeError("reconstruction_error shape mismatch: " +
                     shape_str(x.shape()) + " vs " + shape_str(xhat.shape()));
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(xhat[i]);
    acc += d * d;
  }
  return static_cast<S>(std::sqrt(acc));
}

// Differentiable counterpart over flattened pixels, per example: [n].
template <typename S>
Var<S> reconstruction_error_var(Var<S> x_flat, Var<S> xhat_flat) {
  if (x_flat.value().shape() != xhat_flat.value().shape())
    throw ShapeError("reconstruction_error shape mismatch");
  return l2_norm_axis(sub(xhat_flat, x_flat), -1);
}

// Nearest-rank percentile of benign validation reconstruction errors:
// theta = sorted(errors)[ceil(p * n) - 1].
inline DetectionThreshold calibrate_threshold(std::vector<double> errors,
                                              double percentile = 0.95) {
  if (errors.empty())
    throw CalibrationError("cannot calibrate threshold from empty error list");
  std::sort(errors.begin(), errors.end());
  const std::size_t n = errors.size();
  std::size_t rank = static_cast<std::size_t>(
      std::ceil(percentile * static_cast<double>(n)));
  if (rank == 0) rank = 1;
  if (rank > n) rank = n;
  return {errors[rank - 1], percentile};
}

template <typename S>
struct DetectionVerdict {
  int prediction = 0;
  bool flagged = false;
  double error = 0.0;
};

// Forward pass internals needed to reconstruct from the winning class.
template <typename S>
Tensor<S> reconstruct_winning(const Model<S>& model, const Tensor<S>& images,
                              const ForwardInfo<S>& info) {
  Tape<S> tape;
  BoundModel<S> bm = bind(tape, model, false);
  if (model.cfg.kind == ModelKind::capsnet) {
    Var<S> caps = tape.constant(info.capsules);
    return reconstruct_masked(bm, caps, info.predictions).value();
  }
  Var<S> acts = tape.constant(info.activations);
  return reconstruct_cnn(bm, acts, info.predictions).value();
}

// Inputs whose winning-class reconstruction misses by more than theta are
// flagged (strictly greater).
template <typename S>
std::vector<DetectionVerdict<S>> detect(const Model<S>& model,
                                        const Tensor<S>& images,
                                        const DetectionThreshold& threshold) {
  const ForwardInfo<S> info = forward_predict(model, images);
  const Tensor<S> recon = reconstruct_winning(model, images, info);
  const std::int64_t n = images.shape()[0];
  const std::int64_t pix = model.cfg.pixels();
  const Tensor<S> flat = images.reshaped({n, pix});
  std::vector<DetectionVerdict<S>> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    Tensor<S> xi({pix});
    Tensor<S> ri({pix});
    for (std::int64_t p = 0; p < pix; ++p) {
      xi[p] = flat[i * pix + p];
      ri[p] = recon[i * pix + p];
    }
    auto& v = out[static_cast<std::size_t>(i)];
    v.prediction = info.predictions[static_cast<std::size_t>(i)];
    v.error = static_cast<double>(reconstruction_error(xi, ri));
    v.flagged = v.error > threshold.theta;
  }
  return out;
}

// Benign reconstruction errors of a batch, reconstructing from the winning
// class (calibration input).
template <typename S>
std::vector<double> reconstruction_errors(const Model<S>& model,
                                          const Tensor<S>& images) {
  const ForwardInfo<S> info = forward_predict(model, images);
  const Tensor<S> recon = reconstruct_winning(model, images, info);
  const std::int64_t n = images.shape()[0];
  const std::int64_t pix = model.cfg.pixels();
  std::vector<double> errs(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::int64_t p = 0; p < pix; ++p) {
      const double d = static_cast<double>(images[i * pix + p]) -
                       static_cast<double>(recon[i * pix + p]);
      acc += d * d;
    }
    errs[static_cast<std::size_t>(i)] = std::sqrt(acc);
  }
  return errs;
}

}  // namespace caps
