#pragma once

#include <cmath>

#include "caps/ops.hpp"

namespace caps {

// Central-difference check of reverse-mode gradients. `f` maps (tape, x) to a
// scalar variable and is re-traced per evaluation; runs in double precision.
// Returns max over coordinates of |analytic - fd| / max(1, |analytic|).
template <typename F>
double grad_check(F&& f, const Tensor<double>& x0, double h = 1e-5) {
  Tape<double> tape;
  Var<double> x = tape.leaf(x0, true);
  Var<double> y = f(tape, x);
  if (y.value().numel() != 1)
    throw ContractError("grad_check: f must be scalar-valued");
  tape.backward(y);
  Tensor<double> g = x.grad();
  if (g.numel() == 0) g = Tensor<double>::zeros(x0.shape());

  const auto eval = [&](const Tensor<double>& xt) {
    Tape<double> t;
    return f(t, t.leaf(xt, false)).value()[0];
  };

  double max_err = 0.0;
  Tensor<double> xp = x0;
  for (std::int64_t i = 0; i < x0.numel(); ++i) {
    xp[i] = x0[i] + h;
    const double fp = eval(xp);
    xp[i] = x0[i] - h;
    const double fm = eval(xp);
    xp[i] = x0[i];
    const double fd = (fp - fm) / (2.0 * h);
    const double err = std::abs(g[i] - fd) / std::max(1.0, std::abs(g[i]));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace caps
