#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "caps/tape.hpp"
#include "caps/tensor.hpp"

// Differentiable operations over tape variables, as expression-friendly free
// functions. Forward values are computed eagerly; each emitted node carries
// the closure that pulls adjoints back to its parents.

namespace caps {

namespace detail {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
void check_same_tape(const Var<S>& a, const Var<S>& b) {
  if (a.tape != b.tape || a.tape == nullptr)
    throw ContractError("operands must live on the same tape");
}

inline int normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r)
    throw ShapeError("axis " + std::to_string(axis) + " invalid for rank " +
                     std::to_string(r));
  return a;
}

// Collapses a shape around `axis` into (outer, len, inner) so lanes along the
// axis can be walked with index (o*len + j)*inner + i.
struct AxisSplit {
  std::int64_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit sp;
  for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<std::size_t>(i)];
  sp.len = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i)
    sp.inner *= s[i];
  return sp;
}

template <typename S>
Tensor<S> permute_tensor(const Tensor<S>& x, const std::vector<int>& perm) {
  const std::size_t r = x.rank();
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = x.shape()[static_cast<std::size_t>(perm[i])];
  Tensor<S> out(os);
  const Shape ost = row_major_strides(os);
  // stride of input dim d inside the output layout
  std::vector<std::int64_t> dim_stride(r, 0);
  for (std::size_t i = 0; i < r; ++i) dim_stride[static_cast<std::size_t>(perm[i])] = ost[i];
  std::vector<std::int64_t> coord(r, 0);
  const S* in = x.data();
  S* o = out.data();
  const std::int64_t n = x.numel();
  std::int64_t off = 0;
  for (std::int64_t idx = 0; idx < n; ++idx) {
    o[off] = in[idx];
    for (std::size_t d = r; d-- > 0;) {
      coord[d]++;
      off += dim_stride[d];
      if (coord[d] < x.shape()[d]) break;
      off -= dim_stride[d] * x.shape()[d];
      coord[d] = 0;
    }
  }
  return out;
}

// Generic elementwise binary op with trailing broadcast. dfa/dfb produce the
// per-element contributions to the parents' adjoints.
template <typename S, typename F, typename DfA, typename DfB>
Var<S> ew_binary(OpKind kind, Var<S> a, Var<S> b, F f, DfA dfa, DfB dfb) {
  check_same_tape(a, b);
  Tape<S>& t = *a.tape;
  const Tensor<S>& av = a.value();
  const Tensor<S>& bv = b.value();
  const Shape os = broadcast_shape(av.shape(), bv.shape());
  Tensor<S> out(os);
  S* o = out.data();
  const S* ap = av.data();
  const S* bp = bv.data();
  for_each_broadcast(os, av.shape(), bv.shape(),
                     [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
                       o[io] = f(ap[ia], bp[ib]);
                     });
  const auto aid = a.id, bid = b.id;
  return t.emit(kind, std::move(out), {aid, bid},
                [aid, bid, os, dfa, dfb](Tape<S>& tp, std::int32_t,
                                         const Tensor<S>& gy,
                                         std::vector<Tensor<S>>& adj) {
                  const Tensor<S>& A = tp.node(aid).value;
                  const Tensor<S>& B = tp.node(bid).value;
                  S* ga = tp.wants_grad(aid) ? tp.adjoint_slot(adj, aid).data() : nullptr;
                  S* gb = tp.wants_grad(bid) ? tp.adjoint_slot(adj, bid).data() : nullptr;
                  const S* g = gy.data();
                  const S* ap2 = A.data();
                  const S* bp2 = B.data();
                  for_each_broadcast(
                      os, A.shape(), B.shape(),
                      [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
                        if (ga) ga[ia] += dfa(g[io], ap2[ia], bp2[ib]);
                        if (gb) gb[ib] += dfb(g[io], ap2[ia], bp2[ib]);
                      });
                });
}

// Elementwise unary. df(g, x, y) yields the input adjoint contribution.
template <typename S, typename F, typename Df>
Var<S> ew_unary(OpKind kind, Var<S> x, F f, Df df) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  Tensor<S> out(xv.shape());
  S* o = out.data();
  const S* ip = xv.data();
  for (std::int64_t i = 0; i < xv.numel(); ++i) o[i] = f(ip[i]);
  const auto xid = x.id;
  return t.emit(kind, std::move(out), {xid},
                [xid, df](Tape<S>& tp, std::int32_t self, const Tensor<S>& gy,
                          std::vector<Tensor<S>>& adj) {
                  if (!tp.wants_grad(xid)) return;
                  const Tensor<S>& X = tp.node(xid).value;
                  const Tensor<S>& Y = tp.node(self).value;
                  S* gx = tp.adjoint_slot(adj, xid).data();
                  const S* g = gy.data();
                  const S* xp = X.data();
                  const S* yp = Y.data();
                  for (std::int64_t i = 0; i < X.numel(); ++i)
                    gx[i] += df(g[i], xp[i], yp[i]);
                });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise family
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  return detail::ew_binary(
      OpKind::Add, a, b, [](S x, S y) { return x + y; },
      [](S g, S, S) { return g; }, [](S g, S, S) { return g; });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  return detail::ew_binary(
      OpKind::Sub, a, b, [](S x, S y) { return x - y; },
      [](S g, S, S) { return g; }, [](S g, S, S) { return -g; });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  return detail::ew_binary(
      OpKind::Mul, a, b, [](S x, S y) { return x * y; },
      [](S g, S, S y) { return g * y; }, [](S g, S x, S) { return g * x; });
}

template <typename S>
Var<S> divide(Var<S> a, Var<S> b) {
  return detail::ew_binary(
      OpKind::Div, a, b, [](S x, S y) { return x / y; },
      [](S g, S, S y) { return g / y; },
      [](S g, S x, S y) { return -g * x / (y * y); });
}

template <typename S>
Var<S> neg(Var<S> x) {
  return detail::ew_unary(
      OpKind::Neg, x, [](S v) { return -v; }, [](S g, S, S) { return -g; });
}

template <typename S>
Var<S> relu(Var<S> x) {
  return detail::ew_unary(
      OpKind::Relu, x, [](S v) { return v > S(0) ? v : S(0); },
      [](S g, S v, S) { return v > S(0) ? g : S(0); });
}

template <typename S>
Var<S> sigmoid(Var<S> x) {
  return detail::ew_unary(
      OpKind::Sigmoid, x,
      [](S v) {
        // split on sign to avoid overflowing exp
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S g, S, S y) { return g * y * (S(1) - y); });
}

template <typename S>
Var<S> log_op(Var<S> x) {
  const Tensor<S>& xv = x.value();
  for (std::int64_t i = 0; i < xv.numel(); ++i)
    if (!(xv[i] > S(0)))
      throw std::domain_error("log of non-positive value " + std::to_string(xv[i]));
  return detail::ew_unary(
      OpKind::Log, x, [](S v) { return std::log(v); },
      [](S g, S v, S) { return g / v; });
}

template <typename S>
Var<S> exp_op(Var<S> x) {
  return detail::ew_unary(
      OpKind::Exp, x, [](S v) { return std::exp(v); },
      [](S g, S, S y) { return g * y; });
}

template <typename S>
Var<S> scale(Var<S> x, S c) {
  return detail::ew_unary(
      OpKind::Scale, x, [c](S v) { return v * c; },
      [c](S g, S, S) { return g * c; });
}

template <typename S>
Var<S> add_scalar(Var<S> x, S c) {
  return detail::ew_unary(
      OpKind::AddScalar, x, [c](S v) { return v + c; },
      [](S g, S, S) { return g; });
}

// max(x, c); gradient passes where x >= c.
template <typename S>
Var<S> clamp_min(Var<S> x, S c) {
  return detail::ew_unary(
      OpKind::ClampMin, x, [c](S v) { return v < c ? c : v; },
      [c](S g, S v, S) { return v >= c ? g : S(0); });
}

template <typename S>
Var<S> square(Var<S> x) {
  return mul(x, x);
}

// ---------------------------------------------------------------------------
// Matrix product: a[..., m, k] * b[..., k, n]; leading dims broadcast.
// ---------------------------------------------------------------------------

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  Tape<S>& t = *a.tape;
  const Tensor<S>& av = a.value();
  const Tensor<S>& bv = b.value();
  if (av.rank() < 2 || bv.rank() < 2)
    throw ShapeError("matmul operands must have rank >= 2");
  const std::int64_t m = av.shape()[av.rank() - 2];
  const std::int64_t k = av.shape()[av.rank() - 1];
  const std::int64_t k2 = bv.shape()[bv.rank() - 2];
  const std::int64_t n = bv.shape()[bv.rank() - 1];
  if (k != k2)
    throw ShapeError("matmul inner dimensions differ: " + shape_str(av.shape()) +
                     " vs " + shape_str(bv.shape()));
  const Shape batch_a(av.shape().begin(), av.shape().end() - 2);
  const Shape batch_b(bv.shape().begin(), bv.shape().end() - 2);
  const Shape batch = broadcast_shape(batch_a, batch_b);
  Shape os = batch;
  os.push_back(m);
  os.push_back(n);
  Tensor<S> out(os);

  using Mat = detail::RowMat<S>;
  const std::int64_t sa = m * k, sb = k * n, so = m * n;
  for_each_broadcast(batch, batch_a, batch_b,
                     [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
                       Eigen::Map<const Mat> A(av.data() + ia * sa, m, k);
                       Eigen::Map<const Mat> B(bv.data() + ib * sb, k, n);
                       Eigen::Map<Mat> O(out.data() + io * so, m, n);
                       O.noalias() = A * B;
                     });

  const auto aid = a.id, bid = b.id;
  return t.emit(
      OpKind::Matmul, std::move(out), {aid, bid},
      [aid, bid, batch, batch_a, batch_b, m, k, n, sa, sb, so](
          Tape<S>& tp, std::int32_t, const Tensor<S>& gy,
          std::vector<Tensor<S>>& adj) {
        const Tensor<S>& A = tp.node(aid).value;
        const Tensor<S>& B = tp.node(bid).value;
        Tensor<S>* ga = tp.wants_grad(aid) ? &tp.adjoint_slot(adj, aid) : nullptr;
        Tensor<S>* gb = tp.wants_grad(bid) ? &tp.adjoint_slot(adj, bid) : nullptr;
        using Mat = detail::RowMat<S>;
        for_each_broadcast(
            batch, batch_a, batch_b,
            [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
              Eigen::Map<const Mat> G(gy.data() + io * so, m, n);
              if (ga) {
                Eigen::Map<const Mat> Bm(B.data() + ib * sb, k, n);
                Eigen::Map<Mat> GA(ga->data() + ia * sa, m, k);
                GA.noalias() += G * Bm.transpose();
              }
              if (gb) {
                Eigen::Map<const Mat> Am(A.data() + ia * sa, m, k);
                Eigen::Map<Mat> GB(gb->data() + ib * sb, k, n);
                GB.noalias() += Am.transpose() * G;
              }
            });
      });
}

// ---------------------------------------------------------------------------
// Valid (no padding) 2-D cross-correlation.
// x: [cin, h, w] or [n, cin, h, w]; kernels: [cout, cin, kh, kw].
// Lowered to a GEMM over unfolded patches per image.
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
  std::int64_t nb, cin, h, w, cout, kh, kw, oh, ow, stride;
};

// patches: [cin*kh*kw, oh*ow] for one image.
template <typename S>
void im2col(const S* x, const ConvDims& d, S* col) {
  std::int64_t r = 0;
  for (std::int64_t ci = 0; ci < d.cin; ++ci)
    for (std::int64_t ky = 0; ky < d.kh; ++ky)
      for (std::int64_t kx = 0; kx < d.kw; ++kx, ++r) {
        S* dst = col + r * d.oh * d.ow;
        for (std::int64_t oy = 0; oy < d.oh; ++oy) {
          const S* src = x + (ci * d.h + oy * d.stride + ky) * d.w + kx;
          for (std::int64_t ox = 0; ox < d.ow; ++ox)
            dst[oy * d.ow + ox] = src[ox * d.stride];
        }
      }
}

// Scatter-add of column gradients back to image layout.
template <typename S>
void col2im_add(const S* col, const ConvDims& d, S* gx) {
  std::int64_t r = 0;
  for (std::int64_t ci = 0; ci < d.cin; ++ci)
    for (std::int64_t ky = 0; ky < d.kh; ++ky)
      for (std::int64_t kx = 0; kx < d.kw; ++kx, ++r) {
        const S* src = col + r * d.oh * d.ow;
        for (std::int64_t oy = 0; oy < d.oh; ++oy) {
          S* dst = gx + (ci * d.h + oy * d.stride + ky) * d.w + kx;
          for (std::int64_t ox = 0; ox < d.ow; ++ox)
            dst[ox * d.stride] += src[oy * d.ow + ox];
        }
      }
}

}  // namespace detail

template <typename S>
Var<S> conv2d(Var<S> x, Var<S> kernels, std::int64_t stride) {
  detail::check_same_tape(x, kernels);
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  const Tensor<S>& kv = kernels.value();
  if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
  if (kv.rank() != 4) throw ShapeError("conv2d kernels must be rank 4");
  const bool batched = xv.rank() == 4;
  if (!batched && xv.rank() != 3)
    throw ShapeError("conv2d input must be rank 3 or 4");
  detail::ConvDims d;
  d.nb = batched ? xv.shape()[0] : 1;
  d.cin = xv.shape()[batched ? 1 : 0];
  d.h = xv.shape()[batched ? 2 : 1];
  d.w = xv.shape()[batched ? 3 : 2];
  d.cout = kv.shape()[0];
  d.kh = kv.shape()[2];
  d.kw = kv.shape()[3];
  d.stride = stride;
  if (kv.shape()[1] != d.cin)
    throw ShapeError("conv2d channel mismatch: input " + std::to_string(d.cin) +
                     " vs kernel " + std::to_string(kv.shape()[1]));
  if (d.kh > d.h || d.kw > d.w)
    throw ShapeError("conv2d kernel " + std::to_string(d.kh) + "x" +
                     std::to_string(d.kw) + " larger than input " +
                     std::to_string(d.h) + "x" + std::to_string(d.w));
  d.oh = (d.h - d.kh) / stride + 1;
  d.ow = (d.w - d.kw) / stride + 1;
  Shape os = batched ? Shape{d.nb, d.cout, d.oh, d.ow}
                     : Shape{d.cout, d.oh, d.ow};
  Tensor<S> out(os);

  using Mat = detail::RowMat<S>;
  const std::int64_t patch = d.cin * d.kh * d.kw;
  const std::int64_t cells = d.oh * d.ow;
  Tensor<S> col({patch, cells});
  Eigen::Map<const Mat> K(kv.data(), d.cout, patch);
  for (std::int64_t b = 0; b < d.nb; ++b) {
    detail::im2col(xv.data() + b * d.cin * d.h * d.w, d, col.data());
    Eigen::Map<const Mat> C(col.data(), patch, cells);
    Eigen::Map<Mat> O(out.data() + b * d.cout * cells, d.cout, cells);
    O.noalias() = K * C;
  }

  const auto xid = x.id, kid = kernels.id;
  return t.emit(
      OpKind::Conv2d, std::move(out), {xid, kid},
      [xid, kid, d](Tape<S>& tp, std::int32_t, const Tensor<S>& gy,
                    std::vector<Tensor<S>>& adj) {
        const Tensor<S>& X = tp.node(xid).value;
        const Tensor<S>& K = tp.node(kid).value;
        const bool want_x = tp.wants_grad(xid);
        const bool want_k = tp.wants_grad(kid);
        S* gx = want_x ? tp.adjoint_slot(adj, xid).data() : nullptr;
        S* gk = want_k ? tp.adjoint_slot(adj, kid).data() : nullptr;
        using Mat = detail::RowMat<S>;
        const std::int64_t patch = d.cin * d.kh * d.kw;
        const std::int64_t cells = d.oh * d.ow;
        Tensor<S> col({patch, cells});
        Eigen::Map<const Mat> Km(K.data(), d.cout, patch);
        for (std::int64_t b = 0; b < d.nb; ++b) {
          Eigen::Map<const Mat> G(gy.data() + b * d.cout * cells, d.cout, cells);
          if (want_k) {
            detail::im2col(X.data() + b * d.cin * d.h * d.w, d, col.data());
            Eigen::Map<const Mat> C(col.data(), patch, cells);
            Eigen::Map<Mat> GK(gk, d.cout, patch);
            GK.noalias() += G * C.transpose();
          }
          if (want_x) {
            Eigen::Map<Mat> GC(col.data(), patch, cells);
            GC.noalias() = Km.transpose() * G;
            detail::col2im_add(col.data(), d, gx + b * d.cin * d.h * d.w);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Axis reductions and normalizations
// ---------------------------------------------------------------------------

template <typename S>
Var<S> softmax_axis(Var<S> x, int axis) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  const int ax = detail::normalize_axis(axis, xv.rank());
  const detail::AxisSplit sp = detail::split_axis(xv.shape(), ax);
  Tensor<S> out(xv.shape());
  const S* ip = xv.data();
  S* op = out.data();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      const std::int64_t base = o * sp.len * sp.inner + i;
      S mx = ip[base];
      for (std::int64_t j = 1; j < sp.len; ++j)
        mx = std::max(mx, ip[base + j * sp.inner]);
      S sum = S(0);
      for (std::int64_t j = 0; j < sp.len; ++j) {
        const S e = std::exp(ip[base + j * sp.inner] - mx);
        op[base + j * sp.inner] = e;
        sum += e;
      }
      for (std::int64_t j = 0; j < sp.len; ++j) op[base + j * sp.inner] /= sum;
    }
  const auto xid = x.id;
  return t.emit(OpKind::Softmax, std::move(out), {xid},
                [xid, sp](Tape<S>& tp, std::int32_t self, const Tensor<S>& gy,
                          std::vector<Tensor<S>>& adj) {
                  if (!tp.wants_grad(xid)) return;
                  const Tensor<S>& Y = tp.node(self).value;
                  S* gx = tp.adjoint_slot(adj, xid).data();
                  const S* g = gy.data();
                  const S* yp = Y.data();
                  for (std::int64_t o = 0; o < sp.outer; ++o)
                    for (std::int64_t i = 0; i < sp.inner; ++i) {
                      const std::int64_t base = o * sp.len * sp.inner + i;
                      S dot = S(0);
                      for (std::int64_t j = 0; j < sp.len; ++j) {
                        const std::int64_t idx = base + j * sp.inner;
                        dot += g[idx] * yp[idx];
                      }
                      for (std::int64_t j = 0; j < sp.len; ++j) {
                        const std::int64_t idx = base + j * sp.inner;
                        gx[idx] += yp[idx] * (g[idx] - dot);
                      }
                    }
                });
}

template <typename S>
Var<S> log_softmax_axis(Var<S> x, int axis) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  const int ax = detail::normalize_axis(axis, xv.rank());
  const detail::AxisSplit sp = detail::split_axis(xv.shape(), ax);
  Tensor<S> out(xv.shape());
  const S* ip = xv.data();
  S* op = out.data();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      const std::int64_t base = o * sp.len * sp.inner + i;
      S mx = ip[base];
      for (std::int64_t j = 1; j < sp.len; ++j)
        mx = std::max(mx, ip[base + j * sp.inner]);
      S sum = S(0);
      for (std::int64_t j = 0; j < sp.len; ++j)
        sum += std::exp(ip[base + j * sp.inner] - mx);
      const S lse = mx + std::log(sum);
      for (std::int64_t j = 0; j < sp.len; ++j)
        op[base + j * sp.inner] = ip[base + j * sp.inner] - lse;
    }
  const auto xid = x.id;
  return t.emit(OpKind::LogSoftmax, std::move(out), {xid},
                [xid, sp](Tape<S>& tp, std::int32_t self, const Tensor<S>& gy,
                          std::vector<Tensor<S>>& adj) {
                  if (!tp.wants_grad(xid)) return;
                  const Tensor<S>& Y = tp.node(self).value;
                  S* gx = tp.adjoint_slot(adj, xid).data();
                  const S* g = gy.data();
                  const S* yp = Y.data();
                  for (std::int64_t o = 0; o < sp.outer; ++o)
                    for (std::int64_t i = 0; i < sp.inner; ++i) {
                      const std::int64_t base = o * sp.len * sp.inner + i;
                      S gsum = S(0);
                      for (std::int64_t j = 0; j < sp.len; ++j)
                        gsum += g[base + j * sp.inner];
                      for (std::int64_t j = 0; j < sp.len; ++j) {
                        const std::int64_t idx = base + j * sp.inner;
                        gx[idx] += g[idx] - std::exp(yp[idx]) * gsum;
                      }
                    }
                });
}

// Euclidean norm along `axis` (axis removed from the output shape). The
// subgradient at a zero lane is defined as 0.
template <typename S>
Var<S> l2_norm_axis(Var<S> x, int axis) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  const int ax = detail::normalize_axis(axis, xv.rank());
  const detail::AxisSplit sp = detail::split_axis(xv.shape(), ax);
  Shape os;
  for (std::size_t i = 0; i < xv.rank(); ++i)
    if (static_cast<int>(i) != ax) os.push_back(xv.shape()[i]);
  Tensor<S> out(os);
  const S* ip = xv.data();
  S* op = out.data();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      S acc = S(0);
      for (std::int64_t j = 0; j < sp.len; ++j) {
        const S v = ip[(o * sp.len + j) * sp.inner + i];
        acc += v * v;
      }
      op[o * sp.inner + i] = std::sqrt(acc);
    }
  const auto xid = x.id;
  return t.emit(OpKind::L2Norm, std::move(out), {xid},
                [xid, sp](Tape<S>& tp, std::int32_t self, const Tensor<S>& gy,
                          std::vector<Tensor<S>>& adj) {
                  if (!tp.wants_grad(xid)) return;
                  const Tensor<S>& X = tp.node(xid).value;
                  const Tensor<S>& Y = tp.node(self).value;
                  S* gx = tp.adjoint_slot(adj, xid).data();
                  const S* g = gy.data();
                  const S* xp = X.data();
                  const S* yp = Y.data();
                  for (std::int64_t o = 0; o < sp.outer; ++o)
                    for (std::int64_t i = 0; i < sp.inner; ++i) {
                      const S norm = yp[o * sp.inner + i];
                      if (norm == S(0)) continue;
                      const S gl = g[o * sp.inner + i] / norm;
                      for (std::int64_t j = 0; j < sp.len; ++j) {
                        const std::int64_t idx = (o * sp.len + j) * sp.inner + i;
                        gx[idx] += gl * xp[idx];
                      }
                    }
                });
}

// Vector squashing along the last axis: s -> s * |s| / (1 + |s|^2), which
// scales the length to |s|^2/(1+|s|^2) in [0,1) while keeping the direction.
// The Jacobian limit at s = 0 is the zero matrix, used as the gradient there.
template <typename S>
Var<S> squash(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  if (xv.rank() < 1) throw ShapeError("squash requires rank >= 1");
  const std::int64_t d = xv.shape()[xv.rank() - 1];
  const std::int64_t lanes = xv.numel() / d;
  Tensor<S> out(xv.shape());
  const S* ip = xv.data();
  S* op = out.data();
  for (std::int64_t l = 0; l < lanes; ++l) {
    const S* s = ip + l * d;
    S* y = op + l * d;
    S n2 = S(0);
    for (std::int64_t j = 0; j < d; ++j) n2 += s[j] * s[j];
    const S n = std::sqrt(n2);
    const S factor = n / (S(1) + n2);
    for (std::int64_t j = 0; j < d; ++j) y[j] = s[j] * factor;
  }
  const auto xid = x.id;
  return t.emit(
      OpKind::Squash, std::move(out), {xid},
      [xid, d, lanes](Tape<S>& tp, std::int32_t, const Tensor<S>& gy,
                      std::vector<Tensor<S>>& adj) {
        if (!tp.wants_grad(xid)) return;
        const Tensor<S>& X = tp.node(xid).value;
        S* gx = tp.adjoint_slot(adj, xid).data();
        const S* g = gy.data();
        const S* xp = X.data();
        for (std::int64_t l = 0; l < lanes; ++l) {
          const S* s = xp + l * d;
          const S* gl = g + l * d;
          S* go = gx + l * d;
          S n2 = S(0), gdot = S(0);
          for (std::int64_t j = 0; j < d; ++j) {
            n2 += s[j] * s[j];
            gdot += gl[j] * s[j];
          }
          const S n = std::sqrt(n2);
          if (n == S(0)) continue;  // smooth extension: zero Jacobian
          const S h = n / (S(1) + n2);
          const S hp = (S(1) - n2) / ((S(1) + n2) * (S(1) + n2));
          const S coef = gdot * hp / n;
          for (std::int64_t j = 0; j < d; ++j) go[j] += gl[j] * h + coef * s[j];
        }
      });
}

template <typename S>
Var<S> sum_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  S acc = S(0);
  for (std::int64_t i = 0; i < xv.numel(); ++i) acc += xv[i];
  const auto xid = x.id;
  const std::int64_t n = xv.numel();
  return t.emit(OpKind::SumAll, Tensor<S>::scalar(acc), {xid},
                [xid, n](Tape<S>& tp, std::int32_t, const Tensor<S>& gy,
                         std::vector<Tensor<S>>& adj) {
                  if (!tp.wants_grad(xid)) return;
                  S* gx = tp.adjoint_slot(adj, xid).data();
                  const S g = gy[0];
                  for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
                });
}

template <typename S>
Var<S> sum_axis(Var<S> x, int axis, bool keepdim = false) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  const int ax = detail::normalize_axis(axis, xv.rank());
  const detail::AxisSplit sp = detail::split_axis(xv.shape(), ax);
  Shape os;
  for (std::size_t i = 0; i < xv.rank(); ++i) {
    if (static_cast<int>(i) == ax) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(xv.shape()[i]);
    }
  }
  Tensor<S> out(os);
  const S* ip = xv.data();
  S* op = out.data();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      S acc = S(0);
      for (std::int64_t j = 0; j < sp.len; ++j)
        acc += ip[(o * sp.len + j) * sp.inner + i];
      op[o * sp.inner + i] = acc;
    }
  const auto xid = x.id;
  return t.emit(OpKind::SumAxis, std::move(out), {xid},
                [xid, sp](Tape<S>& tp, std::int32_t, const Tensor<S>& gy,
                          std::vector<Tensor<S>>& adj) {
                  if (!tp.wants_grad(xid)) return;
                  S* gx = tp.adjoint_slot(adj, xid).data();
                  const S* g = gy.data();
                  for (std::int64_t o = 0; o < sp.outer; ++o)
                    for (std::int64_t i = 0; i < sp.inner; ++i) {
                      const S gv = g[o * sp.inner + i];
                      for (std::int64_t j = 0; j < sp.len; ++j)
                        gx[(o * sp.len + j) * sp.inner + i] += gv;
                    }
                });
}

template <typename S>
Var<S> mean_axis(Var<S> x, int axis, bool keepdim = false) {
  const int ax = detail::normalize_axis(axis, x.value().rank());
  const S inv = S(1) / static_cast<S>(x.value().shape()[static_cast<std::size_t>(ax)]);
  return scale(sum_axis(x, ax, keepdim), inv);
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename S>
Var<S> reshape(Var<S> x, Shape new_shape) {
  Tape<S>& t = *x.tape;
  Tensor<S> out = x.value().reshaped(new_shape);
  const auto xid = x.id;
  const Shape old = x.value().shape();
  return t.emit(OpKind::Reshape, std::move(out), {xid},
                [xid, old](Tape<S>& tp, std::int32_t, const Tensor<S>& gy,
                           std::vector<Tensor<S>>& adj) {
                  tp.deposit(adj, xid, gy.reshaped(old));
                });
}

template <typename S>
Var<S> permute(Var<S> x, std::vector<int> perm) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  if (perm.size() != xv.rank()) throw ShapeError("permute rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  for (int p : perm) {
    if (p < 0 || static_cast<std::size_t>(p) >= perm.size() || seen[static_cast<std::size_t>(p)])
      throw ShapeError("invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
  }
  Tensor<S> out = detail::permute_tensor(xv, perm);
  std::vector<int> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  const auto xid = x.id;
  return t.emit(OpKind::Permute, std::move(out), {xid},
                [xid, inv](Tape<S>& tp, std::int32_t, const Tensor<S>& gy,
                           std::vector<Tensor<S>>& adj) {
                  tp.deposit(adj, xid, detail::permute_tensor(gy, inv));
                });
}

// ---------------------------------------------------------------------------
// Composite helpers
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> one_hot(const std::vector<int>& labels, std::int64_t num_classes) {
  Tensor<S> t({static_cast<std::int64_t>(labels.size()), num_classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw IndexError("label " + std::to_string(labels[i]) + " out of range");
    t[static_cast<std::int64_t>(i) * num_classes + labels[i]] = S(1);
  }
  return t;
}

// Mean cross-entropy of softmax(logits) against integer labels.
template <typename S>
Var<S> cross_entropy_with_logits(Var<S> logits, const std::vector<int>& labels) {
  const Shape s = logits.value().shape();  // copy: emits may grow the tape
  if (s.size() != 2 || s[0] != static_cast<std::int64_t>(labels.size()))
    throw ShapeError("cross_entropy expects logits [n, classes] matching labels");
  Tape<S>& t = *logits.tape;
  Var<S> ls = log_softmax_axis(logits, 1);
  Var<S> mask = t.constant(one_hot<S>(labels, s[1]));
  Var<S> picked = mul(ls, mask);
  return scale(sum_all(picked), S(-1) / static_cast<S>(labels.size()));
}

}  // namespace caps
