#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "caps/errors.hpp"

namespace caps {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Row-major strides; size-1 and trailing handling is the caller's business.
inline Shape row_major_strides(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::int64_t i = static_cast<std::int64_t>(s.size()) - 2; i >= 0; --i)
    st[static_cast<std::size_t>(i)] =
        st[static_cast<std::size_t>(i + 1)] * s[static_cast<std::size_t>(i + 1)];
  return st;
}

// Trailing-dimension broadcast: shapes are aligned at the right; each pair of
// dimensions must match or one of them must be 1 (missing dims count as 1).
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t ra = a.size(), rb = b.size();
  const std::size_t r = ra > rb ? ra : rb;
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t da = i < ra ? a[ra - 1 - i] : 1;
    const std::int64_t db = i < rb ? b[rb - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError("shapes not broadcastable: " + shape_str(a) + " vs " +
                       shape_str(b));
    out[r - 1 - i] = da > db ? da : db;
  }
  return out;
}

// Dense row-major tensor of Scalar. All layout decisions (flat storage,
// trailing broadcast) live here; math on tensors lives in ops.hpp.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(static_cast<std::size_t>(shape_numel(shape_)), Scalar(0)) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
      throw ShapeError("data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), Scalar(1)); }

  static Tensor scalar(Scalar v) { return Tensor({}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  std::int64_t dim(std::size_t i) const { return shape_[i]; }
  bool empty() const { return data_.empty() && shape_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::vector<Scalar>& vec() { return data_; }
  const std::vector<Scalar>& vec() const { return data_; }

  Scalar& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  Scalar& at(std::initializer_list<std::int64_t> idx) {
    return data_[static_cast<std::size_t>(flat_index(idx))];
  }
  Scalar at(std::initializer_list<std::int64_t> idx) const {
    return data_[static_cast<std::size_t>(flat_index(idx))];
  }

  // Same storage, new shape; element count must match.
  Tensor reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " +
                       shape_str(new_shape) + " changes element count");
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> t;
    t.mutable_shape() = shape_;
    t.vec().resize(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i)
      t.vec()[i] = static_cast<Other>(data_[i]);
    return t;
  }

  Shape& mutable_shape() { return shape_; }

 private:
  std::int64_t flat_index(std::initializer_list<std::int64_t> idx) const {
    std::int64_t off = 0, stride = 1;
    std::size_t k = shape_.size();
    std::int64_t offs[8];
    std::size_t n = 0;
    for (auto v : idx) offs[n++] = v;
    for (std::size_t i = k; i-- > 0;) {
      off += offs[i] * stride;
      stride *= shape_[i];
    }
    return off;
  }

  void check_shape() const {
    for (auto d : shape_)
      if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

// Iterates the flat indices of `out`, `a`, `b` for a trailing-broadcast
// binary op. Fast path when the shapes match exactly.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, Fn&& fn) {
  const std::int64_t n = shape_numel(out);
  if (a == b) {
    for (std::int64_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const std::size_t r = out.size();
  const Shape ost = row_major_strides(out);
  // Strides of a and b in out-coordinates; 0 where broadcast.
  Shape sa(r, 0), sb(r, 0);
  const Shape ast = row_major_strides(a), bst = row_major_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t oi = r - 1 - i;
    if (i < a.size() && a[a.size() - 1 - i] != 1) sa[oi] = ast[a.size() - 1 - i];
    if (i < b.size() && b[b.size() - 1 - i] != 1) sb[oi] = bst[b.size() - 1 - i];
  }
  std::vector<std::int64_t> coord(r, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      coord[d]++;
      ia += sa[d];
      ib += sb[d];
      if (coord[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      coord[d] = 0;
    }
  }
}

}  // namespace caps
