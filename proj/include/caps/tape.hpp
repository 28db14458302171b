#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "caps/errors.hpp"
#include "caps/tensor.hpp"

namespace caps {

// Operation identity of a tape node, kept for graph inspection (e.g. asserting
// that a loss head never touched the class-wise softmax used by routing).
enum class OpKind : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Relu,
  Sigmoid,
  Log,
  Exp,
  Scale,
  AddScalar,
  ClampMin,
  Matmul,
  Conv2d,
  Softmax,
  LogSoftmax,
  L2Norm,
  Squash,
  SumAll,
  SumAxis,
  Reshape,
  Permute,
};

template <typename Scalar>
class Tape;

// Lightweight handle to a tape node. Copyable; valid as long as its tape is.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  std::int32_t id = -1;

  const Tensor<Scalar>& value() const { return tape->node(id).value; }
  const Tensor<Scalar>& grad() const { return tape->node(id).grad; }
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Define-by-run record of executed operations. Rebuilt per forward pass; an
// operation's inputs always precede it, so reverse index order is a
// topological order for the backward sweep.
template <typename Scalar>
class Tape {
 public:
  struct Node {
    OpKind kind = OpKind::Leaf;
    Tensor<Scalar> value;
    Tensor<Scalar> grad;  // accumulated adjoint; empty until first backward
    bool requires_grad = false;
    std::vector<std::int32_t> parents;
    // Pulls this node's per-pass adjoint back into its parents' adjoints.
    std::function<void(Tape&, std::int32_t self, const Tensor<Scalar>&,
                       std::vector<Tensor<Scalar>>&)>
        pull;
  };

  Var<Scalar> leaf(Tensor<Scalar> value, bool requires_grad = false) {
    Node n;
    n.kind = OpKind::Leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  Var<Scalar> constant(Tensor<Scalar> value) { return leaf(std::move(value), false); }

  template <typename Pull>
  Var<Scalar> emit(OpKind kind, Tensor<Scalar> value,
                   std::vector<std::int32_t> parents, Pull&& pull) {
    Node n;
    n.kind = kind;
    n.value = std::move(value);
    n.parents = std::move(parents);
    for (auto p : n.parents)
      if (nodes_[static_cast<std::size_t>(p)].requires_grad) n.requires_grad = true;
    if (n.requires_grad) n.pull = std::forward<Pull>(pull);
    nodes_.push_back(std::move(n));
    return {this, static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  Node& node(std::int32_t id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

  bool contains_kind(OpKind k) const {
    for (const auto& n : nodes_)
      if (n.kind == k) return true;
    return false;
  }

  // Adds `contrib` into the per-pass adjoint of `parent` (skipping subgraphs
  // that cannot reach any grad-requiring leaf). Adjoint tensors never have
  // zero elements, so numel()==0 marks an unset slot.
  void deposit(std::vector<Tensor<Scalar>>& adj, std::int32_t parent,
               Tensor<Scalar> contrib) {
    if (!nodes_[static_cast<std::size_t>(parent)].requires_grad) return;
    Tensor<Scalar>& slot = adj[static_cast<std::size_t>(parent)];
    if (slot.numel() == 0) {
      slot = std::move(contrib);
      return;
    }
    Scalar* d = slot.data();
    const Scalar* s = contrib.data();
    const std::int64_t n = contrib.numel();
    for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
  }

  // Adjoint slot accessor for pulls that accumulate in place.
  Tensor<Scalar>& adjoint_slot(std::vector<Tensor<Scalar>>& adj, std::int32_t parent) {
    Tensor<Scalar>& slot = adj[static_cast<std::size_t>(parent)];
    if (slot.numel() == 0)
      slot = Tensor<Scalar>::zeros(node(parent).value.shape());
    return slot;
  }

  bool wants_grad(std::int32_t id) const {
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
  }

  // Reverse-mode sweep from a scalar loss. Adjoints are fresh per call and
  // added into persistent node grads, so repeated calls accumulate.
  void backward(const Var<Scalar>& loss) {
    if (loss.tape != this) throw ContractError("backward: loss from another tape");
    const auto& ln = node(loss.id);
    if (ln.value.numel() != 1)
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(ln.value.shape()));
    std::vector<Tensor<Scalar>> adj(nodes_.size());
    adj[static_cast<std::size_t>(loss.id)] =
        Tensor<Scalar>::full(ln.value.shape(), Scalar(1));
    for (std::int32_t id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      Tensor<Scalar>& a = adj[static_cast<std::size_t>(id)];
      if (a.numel() == 0 || !n.requires_grad) continue;
      if (n.grad.numel() == 0) n.grad = Tensor<Scalar>::zeros(n.value.shape());
      Scalar* g = n.grad.data();
      const Scalar* s = a.data();
      for (std::int64_t i = 0; i < a.numel(); ++i) g[i] += s[i];
      if (n.pull) n.pull(*this, id, a, adj);
      a = Tensor<Scalar>();  // release as soon as pulled
    }
  }

  void zero_grads() {
    for (auto& n : nodes_) n.grad = Tensor<Scalar>();
  }

 private:
  std::deque<Node> nodes_;
};

}  // namespace caps
