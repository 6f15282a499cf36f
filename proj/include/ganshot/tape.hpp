#pragma once

#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "ganshot/tensor.hpp"

namespace ganshot {

enum class Op {
  leaf,
  add,
  sub,
  mul,
  scale_shift,
  matmul,
  linear,
  conv2d,
  conv_transpose2d,
  leaky_relu,
  sigmoid,
  tanh,
  bce,
  maxpool2d,
  reshape,
  permute,
  concat,
  slice,
  batchnorm2d,
  softmax,
  smooth_l1,
  sum,
  mean,
  upsample,
  multibox,
};

// Records one training step's computation in topological order and replays it
// backwards. Single writer: one step owns one tape. Gradients are kept per
// node; only subtrees that reach a requires_grad leaf get buffers.
template <typename S>
class TapeT {
 public:
  using BackwardFn = std::function<void(TapeT&, const std::vector<S>&)>;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  // Registers t as a leaf. Idempotent on this tape; rebinding a tensor that
  // lives on another tape violates the single-writer rule.
  void watch(TensorT<S>& t) {
    if (t.tape_ == this) return;
    if (t.tape_ != nullptr)
      throw ContractError("tensor is already bound to a different tape");
    t.tape_ = this;
    t.node_ = add_node(Op::leaf, {}, t.shape(), nullptr, t.requires_grad());
  }

  // Records an op node computed from the given input nodes (-1 entries are
  // constants and are skipped). Returns the new node id.
  int record(Op op, std::initializer_list<int> inputs, const Shape& out_shape,
             BackwardFn backward) {
    return record(op, std::vector<int>(inputs), out_shape, std::move(backward));
  }

  int record(Op op, const std::vector<int>& inputs, const Shape& out_shape,
             BackwardFn backward) {
    bool needs = false;
    std::vector<int> in;
    for (int i : inputs) {
      if (i < 0) continue;
      in.push_back(i);
      needs = needs || nodes_[i].needs;
    }
    return add_node(op, std::move(in), out_shape, std::move(backward), needs);
  }

  // Binds an op result tensor to its node.
  void bind(TensorT<S>& t, int node) {
    t.tape_ = this;
    t.node_ = node;
    t.requires_grad_ = nodes_[node].needs;
  }

  bool wants(int node) const { return node >= 0 && nodes_[node].needs; }

  // Accumulates a gradient contribution for a node. No-op for nodes whose
  // subtree holds no trainable leaf.
  void accumulate(int node, const S* g, long long n) {
    if (!wants(node)) return;
    auto& buf = grads_[node];
    if (buf.empty()) buf.assign(g, g + n);
    else {
      assert(static_cast<long long>(buf.size()) == n);
      for (long long i = 0; i < n; ++i) buf[i] += g[i];
    }
  }
  void accumulate(int node, const std::vector<S>& g) {
    accumulate(node, g.data(), static_cast<long long>(g.size()));
  }

  void backward(const TensorT<S>& loss) {
    if (loss.tape_ != this || loss.node_ < 0)
      throw ContractError("backward: loss is not on this tape");
    if (loss.size() != 1)
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!nodes_[loss.node_].needs) return;  // nothing trainable reaches the loss
    grads_[loss.node_] = {S(1)};
    for (int id = loss.node_; id >= 0; --id) {
      if (grads_[id].empty() || !nodes_[id].backward) continue;
      nodes_[id].backward(*this, grads_[id]);
      // intermediate buffers are dead once propagated; leaves keep theirs
      if (nodes_[id].op != Op::leaf) {
        std::vector<S>().swap(grads_[id]);
      }
    }
  }

  // Gradient of a watched tensor after backward(); null when absent.
  const std::vector<S>* gradient(const TensorT<S>& t) const {
    if (t.tape_ != this || t.node_ < 0) return nullptr;
    const auto& g = grads_[t.node_];
    return g.empty() ? nullptr : &g;
  }

  size_t num_nodes() const { return nodes_.size(); }
  Op op_of(int node) const { return nodes_[node].op; }
  const Shape& shape_of(int node) const { return nodes_[node].shape; }

 private:
  struct Node {
    Op op;
    std::vector<int> inputs;
    Shape shape;
    BackwardFn backward;
    bool needs;
  };

  int add_node(Op op, std::vector<int> inputs, Shape shape, BackwardFn backward, bool needs) {
    nodes_.push_back(Node{op, std::move(inputs), std::move(shape), std::move(backward), needs});
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<S>> grads_;
};

using Tape = TapeT<float>;

// Tape shared by any of the given tensors; throws if two tensors disagree.
template <typename S>
TapeT<S>* merged_tape(std::initializer_list<const TensorT<S>*> ts) {
  TapeT<S>* tape = nullptr;
  for (const TensorT<S>* t : ts) {
    if (!t->on_tape()) continue;
    if (tape && tape != t->tape())
      throw ContractError("op inputs live on different tapes");
    tape = t->tape();
  }
  return tape;
}

}  // namespace ganshot
