#pragma once

#include <cassert>
#include <memory>
#include <span>
#include <utility>

#include "ganshot/common.hpp"

namespace ganshot {

template <typename S>
class TapeT;

// Dense n-dimensional row-major array. Copies are O(1): the buffer is shared
// and treated as immutable once an op has returned it. raw() hands out a
// mutable pointer only while the buffer is uniquely owned, which is how ops
// fill freshly created outputs.
template <typename S>
class TensorT {
 public:
  using Scalar = S;

  TensorT() = default;

  explicit TensorT(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<S>>(check_numel(shape_), S(0))) {}

  TensorT(Shape shape, std::vector<S> values) : shape_(std::move(shape)) {
    if (numel(shape_) != static_cast<long long>(values.size()))
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<S>>(std::move(values));
  }

  static TensorT full(Shape shape, S v) {
    TensorT t(std::move(shape));
    for (auto& x : *t.data_) x = v;
    return t;
  }

  static TensorT scalar(S v) { return TensorT({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const {
    assert(i >= 0 && i < rank());
    return shape_[i];
  }
  long long size() const { return data_ ? static_cast<long long>(data_->size()) : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  std::span<const S> data() const {
    assert(data_);
    return {data_->data(), data_->size()};
  }
  const S* ptr() const { return data_->data(); }

  // Mutable access for op construction; requires unique ownership.
  S* raw() {
    assert(data_ && data_.use_count() == 1);
    return data_->data();
  }

  S operator[](long long i) const { return (*data_)[i]; }

  S item() const {
    if (size() != 1)
      throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }

  bool requires_grad() const { return requires_grad_; }
  TensorT& set_requires_grad(bool v) {
    requires_grad_ = v;
    return *this;
  }

  TapeT<S>* tape() const { return tape_; }
  int node() const { return node_; }
  bool on_tape() const { return tape_ != nullptr; }

  // Drops any tape binding (the tape itself is unaffected).
  void unbind() {
    tape_ = nullptr;
    node_ = -1;
  }

  // Same buffer, no tape binding, no grad requirement.
  TensorT detached() const {
    TensorT t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  // Same buffer reinterpreted under a new shape of equal element count.
  TensorT reshaped(Shape new_shape) const {
    if (numel(new_shape) != size())
      throw DimensionError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                           " changes element count");
    TensorT t = detached();
    t.shape_ = std::move(new_shape);
    return t;
  }

 private:
  static long long check_numel(const Shape& s) {
    for (int d : s)
      if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(s));
    return numel(s);
  }

  friend class TapeT<S>;

  Shape shape_;
  std::shared_ptr<std::vector<S>> data_;
  bool requires_grad_ = false;
  TapeT<S>* tape_ = nullptr;
  int node_ = -1;
};

using Tensor = TensorT<float>;

template <typename S>
bool same_shape(const TensorT<S>& a, const TensorT<S>& b) {
  return a.shape() == b.shape();
}

#ifndef NDEBUG
template <typename S>
void debug_check_finite(const TensorT<S>& t) {
  for (S v : t.data()) assert(std::isfinite(static_cast<double>(v)));
}
#else
template <typename S>
void debug_check_finite(const TensorT<S>&) {}
#endif

}  // namespace ganshot
