#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include "ganshot/conv_kernels.hpp"
#include "ganshot/tape.hpp"

// Differentiable tensor operations. Each is a pure function of its inputs;
// when any input is bound to a tape, the op records a node whose backward
// closure pushes gradient contributions to the input nodes.

namespace ganshot {

struct ActivationConfig {
  float negative_slope = 0.01f;
  bool inplace = false;  // accepted for config parity; buffers are immutable here
};

namespace detail {

template <typename S>
TensorT<S> make_result(Shape shape, std::vector<S> data) {
  TensorT<S> t(std::move(shape), std::move(data));
  debug_check_finite(t);
  return t;
}

template <typename S>
void require_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
  if (!same_shape(a, b))
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<S> out(a.size());
  for (long long i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  TensorT<S> r = detail::make_result(a.shape(), std::move(out));
  if (TapeT<S>* tape = merged_tape<S>({&a, &b})) {
    const int an = a.node(), bn = b.node();
    int id = tape->record(Op::add, {an, bn}, r.shape(),
                          [an, bn](TapeT<S>& t, const std::vector<S>& g) {
                            t.accumulate(an, g);
                            t.accumulate(bn, g);
                          });
    tape->bind(r, id);
  }
  return r;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<S> out(a.size());
  for (long long i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  TensorT<S> r = detail::make_result(a.shape(), std::move(out));
  if (TapeT<S>* tape = merged_tape<S>({&a, &b})) {
    const int an = a.node(), bn = b.node();
    int id = tape->record(Op::sub, {an, bn}, r.shape(),
                          [an, bn](TapeT<S>& t, const std::vector<S>& g) {
                            t.accumulate(an, g);
                            if (t.wants(bn)) {
                              std::vector<S> neg(g.size());
                              for (size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
                              t.accumulate(bn, neg);
                            }
                          });
    tape->bind(r, id);
  }
  return r;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<S> out(a.size());
  for (long long i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  TensorT<S> r = detail::make_result(a.shape(), std::move(out));
  if (TapeT<S>* tape = merged_tape<S>({&a, &b})) {
    const int an = a.node(), bn = b.node();
    TensorT<S> av = a.detached(), bv = b.detached();
    int id = tape->record(Op::mul, {an, bn}, r.shape(),
                          [an, bn, av, bv](TapeT<S>& t, const std::vector<S>& g) {
                            if (t.wants(an)) {
                              std::vector<S> ga(g.size());
                              for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bv[i];
                              t.accumulate(an, ga);
                            }
                            if (t.wants(bn)) {
                              std::vector<S> gb(g.size());
                              for (size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * av[i];
                              t.accumulate(bn, gb);
                            }
                          });
    tape->bind(r, id);
  }
  return r;
}

// y = scale * x + shift, scalar coefficients
template <typename S>
TensorT<S> scale_shift(const TensorT<S>& x, S scale, S shift) {
  std::vector<S> out(x.size());
  for (long long i = 0; i < x.size(); ++i) out[i] = scale * x[i] + shift;
  TensorT<S> r = detail::make_result(x.shape(), std::move(out));
  if (TapeT<S>* tape = merged_tape<S>({&x})) {
    const int xn = x.node();
    int id = tape->record(Op::scale_shift, {xn}, r.shape(),
                          [xn, scale](TapeT<S>& t, const std::vector<S>& g) {
                            std::vector<S> gx(g.size());
                            for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * scale;
                            t.accumulate(xn, gx);
                          });
    tape->bind(r, id);
  }
  return r;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> sum(const TensorT<S>& x) {
  S acc = 0;
  for (long long i = 0; i < x.size(); ++i) acc += x[i];
  TensorT<S> r = TensorT<S>::scalar(acc);
  if (TapeT<S>* tape = merged_tape<S>({&x})) {
    const int xn = x.node();
    const long long n = x.size();
    int id = tape->record(Op::sum, {xn}, r.shape(),
                          [xn, n](TapeT<S>& t, const std::vector<S>& g) {
                            t.accumulate(xn, std::vector<S>(n, g[0]));
                          });
    tape->bind(r, id);
  }
  return r;
}

template <typename S>
TensorT<S> mean(const TensorT<S>& x) {
  S acc = 0;
  for (long long i = 0; i < x.size(); ++i) acc += x[i];
  const long long n = x.size();
  TensorT<S> r = TensorT<S>::scalar(acc / static_cast<S>(n));
  if (TapeT<S>* tape = merged_tape<S>({&x})) {
    const int xn = x.node();
    int id = tape->record(Op::mean, {xn}, r.shape(),
                          [xn, n](TapeT<S>& t, const std::vector<S>& g) {
                            t.accumulate(xn, std::vector<S>(n, g[0] / static_cast<S>(n)));
                          });
    tape->bind(r, id);
  }
  return r;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape new_shape) {
  TensorT<S> r = x.reshaped(std::move(new_shape));
  if (TapeT<S>* tape = merged_tape<S>({&x})) {
    const int xn = x.node();
    int id = tape->record(Op::reshape, {xn}, r.shape(),
                          [xn](TapeT<S>& t, const std::vector<S>& g) { t.accumulate(xn, g); });
    tape->bind(r, id);
  }
  return r;
}

namespace detail {

// out[i_perm(0),...] = in[i0,...] with out axis d reading in axis dims[d]
template <typename S>
void permute_copy(const S* in, const Shape& in_shape, const std::vector<int>& dims, S* out) {
  const int r = static_cast<int>(in_shape.size());
  std::vector<long long> in_strides(r, 1), out_strides(r, 1);
  for (int i = r - 2; i >= 0; --i)
    in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = in_shape[dims[i]];
  for (int i = r - 2; i >= 0; --i)
    out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
  const long long total = numel(in_shape);
  std::vector<int> idx(r, 0);  // iterates the output index space
  for (long long lin = 0; lin < total; ++lin) {
    long long src = 0;
    for (int i = 0; i < r; ++i) src += static_cast<long long>(idx[i]) * in_strides[dims[i]];
    out[lin] = in[src];
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
}

}  // namespace detail

template <typename S>
TensorT<S> permute(const TensorT<S>& x, std::vector<int> dims) {
  const int r = x.rank();
  if (static_cast<int>(dims.size()) != r)
    throw DimensionError("permute: got " + std::to_string(dims.size()) + " axes for rank " +
                         std::to_string(r));
  std::vector<bool> seen(r, false);
  for (int d : dims) {
    if (d < 0 || d >= r || seen[d]) throw DimensionError("permute: invalid axis order");
    seen[d] = true;
  }
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = x.dim(dims[i]);
  std::vector<S> out(x.size());
  detail::permute_copy(x.ptr(), x.shape(), dims, out.data());
  TensorT<S> res = detail::make_result(std::move(out_shape), std::move(out));
  if (TapeT<S>* tape = merged_tape<S>({&x})) {
    const int xn = x.node();
    const Shape fwd_out = res.shape();
    std::vector<int> inv(r);
    for (int i = 0; i < r; ++i) inv[dims[i]] = i;
    int id = tape->record(Op::permute, {xn}, res.shape(),
                          [xn, fwd_out, inv](TapeT<S>& t, const std::vector<S>& g) {
                            if (!t.wants(xn)) return;
                            std::vector<S> gx(g.size());
                            detail::permute_copy(g.data(), fwd_out, inv, gx.data());
                            t.accumulate(xn, gx);
                          });
    tape->bind(res, id);
  }
  return res;
}

template <typename S>
TensorT<S> concat(const std::vector<TensorT<S>>& xs, int axis) {
  if (xs.empty()) throw InputError("concat: no inputs");
  const int r = xs[0].rank();
  if (axis < 0 || axis >= r) throw DimensionError("concat: bad axis");
  Shape out_shape = xs[0].shape();
  out_shape[axis] = 0;
  for (const auto& x : xs) {
    if (x.rank() != r) throw DimensionError("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && x.dim(i) != xs[0].dim(i))
        throw DimensionError("concat: shape mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(xs[0].shape()));
    out_shape[axis] += x.dim(axis);
  }
  long long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[i];

  std::vector<S> out(numel(out_shape));
  std::vector<long long> chunk(xs.size());
  for (size_t k = 0; k < xs.size(); ++k) chunk[k] = static_cast<long long>(xs[k].dim(axis)) * inner;
  const long long out_row = static_cast<long long>(out_shape[axis]) * inner;
  for (long long o = 0; o < outer; ++o) {
    long long off = o * out_row;
    for (size_t k = 0; k < xs.size(); ++k) {
      const S* src = xs[k].ptr() + o * chunk[k];
      std::copy(src, src + chunk[k], out.data() + off);
      off += chunk[k];
    }
  }
  TensorT<S> res = detail::make_result(std::move(out_shape), std::move(out));

  TapeT<S>* tape = nullptr;
  for (const auto& x : xs)
    if (x.on_tape()) {
      if (tape && tape != x.tape()) throw ContractError("op inputs live on different tapes");
      tape = x.tape();
    }
  if (tape) {
    std::vector<int> in_nodes;
    for (const auto& x : xs) in_nodes.push_back(x.node());
    const long long orow = out_row;
    int id = tape->record(
        Op::concat, in_nodes, res.shape(),
        [in_nodes, chunk, outer, orow](TapeT<S>& t, const std::vector<S>& g) {
          long long base = 0;
          for (size_t k = 0; k < in_nodes.size(); ++k) {
            if (t.wants(in_nodes[k])) {
              std::vector<S> gk(outer * chunk[k]);
              for (long long o = 0; o < outer; ++o)
                std::copy(g.data() + o * orow + base, g.data() + o * orow + base + chunk[k],
                          gk.data() + o * chunk[k]);
              t.accumulate(in_nodes[k], gk);
            }
            base += chunk[k];
          }
        });
    tape->bind(res, id);
  }
  return res;
}

// Contiguous range [start, start+len) along the last axis.
template <typename S>
TensorT<S> slice_last(const TensorT<S>& x, int start, int len) {
  if (x.rank() < 1) throw DimensionError("slice_last: rank-0 input");
  const int c = x.dim(x.rank() - 1);
  if (start < 0 || len <= 0 || start + len > c)
    throw DimensionError("slice_last: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") outside axis of size " +
                         std::to_string(c));
  const long long rows = x.size() / c;
  Shape out_shape = x.shape();
  out_shape.back() = len;
  std::vector<S> out(rows * len);
  for (long long r0 = 0; r0 < rows; ++r0)
    std::copy(x.ptr() + r0 * c + start, x.ptr() + r0 * c + start + len, out.data() + r0 * len);
  TensorT<S> res = detail::make_result(std::move(out_shape), std::move(out));
  if (TapeT<S>* tape = merged_tape<S>({&x})) {
    const int xn = x.node();
    const long long total = x.size();
    int id = tape->record(Op::slice, {xn}, res.shape(),
                          [xn, rows, c, start, len, total](TapeT<S>& t, const std::vector<S>& g) {
                            std::vector<S> gx(total, S(0));
                            for (long long r0 = 0; r0 < rows; ++r0)
                              std::copy(g.data() + r0 * len, g.data() + (r0 + 1) * len,
                                        gx.data() + r0 * c + start);
                            t.accumulate(xn, gx);
                          });
    tape->bind(res, id);
  }
  return res;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> leaky_relu(const TensorT<S>& x, const ActivationConfig& cfg = {}) {
  if (cfg.negative_slope < 0)
    throw ContractError("leaky_relu: negative_slope must be >= 0");
  const S slope = static_cast<S>(cfg.negative_slope);
  std::vector<S> out(x.size());
  for (long long i = 0; i < x.size(); ++i) {
    const S v = x[i];
    out[i] = v > 0 ? v : slope * v;
  }
  TensorT<S> r = detail::make_result(x.shape(), std::move(out));
  if (TapeT<S>* tape = merged_tape<S>({&x})) {
    const int xn = x.node();
    TensorT<S> xv = x.detached();
    int id = tape->record(Op::leaky_relu, {xn}, r.shape(),
                          [xn, xv, slope](TapeT<S>& t, const std::vector<S>& g) {
                            std::vector<S> gx(g.size());
                            for (size_t i = 0; i < g.size(); ++i)
                              gx[i] = g[i] * (xv[static_cast<long long>(i)] > 0 ? S(1) : slope);
                            t.accumulate(xn, gx);
                          });
    tape->bind(r, id);
  }
  return r;
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& x) {
  std::vector<S> out(x.size());
  for (long long i = 0; i < x.size(); ++i) {
    const S v = x[i];
    out[i] = v >= 0 ? S(1) / (S(1) + std::exp(-v))
                    : std::exp(v) / (S(1) + std::exp(v));
  }
  TensorT<S> r = detail::make_result(x.shape(), std::move(out));
  if (TapeT<S>* tape = merged_tape<S>({&x})) {
    const int xn = x.node();
    TensorT<S> yv = r.detached();
    int id = tape->record(Op::sigmoid, {xn}, r.shape(),
                          [xn, yv](TapeT<S>& t, const std::vector<S>& g) {
                            std::vector<S> gx(g.size());
                            for (size_t i = 0; i < g.size(); ++i) {
                              const S y = yv[static_cast<long long>(i)];
                              gx[i] = g[i] * y * (S(1) - y);
                            }
                            t.accumulate(xn, gx);
                          });
    tape->bind(r, id);
  }
  return r;
}

template <typename S>
TensorT<S> tanh(const TensorT<S>& x) {
  std::vector<S> out(x.size());
  for (long long i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  TensorT<S> r = detail::make_result(x.shape(), std::move(out));
  if (TapeT<S>* tape = merged_tape<S>({&x})) {
    const int xn = x.node();
    TensorT<S> yv = r.detached();
    int id = tape->record(Op::tanh, {xn}, r.shape(),
                          [xn, yv](TapeT<S>& t, const std::vector<S>& g) {
                            std::vector<S> gx(g.size());
                            for (size_t i = 0; i < g.size(); ++i) {
                              const S y = yv[static_cast<long long>(i)];
                              gx[i] = g[i] * (S(1) - y * y);
                            }
                            t.accumulate(xn, gx);
                          });
    tape->bind(r, id);
  }
  return r;
}

enum class Nonlinearity { sigmoid, tanh };

template <typename S>
TensorT<S> elementwise_activation(const TensorT<S>& x, Nonlinearity kind) {
  return kind == Nonlinearity::sigmoid ? sigmoid(x) : tanh(x);
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Binary cross entropy, mean over elements, with optional per-element
// weights. Predictions are clamped to [1e-7, 1-1e-7] before the logs; the
// clamped region contributes zero gradient.
template <typename S>
TensorT<S> bce_loss(const TensorT<S>& o, const TensorT<S>& t,
                    const std::type_identity_t<std::optional<TensorT<S>>>& weights = std::nullopt) {
  detail::require_same_shape(o, t, "bce_loss");
  if (weights) {
    if (weights->size() != o.size())
      throw DimensionError("bce_loss: weights shape " + shape_str(weights->shape()) +
                           " does not match " + shape_str(o.shape()));
    for (long long i = 0; i < weights->size(); ++i)
      if ((*weights)[i] < 0) throw InputError("bce_loss: negative weight");
  }
  const S lo = static_cast<S>(1e-7), hi = S(1) - static_cast<S>(1e-7);
  const long long n = o.size();
  double acc = 0.0;
  for (long long i = 0; i < n; ++i) {
    const S oc = std::min(hi, std::max(lo, o[i]));
    const double w = weights ? static_cast<double>((*weights)[i]) : 1.0;
    const double ti = t[i];
    acc -= w * (ti * std::log(static_cast<double>(oc)) +
                (1.0 - ti) * std::log(1.0 - static_cast<double>(oc)));
  }
  TensorT<S> r = TensorT<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));
  if (TapeT<S>* tape = merged_tape<S>({&o, &t})) {
    const int on = o.node(), tn = t.node();
    TensorT<S> ov = o.detached(), tv = t.detached();
    std::optional<TensorT<S>> wv;
    if (weights) wv = weights->detached();
    int id = tape->record(
        Op::bce, {on, tn}, r.shape(),
        [on, tn, ov, tv, wv, lo, hi, n](TapeT<S>& t_, const std::vector<S>& g) {
          const S scale = g[0] / static_cast<S>(n);
          if (t_.wants(on)) {
            std::vector<S> go(n, S(0));
            for (long long i = 0; i < n; ++i) {
              const S v = ov[i];
              if (v < lo || v > hi) continue;  // clamped: flat
              const S w = wv ? (*wv)[i] : S(1);
              go[i] = -scale * w * (tv[i] / v - (S(1) - tv[i]) / (S(1) - v));
            }
            t_.accumulate(on, go);
          }
          if (t_.wants(tn)) {
            std::vector<S> gt(n);
            for (long long i = 0; i < n; ++i) {
              const S oc = std::min(hi, std::max(lo, ov[i]));
              const S w = wv ? (*wv)[i] : S(1);
              gt[i] = -scale * w * (std::log(oc) - std::log(S(1) - oc));
            }
            t_.accumulate(tn, gt);
          }
        });
    tape->bind(r, id);
  }
  return r;
}

// Elementwise smooth L1 (0.5 d^2 for |d|<1, |d|-0.5 otherwise).
template <typename S>
TensorT<S> smooth_l1(const TensorT<S>& pred, const TensorT<S>& target) {
  detail::require_same_shape(pred, target, "smooth_l1");
  std::vector<S> out(pred.size());
  for (long long i = 0; i < pred.size(); ++i) {
    const S d = pred[i] - target[i];
    const S a = std::abs(d);
    out[i] = a < 1 ? S(0.5) * d * d : a - S(0.5);
  }
  TensorT<S> r = detail::make_result(pred.shape(), std::move(out));
  if (TapeT<S>* tape = merged_tape<S>({&pred, &target})) {
    const int pn = pred.node(), tn = target.node();
    TensorT<S> pv = pred.detached(), tv = target.detached();
    int id = tape->record(Op::smooth_l1, {pn, tn}, r.shape(),
                          [pn, tn, pv, tv](TapeT<S>& t, const std::vector<S>& g) {
                            std::vector<S> gp(g.size());
                            for (size_t i = 0; i < g.size(); ++i) {
                              const S d = pv[static_cast<long long>(i)] - tv[static_cast<long long>(i)];
                              gp[i] = g[i] * std::clamp(d, S(-1), S(1));
                            }
                            if (t.wants(tn)) {
                              std::vector<S> gt(gp.size());
                              for (size_t i = 0; i < gp.size(); ++i) gt[i] = -gp[i];
                              t.accumulate(tn, gt);
                            }
                            t.accumulate(pn, gp);
                          });
    tape->bind(r, id);
  }
  return r;
}

// Softmax over the last axis.
template <typename S>
TensorT<S> softmax(const TensorT<S>& x) {
  if (x.rank() < 1) throw DimensionError("softmax: rank-0 input");
  const long long c = x.dim(x.rank() - 1);
  const long long rows = x.size() / c;
  std::vector<S> out(x.size());
  for (long long r0 = 0; r0 < rows; ++r0) {
    const S* row = x.ptr() + r0 * c;
    S* orow = out.data() + r0 * c;
    S mx = row[0];
    for (long long i = 1; i < c; ++i) mx = std::max(mx, row[i]);
    S denom = 0;
    for (long long i = 0; i < c; ++i) {
      orow[i] = std::exp(row[i] - mx);
      denom += orow[i];
    }
    for (long long i = 0; i < c; ++i) orow[i] /= denom;
  }
  TensorT<S> r = detail::make_result(x.shape(), std::move(out));
  if (TapeT<S>* tape = merged_tape<S>({&x})) {
    const int xn = x.node();
    TensorT<S> yv = r.detached();
    int id = tape->record(Op::softmax, {xn}, r.shape(),
                          [xn, yv, rows, c](TapeT<S>& t, const std::vector<S>& g) {
                            std::vector<S> gx(g.size());
                            for (long long r0 = 0; r0 < rows; ++r0) {
                              const S* yrow = yv.ptr() + r0 * c;
                              const S* grow = g.data() + r0 * c;
                              S dot = 0;
                              for (long long i = 0; i < c; ++i) dot += grow[i] * yrow[i];
                              for (long long i = 0; i < c; ++i)
                                gx[r0 * c + i] = yrow[i] * (grow[i] - dot);
                            }
                            t.accumulate(xn, gx);
                          });
    tape->bind(r, id);
  }
  return r;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(static_cast<long long>(m) * n);
  {
    detail::CMapRM<S> am(a.ptr(), m, k), bm(b.ptr(), k, n);
    detail::MapRM<S> om(out.data(), m, n);
    om.noalias() = am * bm;
  }
  TensorT<S> r = detail::make_result({m, n}, std::move(out));
  if (TapeT<S>* tape = merged_tape<S>({&a, &b})) {
    const int an = a.node(), bn = b.node();
    TensorT<S> av = a.detached(), bv = b.detached();
    int id = tape->record(Op::matmul, {an, bn}, r.shape(),
                          [an, bn, av, bv, m, k, n](TapeT<S>& t, const std::vector<S>& g) {
                            detail::CMapRM<S> gm(g.data(), m, n);
                            detail::CMapRM<S> am(av.ptr(), m, k), bm(bv.ptr(), k, n);
                            if (t.wants(an)) {
                              std::vector<S> da(static_cast<long long>(m) * k);
                              detail::MapRM<S> dam(da.data(), m, k);
                              dam.noalias() = gm * bm.transpose();
                              t.accumulate(an, da);
                            }
                            if (t.wants(bn)) {
                              std::vector<S> db(static_cast<long long>(k) * n);
                              detail::MapRM<S> dbm(db.data(), k, n);
                              dbm.noalias() = am.transpose() * gm;
                              t.accumulate(bn, db);
                            }
                          });
    tape->bind(r, id);
  }
  return r;
}

// y[N,O] = x[N,I] * w[I,O] + b[O]
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w,
                  const std::type_identity_t<std::optional<TensorT<S>>>& b = std::nullopt) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0))
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + " x " +
                         shape_str(w.shape()));
  const int n = x.dim(0), in = x.dim(1), out_f = w.dim(1);
  if (b && (b->rank() != 1 || b->dim(0) != out_f))
    throw DimensionError("linear: bias shape " + shape_str(b->shape()));
  std::vector<S> out(static_cast<long long>(n) * out_f);
  {
    detail::CMapRM<S> xm(x.ptr(), n, in), wm(w.ptr(), in, out_f);
    detail::MapRM<S> om(out.data(), n, out_f);
    om.noalias() = xm * wm;
    if (b)
      for (int r0 = 0; r0 < n; ++r0)
        for (int j = 0; j < out_f; ++j) out[static_cast<long long>(r0) * out_f + j] += (*b)[j];
  }
  TensorT<S> r = detail::make_result({n, out_f}, std::move(out));
  TapeT<S>* tape = b ? merged_tape<S>({&x, &w, &*b}) : merged_tape<S>({&x, &w});
  if (tape) {
    const int xn = x.node(), wn = w.node(), bn = b ? b->node() : -1;
    TensorT<S> xv = x.detached(), wv = w.detached();
    int id = tape->record(
        Op::linear, {xn, wn, bn}, r.shape(),
        [xn, wn, bn, xv, wv, n, in, out_f](TapeT<S>& t, const std::vector<S>& g) {
          detail::CMapRM<S> gm(g.data(), n, out_f);
          if (t.wants(xn)) {
            std::vector<S> dx(static_cast<long long>(n) * in);
            detail::MapRM<S> dxm(dx.data(), n, in);
            detail::CMapRM<S> wm(wv.ptr(), in, out_f);
            dxm.noalias() = gm * wm.transpose();
            t.accumulate(xn, dx);
          }
          if (t.wants(wn)) {
            std::vector<S> dw(static_cast<long long>(in) * out_f);
            detail::MapRM<S> dwm(dw.data(), in, out_f);
            detail::CMapRM<S> xm(xv.ptr(), n, in);
            dwm.noalias() = xm.transpose() * gm;
            t.accumulate(wn, dw);
          }
          if (t.wants(bn)) {
            std::vector<S> db(out_f, S(0));
            for (int r0 = 0; r0 < n; ++r0)
              for (int j = 0; j < out_f; ++j) db[j] += g[static_cast<long long>(r0) * out_f + j];
            t.accumulate(bn, db);
          }
        });
    tape->bind(r, id);
  }
  return r;
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

// x [N,C,H,W], kernel [O,C,Kh,Kw], optional bias [O]; zero padding.
template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& k,
                  const std::type_identity_t<std::optional<TensorT<S>>>& bias, int stride, int pad,
                  ConvAlgo algo = ConvAlgo::auto_algo) {
  if (x.rank() != 4 || k.rank() != 4)
    throw DimensionError("conv2d: expected 4-d input and kernel, got " + shape_str(x.shape()) +
                         " and " + shape_str(k.shape()));
  if (x.dim(1) != k.dim(1))
    throw DimensionError("conv2d: input channels " + shape_str(x.shape()) +
                         " do not match kernel channels " + shape_str(k.shape()));
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (pad < 0) throw ContractError("conv2d: pad must be >= 0");
  detail::ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3),
                     k.dim(0), k.dim(2), k.dim(3), stride,  pad, 0, 0};
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw)
    throw DimensionError("conv2d: kernel " + shape_str(k.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.out_ch))
    throw DimensionError("conv2d: bias shape " + shape_str(bias->shape()));

  std::vector<S> out(static_cast<long long>(g.n) * g.out_ch * g.oh * g.ow);
  detail::conv_gather(x.ptr(), k.ptr(), g, out.data(), algo);
  if (bias) {
    const long long plane = static_cast<long long>(g.oh) * g.ow;
    for (int n = 0; n < g.n; ++n)
      for (int a = 0; a < g.out_ch; ++a) {
        S* dst = out.data() + (static_cast<long long>(n) * g.out_ch + a) * plane;
        const S bv = (*bias)[a];
        for (long long i = 0; i < plane; ++i) dst[i] += bv;
      }
  }
  TensorT<S> r = detail::make_result({g.n, g.out_ch, g.oh, g.ow}, std::move(out));

  TapeT<S>* tape = bias ? merged_tape<S>({&x, &k, &*bias}) : merged_tape<S>({&x, &k});
  if (tape) {
    const int xn = x.node(), kn = k.node(), bn = bias ? bias->node() : -1;
    TensorT<S> xv = x.detached(), kv = k.detached();
    int id = tape->record(
        Op::conv2d, {xn, kn, bn}, r.shape(),
        [xn, kn, bn, xv, kv, g, algo](TapeT<S>& t, const std::vector<S>& grad) {
          if (t.wants(xn)) {
            // input grad: transposed convolution of grad with same kernel
            std::vector<S> dx(static_cast<long long>(g.n) * g.in_ch * g.h * g.w);
            detail::ConvGeom gs{g.n, g.out_ch, g.oh, g.ow, g.in_ch, g.kh, g.kw,
                                g.stride, g.pad, g.h, g.w};
            // scatter expects kernel layout [in_ch(out here), out_ch(in here), kh, kw]
            // which is exactly conv2d's [O,C,kh,kw] seen from the gradient side
            detail::conv_scatter(grad.data(), kv.ptr(), gs, dx.data(), algo);
            t.accumulate(xn, dx);
          }
          if (t.wants(kn)) {
            std::vector<S> dk(kv.size(), S(0));
            detail::conv_wgrad(xv.ptr(), grad.data(), g, dk.data(), algo);
            t.accumulate(kn, dk);
          }
          if (t.wants(bn)) {
            const long long plane = static_cast<long long>(g.oh) * g.ow;
            std::vector<S> db(g.out_ch, S(0));
            for (int n = 0; n < g.n; ++n)
              for (int a = 0; a < g.out_ch; ++a) {
                const S* src = grad.data() + (static_cast<long long>(n) * g.out_ch + a) * plane;
                for (long long i = 0; i < plane; ++i) db[a] += src[i];
              }
            t.accumulate(bn, db);
          }
        });
    tape->bind(r, id);
  }
  return r;
}

// x [N,C,H,W], kernel [C,O,Kh,Kw]; output spatial (H-1)*stride - 2*pad + Kh.
// Forward equals the input-gradient pass of conv2d with the same geometry.
template <typename S>
TensorT<S> conv_transpose2d(const TensorT<S>& x, const TensorT<S>& k, int stride, int pad,
                            ConvAlgo algo = ConvAlgo::auto_algo) {
  if (x.rank() != 4 || k.rank() != 4)
    throw DimensionError("conv_transpose2d: expected 4-d input and kernel, got " +
                         shape_str(x.shape()) + " and " + shape_str(k.shape()));
  if (x.dim(1) != k.dim(0))
    throw DimensionError("conv_transpose2d: input channels " + shape_str(x.shape()) +
                         " do not match kernel channels " + shape_str(k.shape()));
  if (stride < 1) throw ContractError("conv_transpose2d: stride must be >= 1");
  if (pad < 0) throw ContractError("conv_transpose2d: pad must be >= 0");
  const int oh = (x.dim(2) - 1) * stride - 2 * pad + k.dim(2);
  const int ow = (x.dim(3) - 1) * stride - 2 * pad + k.dim(3);
  if (oh <= 0 || ow <= 0)
    throw DimensionError("conv_transpose2d: non-positive output " + std::to_string(oh) + "x" +
                         std::to_string(ow) + " from input " + shape_str(x.shape()));
  detail::ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3),
                     k.dim(1), k.dim(2), k.dim(3), stride,  pad, oh, ow};
  std::vector<S> out(static_cast<long long>(g.n) * g.out_ch * oh * ow);
  detail::conv_scatter(x.ptr(), k.ptr(), g, out.data(), algo);
  TensorT<S> r = detail::make_result({g.n, g.out_ch, oh, ow}, std::move(out));

  if (TapeT<S>* tape = merged_tape<S>({&x, &k})) {
    const int xn = x.node(), kn = k.node();
    TensorT<S> xv = x.detached(), kv = k.detached();
    int id = tape->record(
        Op::conv_transpose2d, {xn, kn}, r.shape(),
        [xn, kn, xv, kv, g](TapeT<S>& t, const std::vector<S>& grad) {
          // gather/wgrad on the output-side grid: grad plays the conv2d input
          detail::ConvGeom gg{g.n, g.out_ch, g.oh, g.ow, g.in_ch, g.kh, g.kw,
                              g.stride, g.pad, g.h, g.w};
          if (t.wants(xn)) {
            std::vector<S> dx(xv.size());
            // kernel [C,O,kh,kw] is [out,in] from the gradient side
            detail::conv_gather(grad.data(), kv.ptr(), gg, dx.data(), ConvAlgo::auto_algo);
            t.accumulate(xn, dx);
          }
          if (t.wants(kn)) {
            std::vector<S> dk(kv.size(), S(0));
            // dk[c,o,kh,kw] = sum x[n,c,h,w] * grad[n,o,h*s+kh-p,...]
            detail::conv_wgrad(grad.data(), xv.ptr(), gg, dk.data(), ConvAlgo::auto_algo);
            t.accumulate(kn, dk);
          }
        });
    tape->bind(r, id);
  }
  return r;
}

// ---------------------------------------------------------------------------
// pooling and resampling
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> maxpool2d(const TensorT<S>& x, int kernel, int stride) {
  if (x.rank() != 4) throw DimensionError("maxpool2d: expected 4-d input");
  if (kernel < 1 || stride < 1) throw ContractError("maxpool2d: kernel and stride must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < kernel || w < kernel)
    throw DimensionError("maxpool2d: window " + std::to_string(kernel) + " exceeds input " +
                         shape_str(x.shape()));
  const int oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
  std::vector<S> out(static_cast<long long>(n) * c * oh * ow);
  auto argmax = std::make_shared<std::vector<long long>>(out.size());
  long long o = 0;
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const S* plane = x.ptr() + (static_cast<long long>(ni) * c + ci) * h * w;
      const long long base = (static_cast<long long>(ni) * c + ci) * h * w;
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j, ++o) {
          S best = plane[(i * stride) * w + j * stride];
          long long bidx = base + (i * stride) * w + j * stride;
          for (int di = 0; di < kernel; ++di)
            for (int dj = 0; dj < kernel; ++dj) {
              const S v = plane[(i * stride + di) * w + (j * stride + dj)];
              if (v > best) {
                best = v;
                bidx = base + (i * stride + di) * w + (j * stride + dj);
              }
            }
          out[o] = best;
          (*argmax)[o] = bidx;
        }
    }
  TensorT<S> r = detail::make_result({n, c, oh, ow}, std::move(out));
  if (TapeT<S>* tape = merged_tape<S>({&x})) {
    const int xn = x.node();
    const long long in_size = x.size();
    int id = tape->record(Op::maxpool2d, {xn}, r.shape(),
                          [xn, argmax, in_size](TapeT<S>& t, const std::vector<S>& g) {
                            std::vector<S> gx(in_size, S(0));
                            for (size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
                            t.accumulate(xn, gx);
                          });
    tape->bind(r, id);
  }
  return r;
}

template <typename S>
TensorT<S> upsample_nearest(const TensorT<S>& x, int factor) {
  if (x.rank() != 4) throw DimensionError("upsample_nearest: expected 4-d input");
  if (factor < 1) throw ContractError("upsample_nearest: factor must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h * factor, ow = w * factor;
  std::vector<S> out(static_cast<long long>(n) * c * oh * ow);
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const S* src = x.ptr() + (static_cast<long long>(ni) * c + ci) * h * w;
      S* dst = out.data() + (static_cast<long long>(ni) * c + ci) * oh * ow;
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) dst[i * ow + j] = src[(i / factor) * w + (j / factor)];
    }
  TensorT<S> r = detail::make_result({n, c, oh, ow}, std::move(out));
  if (TapeT<S>* tape = merged_tape<S>({&x})) {
    const int xn = x.node();
    int id = tape->record(Op::upsample, {xn}, r.shape(),
                          [xn, n, c, h, w, factor](TapeT<S>& t, const std::vector<S>& g) {
                            const int oh2 = h * factor, ow2 = w * factor;
                            std::vector<S> gx(static_cast<long long>(n) * c * h * w, S(0));
                            for (int ni = 0; ni < n; ++ni)
                              for (int ci = 0; ci < c; ++ci) {
                                const S* gs = g.data() +
                                              (static_cast<long long>(ni) * c + ci) * oh2 * ow2;
                                S* gd = gx.data() + (static_cast<long long>(ni) * c + ci) * h * w;
                                for (int i = 0; i < oh2; ++i)
                                  for (int j = 0; j < ow2; ++j)
                                    gd[(i / factor) * w + (j / factor)] += gs[i * ow2 + j];
                              }
                            t.accumulate(xn, gx);
                          });
    tape->bind(r, id);
  }
  return r;
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

struct BatchNormStats {
  std::vector<float> mean, var;  // batch statistics observed in train mode
};

// x [N,C,H,W]; gamma/beta/running_mean/running_var [C]. In train mode the
// batch statistics normalize and are reported via *observed (the caller owns
// the running-stat update policy); in eval mode the provided running stats
// normalize. Biased variance throughout.
template <typename S>
TensorT<S> batchnorm2d(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                       const TensorT<S>& running_mean, const TensorT<S>& running_var,
                       bool training, S eps = static_cast<S>(1e-5),
                       BatchNormStats* observed = nullptr) {
  if (x.rank() != 4) throw DimensionError("batchnorm2d: expected 4-d input");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.size() != c || beta.size() != c || running_mean.size() != c || running_var.size() != c)
    throw DimensionError("batchnorm2d: parameter length does not match channels " +
                         std::to_string(c));
  const long long m = static_cast<long long>(n) * h * w;
  const long long plane = static_cast<long long>(h) * w;

  std::vector<S> mu(c), var(c);
  if (training) {
    for (int ci = 0; ci < c; ++ci) {
      double s = 0;
      for (int ni = 0; ni < n; ++ni) {
        const S* src = x.ptr() + (static_cast<long long>(ni) * c + ci) * plane;
        for (long long i = 0; i < plane; ++i) s += src[i];
      }
      mu[ci] = static_cast<S>(s / static_cast<double>(m));
      double v = 0;
      for (int ni = 0; ni < n; ++ni) {
        const S* src = x.ptr() + (static_cast<long long>(ni) * c + ci) * plane;
        for (long long i = 0; i < plane; ++i) {
          const double d = src[i] - mu[ci];
          v += d * d;
        }
      }
      var[ci] = static_cast<S>(v / static_cast<double>(m));
    }
    if (observed) {
      observed->mean.assign(mu.begin(), mu.end());
      observed->var.assign(var.begin(), var.end());
    }
  } else {
    for (int ci = 0; ci < c; ++ci) {
      mu[ci] = running_mean[ci];
      var[ci] = running_var[ci];
    }
  }

  std::vector<S> inv_std(c), xhat(x.size());
  std::vector<S> out(x.size());
  for (int ci = 0; ci < c; ++ci) inv_std[ci] = S(1) / std::sqrt(var[ci] + eps);
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const S* src = x.ptr() + (static_cast<long long>(ni) * c + ci) * plane;
      S* xh = xhat.data() + (static_cast<long long>(ni) * c + ci) * plane;
      S* dst = out.data() + (static_cast<long long>(ni) * c + ci) * plane;
      const S gsc = gamma[ci], bsc = beta[ci], mc = mu[ci], is = inv_std[ci];
      for (long long i = 0; i < plane; ++i) {
        xh[i] = (src[i] - mc) * is;
        dst[i] = gsc * xh[i] + bsc;
      }
    }
  TensorT<S> r = detail::make_result(x.shape(), std::move(out));

  if (TapeT<S>* tape = merged_tape<S>({&x, &gamma, &beta})) {
    const int xn = x.node(), gn = gamma.node(), bn = beta.node();
    auto xh = std::make_shared<std::vector<S>>(std::move(xhat));
    auto istd = std::make_shared<std::vector<S>>(std::move(inv_std));
    TensorT<S> gv = gamma.detached();
    int id = tape->record(
        Op::batchnorm2d, {xn, gn, bn}, r.shape(),
        [xn, gn, bn, xh, istd, gv, n, c, plane, m, training](TapeT<S>& t,
                                                             const std::vector<S>& g) {
          std::vector<S> dgamma(c, S(0)), dbeta(c, S(0));
          for (int ni = 0; ni < n; ++ni)
            for (int ci = 0; ci < c; ++ci) {
              const S* gr = g.data() + (static_cast<long long>(ni) * c + ci) * plane;
              const S* xr = xh->data() + (static_cast<long long>(ni) * c + ci) * plane;
              for (long long i = 0; i < plane; ++i) {
                dbeta[ci] += gr[i];
                dgamma[ci] += gr[i] * xr[i];
              }
            }
          if (t.wants(xn)) {
            std::vector<S> gx(g.size());
            for (int ni = 0; ni < n; ++ni)
              for (int ci = 0; ci < c; ++ci) {
                const long long off = (static_cast<long long>(ni) * c + ci) * plane;
                const S scale = gv[ci] * (*istd)[ci];
                if (training) {
                  const S mg = dbeta[ci] / static_cast<S>(m);
                  const S mgx = dgamma[ci] / static_cast<S>(m);
                  for (long long i = 0; i < plane; ++i)
                    gx[off + i] = scale * (g[off + i] - mg - (*xh)[off + i] * mgx);
                } else {
                  for (long long i = 0; i < plane; ++i) gx[off + i] = scale * g[off + i];
                }
              }
            t.accumulate(xn, gx);
          }
          if (t.wants(gn)) t.accumulate(gn, dgamma);
          if (t.wants(bn)) t.accumulate(bn, dbeta);
        });
    tape->bind(r, id);
  }
  return r;
}

}  // namespace ganshot
