#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ganshot/grad_check.hpp"
#include "ganshot/ops.hpp"
#include "oracles.hpp"

using namespace ganshot;

namespace {

template <typename S>
TensorT<S> rand_t(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<S> d(numel(shape));
  for (auto& v : d) v = static_cast<S>(rng.uniform(lo, hi));
  return TensorT<S>(std::move(shape), std::move(d));
}

// Values with pairwise gaps >= 0.05 so max selections sit far from ties.
template <typename S>
TensorT<S> spread_t(Rng& rng, Shape shape) {
  const long long n = numel(shape);
  std::vector<int> perm(n);
  for (long long i = 0; i < n; ++i) perm[i] = static_cast<int>(i);
  rng.shuffle(perm);
  std::vector<S> d(n);
  for (long long i = 0; i < n; ++i) d[i] = static_cast<S>(perm[i] * 0.05 - 0.025 * n * 0.05);
  return TensorT<S>(std::move(shape), std::move(d));
}

// Scalar projection of an arbitrary-shaped op output for grad_check.
TensorT<double> project(TapeT<double>& tape, const TensorT<double>& y, uint64_t seed) {
  (void)tape;
  Rng rng(seed);
  TensorT<double> r = rand_t<double>(rng, y.shape(), -1.0, 1.0);
  return sum(mul(y, r));
}

double max_abs_diff(const TensorT<float>& a, const std::vector<float>& b) {
  double m = 0;
  REQUIRE(a.size() == static_cast<long long>(b.size()));
  for (long long i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace

TEST_CASE("activation and loss fixtures") {
  Tensor x({3}, {-2.0f, 0.0f, 3.0f});
  Tensor y = leaky_relu(x);
  CHECK(y[0] == doctest::Approx(-0.02).epsilon(1e-6));
  CHECK(y[1] == 0.0f);
  CHECK(y[2] == 3.0f);

  Tensor s = sigmoid(Tensor({1}, {std::log(3.0f)}));
  CHECK(s.item() == doctest::Approx(0.75).epsilon(1e-6));

  Tensor t = tanh(Tensor({1}, {0.0f}));
  CHECK(t.item() == 0.0f);

  Tensor b = bce_loss(Tensor({1}, {0.5f}), Tensor({1}, {1.0f}));
  CHECK(b.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  Tensor bw = bce_loss(Tensor({2}, {0.5f, 0.5f}), Tensor({2}, {1.0f, 0.0f}),
                       Tensor({2}, {2.0f, 0.0f}));
  CHECK(bw.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  CHECK_THROWS_AS(leaky_relu(x, ActivationConfig{-0.5f, false}), ContractError);
  CHECK_THROWS_AS(bce_loss(Tensor({2}), Tensor({3})), DimensionError);
  CHECK_THROWS_AS(
      bce_loss(Tensor({1}, {0.5f}), Tensor({1}, {1.0f}), Tensor({1}, {-1.0f})),
      InputError);
}

TEST_CASE("convolution matches the padded-buffer reference on both algorithms") {
  struct Geom {
    Shape x, k;
    int stride, pad;
  };
  const std::vector<Geom> geoms = {
      {{2, 3, 8, 8}, {4, 3, 3, 3}, 1, 1},  {{1, 2, 7, 5}, {3, 2, 3, 3}, 2, 1},
      {{2, 1, 6, 6}, {2, 1, 4, 4}, 2, 1},  {{1, 4, 4, 4}, {1, 4, 4, 4}, 1, 0},
      {{3, 2, 9, 9}, {2, 2, 5, 5}, 3, 2},  {{1, 1, 1, 1}, {1, 1, 1, 1}, 1, 0},
  };
  Rng rng(11);
  for (const auto& g : geoms) {
    Tensor x = rand_t<float>(rng, g.x);
    Tensor k = rand_t<float>(rng, g.k);
    auto ref = oracle::conv2d<float>(x.ptr(), g.x, k.ptr(), g.k, g.stride, g.pad);
    Tensor direct = conv2d(x, k, std::nullopt, g.stride, g.pad, ConvAlgo::direct);
    Tensor gemm = conv2d(x, k, std::nullopt, g.stride, g.pad, ConvAlgo::im2col);
    CHECK(max_abs_diff(direct, ref) <= 1e-5);
    CHECK(max_abs_diff(gemm, ref) <= 1e-5);
    double route_gap = 0;
    for (long long i = 0; i < direct.size(); ++i)
      route_gap = std::max(route_gap, std::abs(static_cast<double>(direct[i]) - gemm[i]));
    CHECK(route_gap <= 1e-5);
  }
}

TEST_CASE("transposed convolution matches the dilation+flip reference on both algorithms") {
  struct Geom {
    Shape x, k;
    int stride, pad;
  };
  const std::vector<Geom> geoms = {
      {{2, 4, 4, 4}, {4, 3, 4, 4}, 2, 1}, {{1, 3, 1, 1}, {3, 2, 4, 4}, 1, 0},
      {{1, 2, 5, 3}, {2, 2, 3, 3}, 2, 1}, {{2, 1, 6, 6}, {1, 1, 2, 2}, 2, 0},
  };
  Rng rng(13);
  for (const auto& g : geoms) {
    Tensor x = rand_t<float>(rng, g.x);
    Tensor k = rand_t<float>(rng, g.k);
    auto ref = oracle::conv_transpose2d<float>(x.ptr(), g.x, k.ptr(), g.k, g.stride, g.pad);
    Tensor direct = conv_transpose2d(x, k, g.stride, g.pad, ConvAlgo::direct);
    Tensor gemm = conv_transpose2d(x, k, g.stride, g.pad, ConvAlgo::im2col);
    CHECK(max_abs_diff(direct, ref) <= 1e-5);
    CHECK(max_abs_diff(gemm, ref) <= 1e-5);
  }
}

TEST_CASE("transposed convolution is the adjoint of convolution") {
  Rng rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    // geometries chosen so the conv output size has no floor truncation,
    // otherwise the two maps act on different spaces
    const int stride = 1 + trial % 2, pad = trial % 3 == 0 ? 0 : 1;
    const int h = stride * 3 + 3 - 2 * pad;
    Tensor x = rand_t<float>(rng, {2, 3, h, h});
    Tensor k = rand_t<float>(rng, {4, 3, 3, 3});
    Tensor cx = conv2d(x, k, std::nullopt, stride, pad);
    Tensor y = rand_t<float>(rng, cx.shape());
    Tensor ty = conv_transpose2d(y, k, stride, pad);
    REQUIRE(same_shape(ty, x));
    double lhs = 0, rhs = 0;
    for (long long i = 0; i < cx.size(); ++i) lhs += static_cast<double>(cx[i]) * y[i];
    for (long long i = 0; i < x.size(); ++i) rhs += static_cast<double>(x[i]) * ty[i];
    CHECK(std::abs(lhs - rhs) <= 1e-4 * std::max(1.0, std::abs(rhs)));
  }
}

TEST_CASE("conv shape errors") {
  Tensor x({1, 3, 8, 8});
  CHECK_THROWS_AS(conv2d(x, Tensor({4, 2, 3, 3}), std::nullopt, 1, 1), DimensionError);
  CHECK_THROWS_AS(conv2d(x, Tensor({4, 3, 9, 9}), std::nullopt, 1, 0), DimensionError);
  CHECK_THROWS_AS(conv2d(x, Tensor({4, 3, 3, 3}), std::nullopt, 0, 1), ContractError);
  CHECK_THROWS_AS(conv_transpose2d(x, Tensor({4, 2, 3, 3}), 1, 1), DimensionError);
  CHECK_THROWS_AS(conv_transpose2d(Tensor({1, 3, 1, 1}), Tensor({3, 2, 2, 2}), 1, 1),
                  DimensionError);
}

TEST_CASE("gradients match central differences on every op") {
  constexpr double tol = 1e-4;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    {
      // elementwise arithmetic and scale_shift
      auto a = rand_t<double>(rng, {3, 4});
      auto b = rand_t<double>(rng, {3, 4});
      a.set_requires_grad(true);
      b.set_requires_grad(true);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, add(in[0], in[1]), seed);
            }, {a, b}) < tol);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, sub(in[0], in[1]), seed);
            }, {a, b}) < tol);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, mul(in[0], in[1]), seed);
            }, {a, b}) < tol);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, scale_shift(in[0], 1.7, -0.3), seed);
            }, {a}) < tol);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              (void)tp;
              return mean(in[0]);
            }, {a}) < tol);
    }
    {
      // activations away from their kinks
      std::vector<double> vals(24);
      for (auto& v : vals) {
        v = rng.uniform(0.05, 1.5);
        if (rng.uniform() < 0.5) v = -v;
      }
      TensorT<double> x({2, 12}, vals);
      x.set_requires_grad(true);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, leaky_relu(in[0]), seed);
            }, {x}) < tol);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, sigmoid(in[0]), seed);
            }, {x}) < tol);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, tanh(in[0]), seed);
            }, {x}) < tol);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, softmax(in[0]), seed);
            }, {x}) < tol);
    }
    {
      // bce away from the clamp boundaries, both prediction and target sides
      auto o = rand_t<double>(rng, {8}, 0.1, 0.9);
      auto t = rand_t<double>(rng, {8}, 0.0, 1.0);
      auto w = rand_t<double>(rng, {8}, 0.0, 2.0);
      o.set_requires_grad(true);
      t.set_requires_grad(true);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              (void)tp;
              return bce_loss(in[0], in[1]);
            }, {o, t}) < tol);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              (void)tp;
              return bce_loss(in[0], in[1], w);
            }, {o, t}) < tol);
    }
    {
      // smooth_l1 with differences spread across both regimes
      auto p = rand_t<double>(rng, {10}, -2.5, 2.5);
      auto t = rand_t<double>(rng, {10}, -0.5, 0.5);
      p.set_requires_grad(true);
      t.set_requires_grad(true);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, smooth_l1(in[0], in[1]), seed);
            }, {p, t}) < tol);
    }
    {
      // matmul and linear
      auto a = rand_t<double>(rng, {3, 4});
      auto b = rand_t<double>(rng, {4, 2});
      auto bias = rand_t<double>(rng, {2});
      a.set_requires_grad(true);
      b.set_requires_grad(true);
      bias.set_requires_grad(true);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, matmul(in[0], in[1]), seed);
            }, {a, b}) < tol);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, linear(in[0], in[1], in[2]), seed);
            }, {a, b, bias}) < tol);
    }
    {
      // conv2d (both algorithms) and conv_transpose2d
      auto x = rand_t<double>(rng, {2, 2, 5, 5});
      auto k = rand_t<double>(rng, {3, 2, 3, 3});
      auto bias = rand_t<double>(rng, {3});
      x.set_requires_grad(true);
      k.set_requires_grad(true);
      bias.set_requires_grad(true);
      for (ConvAlgo algo : {ConvAlgo::direct, ConvAlgo::im2col}) {
        CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
                return project(tp, conv2d(in[0], in[1], in[2], 2, 1, algo), seed);
              }, {x, k, bias}) < tol);
      }
      auto kt = rand_t<double>(rng, {2, 3, 4, 4});
      kt.set_requires_grad(true);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, conv_transpose2d(in[0], in[1], 2, 1), seed);
            }, {x, kt}) < tol);
    }
    {
      // maxpool with well-separated values
      auto x = spread_t<double>(rng, {2, 2, 6, 6});
      x.set_requires_grad(true);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, maxpool2d(in[0], 2, 2), seed);
            }, {x}) < tol);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, maxpool2d(in[0], 3, 1), seed);
            }, {x}) < tol);
    }
    {
      // batchnorm in both modes
      auto x = rand_t<double>(rng, {3, 2, 4, 4});
      auto gamma = rand_t<double>(rng, {2}, 0.5, 1.5);
      auto beta = rand_t<double>(rng, {2});
      TensorT<double> rm({2}, {0.1, -0.2});
      TensorT<double> rv({2}, {1.3, 0.8});
      x.set_requires_grad(true);
      gamma.set_requires_grad(true);
      beta.set_requires_grad(true);
      for (bool training : {true, false}) {
        CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
                return project(tp, batchnorm2d(in[0], in[1], in[2], rm, rv, training), seed);
              }, {x, gamma, beta}) < tol);
      }
    }
    {
      // shape ops
      auto x = rand_t<double>(rng, {2, 3, 4});
      auto y = rand_t<double>(rng, {2, 2, 4});
      x.set_requires_grad(true);
      y.set_requires_grad(true);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, reshape(in[0], {6, 4}), seed);
            }, {x}) < tol);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, permute(in[0], {2, 0, 1}), seed);
            }, {x}) < tol);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, slice_last(in[0], 1, 2), seed);
            }, {x}) < tol);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, concat<double>({in[0], in[1]}, 1), seed);
            }, {x, y}) < tol);
      auto img = rand_t<double>(rng, {1, 2, 3, 3});
      img.set_requires_grad(true);
      CHECK(grad_check([&](TapeT<double>& tp, std::vector<TensorT<double>>& in) {
              return project(tp, upsample_nearest(in[0], 2), seed);
            }, {img}) < tol);
    }
  }
}

TEST_CASE("permute, slice and concat value semantics") {
  Tensor t({2, 3}, {0, 1, 2, 3, 4, 5});
  Tensor tt = permute(t, {1, 0});
  CHECK(tt.shape() == Shape{3, 2});
  CHECK(tt[0] == 0.0f);
  CHECK(tt[1] == 3.0f);
  CHECK(tt[2] == 1.0f);
  CHECK(tt[5] == 5.0f);

  Tensor nchw({1, 2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  Tensor nhwc = permute(nchw, {0, 2, 3, 1});
  CHECK(nhwc.shape() == Shape{1, 2, 2, 2});
  CHECK(nhwc[0] == 0.0f);  // (h0,w0,c0)
  CHECK(nhwc[1] == 4.0f);  // (h0,w0,c1)
  CHECK(nhwc[2] == 1.0f);  // (h0,w1,c0)

  Tensor s = slice_last(t, 1, 2);
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s[0] == 1.0f);
  CHECK(s[3] == 5.0f);

  Tensor c = concat<float>({t, t}, 1);
  CHECK(c.shape() == Shape{2, 6});
  CHECK(c[3] == 0.0f);
  CHECK(c[11] == 5.0f);
  Tensor c0 = concat<float>({t, t}, 0);
  CHECK(c0.shape() == Shape{4, 3});
  CHECK(c0[6] == 0.0f);
  CHECK_THROWS_AS(concat<float>({t, Tensor({2, 4})}, 0), DimensionError);
}

TEST_CASE("tape accumulates over reused tensors and skips constants") {
  Tape tape;
  Tensor x({2}, {1.0f, 2.0f});
  x.set_requires_grad(true);
  tape.watch(x);
  Tensor c({2}, {3.0f, 5.0f});  // never watched: off-tape constant
  Tensor y = sum(mul(add(x, x), c));
  tape.backward(y);
  const std::vector<float>* g = tape.gradient(x);
  REQUIRE(g != nullptr);
  CHECK((*g)[0] == doctest::Approx(6.0f));
  CHECK((*g)[1] == doctest::Approx(10.0f));
  CHECK(tape.gradient(c) == nullptr);
}

TEST_CASE("gradient flows through ops whose other operand is frozen") {
  Tape tape;
  Tensor x({3}, {0.2f, -0.4f, 0.9f});
  x.set_requires_grad(true);
  tape.watch(x);
  Tensor w({3}, {1.0f, 2.0f, 3.0f});
  w.set_requires_grad(false);
  tape.watch(w);  // on tape but not a gradient leaf
  Tensor y = sum(mul(x, w));
  tape.backward(y);
  REQUIRE(tape.gradient(x) != nullptr);
  CHECK((*tape.gradient(x))[2] == doctest::Approx(3.0f));
  CHECK(tape.gradient(w) == nullptr);
}

TEST_CASE("tape misuse is rejected") {
  Tape t1, t2;
  Tensor a({2}, {1, 2}), b({2}, {3, 4});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  t1.watch(a);
  t2.watch(b);
  CHECK_THROWS_AS(add(a, b), ContractError);
  CHECK_THROWS_AS(t2.watch(a), ContractError);

  Tensor y = add(a, a);
  CHECK_THROWS_AS(t1.backward(y), ContractError);  // non-scalar loss
}

TEST_CASE("detached values stop gradient flow") {
  Tape tape;
  Tensor x({2}, {1.0f, 2.0f});
  x.set_requires_grad(true);
  tape.watch(x);
  Tensor y = sum(mul(x.detached(), x));
  tape.backward(y);
  REQUIRE(tape.gradient(x) != nullptr);
  CHECK((*tape.gradient(x))[0] == doctest::Approx(1.0f));  // only the live path
}
