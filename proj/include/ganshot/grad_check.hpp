#pragma once

#include <vector>

#include "ganshot/tape.hpp"

// Numerical gradient verification. Runs the function under test in double
// precision and compares reverse-mode gradients against central differences.

namespace ganshot {

// f receives a live tape plus freshly watched copies of the inputs and must
// return a scalar tensor computed through tape-recorded ops. Inputs with
// requires_grad=false participate in the forward pass but are not perturbed.
// Returns max over perturbed elements of |analytic - numeric| / max(1, |numeric|).
template <typename Fn>
double grad_check(Fn&& f, const std::vector<TensorT<double>>& inputs, double eps = 1e-5) {
  auto clone_inputs = [&](int mutate_k, long long mutate_i, double delta) {
    std::vector<TensorT<double>> copies;
    copies.reserve(inputs.size());
    for (size_t k = 0; k < inputs.size(); ++k) {
      std::vector<double> data(inputs[k].ptr(), inputs[k].ptr() + inputs[k].size());
      if (static_cast<int>(k) == mutate_k) data[mutate_i] += delta;
      TensorT<double> t(inputs[k].shape(), std::move(data));
      t.set_requires_grad(inputs[k].requires_grad());
      copies.push_back(std::move(t));
    }
    return copies;
  };

  auto scalar_value = [&](std::vector<TensorT<double>>& copies) {
    TapeT<double> tape;
    for (auto& t : copies) tape.watch(t);
    TensorT<double> y = f(tape, copies);
    if (y.size() != 1) throw ContractError("grad_check: function under test must return a scalar");
    return y.item();
  };

  // analytic gradients, one backward pass
  std::vector<std::vector<double>> analytic(inputs.size());
  {
    TapeT<double> tape;
    auto copies = clone_inputs(-1, 0, 0.0);
    for (auto& t : copies) tape.watch(t);
    TensorT<double> y = f(tape, copies);
    if (y.size() != 1) throw ContractError("grad_check: function under test must return a scalar");
    tape.backward(y);
    for (size_t k = 0; k < copies.size(); ++k) {
      if (!copies[k].requires_grad()) continue;
      const std::vector<double>* g = tape.gradient(copies[k]);
      analytic[k] = g ? *g : std::vector<double>(copies[k].size(), 0.0);
    }
  }

  double worst = 0.0;
  for (size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    for (long long i = 0; i < inputs[k].size(); ++i) {
      auto plus = clone_inputs(static_cast<int>(k), i, eps);
      auto minus = clone_inputs(static_cast<int>(k), i, -eps);
      const double numeric = (scalar_value(plus) - scalar_value(minus)) / (2.0 * eps);
      const double err = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace ganshot
