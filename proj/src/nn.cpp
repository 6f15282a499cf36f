#include "ganshot/nn.hpp"

namespace ganshot {

ModelSpec& ModelSpec::conv(int in_ch, int out_ch, int k, int stride, int pad, bool bias) {
  LayerSpec l;
  l.kind = LayerKind::conv;
  l.in_ch = in_ch;
  l.out_ch = out_ch;
  l.kernel = k;
  l.stride = stride;
  l.pad = pad;
  l.bias = bias;
  layers.push_back(l);
  return *this;
}

ModelSpec& ModelSpec::conv_transpose(int in_ch, int out_ch, int k, int stride, int pad) {
  LayerSpec l;
  l.kind = LayerKind::conv_transpose;
  l.in_ch = in_ch;
  l.out_ch = out_ch;
  l.kernel = k;
  l.stride = stride;
  l.pad = pad;
  l.bias = false;
  layers.push_back(l);
  return *this;
}

ModelSpec& ModelSpec::batchnorm(int channels) {
  LayerSpec l;
  l.kind = LayerKind::batchnorm;
  l.channels = channels;
  layers.push_back(l);
  return *this;
}

ModelSpec& ModelSpec::activation(Act a, float negative_slope) {
  LayerSpec l;
  l.kind = LayerKind::activation;
  l.act = a;
  l.negative_slope = negative_slope;
  layers.push_back(l);
  return *this;
}

ModelSpec& ModelSpec::maxpool(int k, int stride) {
  LayerSpec l;
  l.kind = LayerKind::maxpool;
  l.kernel = k;
  l.stride = stride;
  layers.push_back(l);
  return *this;
}

ModelSpec& ModelSpec::flatten() {
  LayerSpec l;
  l.kind = LayerKind::flatten;
  layers.push_back(l);
  return *this;
}

ModelSpec& ModelSpec::dense(int in_f, int out_f, bool bias) {
  LayerSpec l;
  l.kind = LayerKind::dense;
  l.in_ch = in_f;
  l.out_ch = out_f;
  l.bias = bias;
  layers.push_back(l);
  return *this;
}

namespace {

[[noreturn]] void layer_error(size_t idx, const std::string& what) {
  throw BuildError("layer " + std::to_string(idx) + ": " + what);
}

}  // namespace

std::vector<Shape> propagate_shapes(const ModelSpec& spec) {
  if (spec.input.empty()) throw BuildError("model has no declared input shape");
  std::vector<Shape> shapes{spec.input};
  Shape cur = spec.input;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::conv: {
        if (cur.size() != 3) layer_error(i, "conv needs [C,H,W] input, got " + shape_str(cur));
        if (cur[0] != l.in_ch)
          layer_error(i, "conv expects " + std::to_string(l.in_ch) + " channels, got " +
                             shape_str(cur));
        const int h = cur[1] + 2 * l.pad - l.kernel, w = cur[2] + 2 * l.pad - l.kernel;
        if (h < 0 || w < 0) layer_error(i, "conv kernel exceeds input " + shape_str(cur));
        cur = {l.out_ch, h / l.stride + 1, w / l.stride + 1};
        break;
      }
      case LayerKind::conv_transpose: {
        if (cur.size() != 3)
          layer_error(i, "conv_transpose needs [C,H,W] input, got " + shape_str(cur));
        if (cur[0] != l.in_ch)
          layer_error(i, "conv_transpose expects " + std::to_string(l.in_ch) +
                             " channels, got " + shape_str(cur));
        const int h = (cur[1] - 1) * l.stride - 2 * l.pad + l.kernel;
        const int w = (cur[2] - 1) * l.stride - 2 * l.pad + l.kernel;
        if (h <= 0 || w <= 0) layer_error(i, "conv_transpose output collapses");
        cur = {l.out_ch, h, w};
        break;
      }
      case LayerKind::batchnorm:
        if (cur.size() != 3 || cur[0] != l.channels)
          layer_error(i, "batchnorm over " + std::to_string(l.channels) +
                             " channels does not fit " + shape_str(cur));
        break;
      case LayerKind::activation:
        break;
      case LayerKind::maxpool: {
        if (cur.size() != 3) layer_error(i, "maxpool needs [C,H,W] input, got " + shape_str(cur));
        if (cur[1] < l.kernel || cur[2] < l.kernel)
          layer_error(i, "maxpool window exceeds input " + shape_str(cur));
        cur = {cur[0], (cur[1] - l.kernel) / l.stride + 1, (cur[2] - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::flatten: {
        long long n = numel(cur);
        cur = {static_cast<int>(n)};
        break;
      }
      case LayerKind::dense:
        if (cur.size() != 1 || cur[0] != l.in_ch)
          layer_error(i, "dense expects " + std::to_string(l.in_ch) + " features, got " +
                             shape_str(cur));
        cur = {l.out_ch};
        break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

Param& ParamSet::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("no parameter named " + name);
  return it->second;
}

const Param& ParamSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("no parameter named " + name);
  return it->second;
}

void ParamSet::insert(const std::string& name, Tensor value, bool trainable) {
  if (entries_.count(name)) throw ContractError("duplicate parameter name " + name);
  entries_[name] = Param{std::move(value), trainable, false};
}

void ParamSet::set_frozen(bool frozen) {
  for (auto& [name, p] : entries_) p.frozen = frozen;
}

void ParamSet::set_frozen(const std::string& prefix, bool frozen) {
  for (auto& [name, p] : entries_)
    if (name.rfind(prefix, 0) == 0) p.frozen = frozen;
}

void ParamSet::watch_all(Tape& tape) {
  for (auto& [name, p] : entries_) {
    p.value.unbind();
    if (p.trainable && !p.frozen) {
      p.value.set_requires_grad(true);
      tape.watch(p.value);
    } else {
      p.value.set_requires_grad(false);
    }
  }
}

std::map<std::string, Tensor> ParamSet::tensors() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, p] : entries_) out[name] = p.value.detached();
  return out;
}

ScopedFreeze::ScopedFreeze(ParamSet& params) : params_(params) {
  for (auto& [name, p] : params_) {
    saved_.emplace_back(name, p.frozen);
    p.frozen = true;
  }
}

ScopedFreeze::~ScopedFreeze() {
  for (auto& [name, frozen] : saved_) params_.at(name).frozen = frozen;
}

namespace {

Tensor normal_tensor(Shape shape, Rng& rng, float stddev) {
  std::vector<float> data(numel(shape));
  for (auto& v : data) v = static_cast<float>(rng.normal() * stddev);
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

void init_params_into(ParamSet& params, const ModelSpec& spec, Rng& rng,
                      const std::string& prefix) {
  propagate_shapes(spec);
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string base = prefix + "L" + std::to_string(i) + ".";
    switch (l.kind) {
      case LayerKind::conv:
        params.insert(base + "weight",
                      normal_tensor({l.out_ch, l.in_ch, l.kernel, l.kernel}, rng, 0.02f));
        if (l.bias) params.insert(base + "bias", Tensor({l.out_ch}));
        break;
      case LayerKind::conv_transpose:
        params.insert(base + "weight",
                      normal_tensor({l.in_ch, l.out_ch, l.kernel, l.kernel}, rng, 0.02f));
        break;
      case LayerKind::batchnorm:
        params.insert(base + "gamma", Tensor::full({l.channels}, 1.0f));
        params.insert(base + "beta", Tensor({l.channels}));
        params.insert(base + "running_mean", Tensor({l.channels}), false);
        params.insert(base + "running_var", Tensor::full({l.channels}, 1.0f), false);
        break;
      case LayerKind::dense:
        params.insert(base + "weight", normal_tensor({l.in_ch, l.out_ch}, rng, 0.02f));
        if (l.bias) params.insert(base + "bias", Tensor({l.out_ch}));
        break;
      case LayerKind::activation:
      case LayerKind::maxpool:
      case LayerKind::flatten:
        break;
    }
  }
}

ParamSet init_params(const ModelSpec& spec, uint64_t seed) {
  ParamSet params;
  Rng rng(seed);
  init_params_into(params, spec, rng, "");
  return params;
}

Tensor forward(const ModelSpec& spec, ParamSet& params, const Tensor& input, Mode mode,
               const std::string& prefix, std::vector<Tensor>* taps) {
  if (input.rank() != static_cast<int>(spec.input.size()) + 1)
    throw DimensionError("forward: input " + shape_str(input.shape()) +
                         " is not a batch of " + shape_str(spec.input));
  for (size_t i = 0; i < spec.input.size(); ++i)
    if (input.dim(static_cast<int>(i) + 1) != spec.input[i])
      throw DimensionError("forward: input " + shape_str(input.shape()) +
                           " does not match declared " + shape_str(spec.input));

  Tensor x = input;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string base = prefix + "L" + std::to_string(i) + ".";
    switch (l.kind) {
      case LayerKind::conv: {
        std::optional<Tensor> bias;
        if (l.bias) bias = params.at(base + "bias").value;
        x = conv2d(x, params.at(base + "weight").value, bias, l.stride, l.pad);
        break;
      }
      case LayerKind::conv_transpose:
        x = conv_transpose2d(x, params.at(base + "weight").value, l.stride, l.pad);
        break;
      case LayerKind::batchnorm: {
        Param& gamma = params.at(base + "gamma");
        Param& beta = params.at(base + "beta");
        Param& rmean = params.at(base + "running_mean");
        Param& rvar = params.at(base + "running_var");
        BatchNormStats stats;
        const bool training = mode == Mode::train;
        x = batchnorm2d(x, gamma.value, beta.value, rmean.value, rvar.value, training, 1e-5f,
                        &stats);
        if (training && !gamma.frozen) {
          const float momentum = 0.1f;
          std::vector<float> nm(l.channels), nv(l.channels);
          for (int c = 0; c < l.channels; ++c) {
            nm[c] = (1 - momentum) * rmean.value[c] + momentum * stats.mean[c];
            nv[c] = (1 - momentum) * rvar.value[c] + momentum * stats.var[c];
          }
          rmean.value = Tensor({l.channels}, std::move(nm));
          rvar.value = Tensor({l.channels}, std::move(nv));
        }
        break;
      }
      case LayerKind::activation:
        switch (l.act) {
          case Act::leaky_relu: x = leaky_relu(x, {l.negative_slope, false}); break;
          case Act::sigmoid: x = sigmoid(x); break;
          case Act::tanh: x = tanh(x); break;
        }
        break;
      case LayerKind::maxpool:
        x = maxpool2d(x, l.kernel, l.stride);
        break;
      case LayerKind::flatten:
        x = reshape(x, {x.dim(0), static_cast<int>(x.size() / x.dim(0))});
        break;
      case LayerKind::dense: {
        std::optional<Tensor> bias;
        if (l.bias) bias = params.at(base + "bias").value;
        x = linear(x, params.at(base + "weight").value, bias);
        break;
      }
    }
    if (taps) taps->push_back(x);
  }
  return x;
}

GradMap collect_gradients(const Tape& tape, const ParamSet& params) {
  GradMap grads;
  for (const auto& [name, p] : params) {
    if (!p.trainable || p.frozen) continue;
    if (const std::vector<float>* g = tape.gradient(p.value)) grads[name] = *g;
  }
  return grads;
}

void adam_step(ParamSet& params, const GradMap& grads, AdamState& state) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(state.cfg.beta1), state.t);
  const double bc2 = 1.0 - std::pow(static_cast<double>(state.cfg.beta2), state.t);
  for (auto& [name, p] : params) {
    if (!p.trainable || p.frozen) continue;
    auto git = grads.find(name);
    if (git == grads.end())
      throw ContractError("no gradient for trainable parameter " + name);
    const std::vector<float>& g = git->second;
    if (static_cast<long long>(g.size()) != p.value.size())
      throw ContractError("gradient size mismatch for " + name);
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(g.size(), 0.0f);
    if (v.empty()) v.assign(g.size(), 0.0f);
    std::vector<float> next(g.size());
    const float b1 = state.cfg.beta1, b2 = state.cfg.beta2;
    for (size_t i = 0; i < g.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      next[i] = static_cast<float>(p.value[static_cast<long long>(i)] -
                                   state.cfg.lr * mhat / (std::sqrt(vhat) + state.cfg.eps));
    }
    p.value = Tensor(p.value.shape(), std::move(next));
  }
}

}  // namespace ganshot
