#include "ganshot/gan.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <iterator>
#include <numeric>
#include <set>

namespace ganshot {

namespace {

// Number of stride-2 stages between the 4x4 seed map and the full image.
int pyramid_depth(int image_size) {
  if (image_size < 8 || image_size % 4 != 0)
    throw BuildError("image size " + std::to_string(image_size) +
                     " is not 4 times a power of two");
  const int ratio = image_size / 4;
  if ((ratio & (ratio - 1)) != 0)
    throw BuildError("image size " + std::to_string(image_size) +
                     " is not 4 times a power of two");
  int d = 0;
  for (int r = ratio; r > 1; r >>= 1) ++d;
  return d;
}

void validate_config(const GanConfig& cfg) {
  if (cfg.noise_dim < 1 || cfg.channels < 1 || cfg.base_feature_maps < 1)
    throw BuildError("noise_dim, channels and base_feature_maps must be positive");
  if (cfg.upscale_factor != 2 && cfg.upscale_factor != 4)
    throw BuildError("upscale factor must be 2 or 4");
  if (cfg.batch_size < 1 || cfg.epochs < 0)
    throw BuildError("batch_size must be positive and epochs non-negative");
  pyramid_depth(cfg.image_size);
}

constexpr float kGanSlope = 0.2f;

GanModel make_model(const GanConfig& cfg, GanKind kind, Rng& rng) {
  GanModel m;
  m.cfg = cfg;
  m.kind = kind;
  auto [gen, disc] = build_dcgan(cfg);
  m.gen = kind == GanKind::dcgan ? gen : build_enhancer(cfg);
  m.disc = disc;
  init_params_into(m.params, m.gen, rng, "gen.");
  init_params_into(m.params, m.disc, rng, "disc.");
  return m;
}

double tensor_mean(const Tensor& t) {
  double acc = 0;
  for (long long i = 0; i < t.size(); ++i) acc += t[i];
  return acc / static_cast<double>(t.size());
}

Tensor stack_images(const std::vector<Tensor>& images, const std::vector<int>& order, int start,
                    int count, bool to_pm1) {
  const Shape& unit = images[static_cast<size_t>(order[start])].shape();
  const long long per = numel(unit);
  Shape out_shape = unit;
  out_shape.insert(out_shape.begin(), count);
  std::vector<float> data(static_cast<size_t>(per) * count);
  for (int b = 0; b < count; ++b) {
    const Tensor& img = images[static_cast<size_t>(order[start + b])];
    if (img.shape() != unit)
      throw InputError("dataset images disagree in shape: " + shape_str(img.shape()) + " vs " +
                       shape_str(unit));
    for (long long i = 0; i < per; ++i)
      data[static_cast<size_t>(b) * per + i] = to_pm1 ? img[i] * 2.0f - 1.0f : img[i];
  }
  return Tensor(std::move(out_shape), std::move(data));
}

}  // namespace

std::pair<ModelSpec, ModelSpec> build_dcgan(const GanConfig& cfg) {
  validate_config(cfg);
  const int d = pyramid_depth(cfg.image_size);
  const int base = cfg.base_feature_maps;

  ModelSpec gen;
  gen.input = {cfg.noise_dim, 1, 1};
  gen.conv_transpose(cfg.noise_dim, base << (d - 1), 4, 1, 0)
      .batchnorm(base << (d - 1))
      .activation(Act::leaky_relu, kGanSlope);
  for (int i = d - 1; i >= 1; --i)
    gen.conv_transpose(base << i, base << (i - 1), 4, 2, 1)
        .batchnorm(base << (i - 1))
        .activation(Act::leaky_relu, kGanSlope);
  gen.conv_transpose(base, cfg.channels, 4, 2, 1).activation(Act::tanh);

  ModelSpec disc;
  disc.input = {cfg.channels, cfg.image_size, cfg.image_size};
  disc.conv(cfg.channels, base, 4, 2, 1).activation(Act::leaky_relu, kGanSlope);
  for (int i = 1; i < d; ++i)
    disc.conv(base << (i - 1), base << i, 4, 2, 1)
        .batchnorm(base << i)
        .activation(Act::leaky_relu, kGanSlope);
  disc.conv(base << (d - 1), 1, 4, 1, 0).activation(Act::sigmoid).flatten();
  return {gen, disc};
}

ModelSpec build_enhancer(const GanConfig& cfg) {
  validate_config(cfg);
  const int base = cfg.base_feature_maps;
  ModelSpec spec;
  spec.input = {cfg.channels + 1, cfg.image_size, cfg.image_size};
  spec.conv(cfg.channels + 1, base, 3, 1, 1).batchnorm(base).activation(Act::leaky_relu, kGanSlope);
  for (int i = 0; i < 2; ++i)
    spec.conv(base, base, 3, 1, 1).batchnorm(base).activation(Act::leaky_relu, kGanSlope);
  spec.conv(base, cfg.channels, 3, 1, 1).activation(Act::tanh);
  return spec;
}

GanModel make_gan(const GanConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  return make_model(cfg, GanKind::dcgan, rng);
}

GanModel make_enhancer_gan(const GanConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  return make_model(cfg, GanKind::enhancer, rng);
}

float gan_value(const Tensor& d_real, const Tensor& d_fake) {
  auto mean_log = [](const Tensor& t, bool complement) {
    double acc = 0;
    for (long long i = 0; i < t.size(); ++i) {
      double v = std::clamp(static_cast<double>(t[i]), 1e-7, 1.0 - 1e-7);
      acc += std::log(complement ? 1.0 - v : v);
    }
    return acc / static_cast<double>(t.size());
  };
  return static_cast<float>(mean_log(d_real, false) + mean_log(d_fake, true));
}

Tensor sample_noise(int n, const GanConfig& cfg, Rng& rng) {
  std::vector<float> data(static_cast<size_t>(n) * cfg.noise_dim);
  for (auto& v : data)
    v = static_cast<float>(cfg.gaussian_noise ? rng.normal() : rng.uniform());
  return Tensor({n, cfg.noise_dim, 1, 1}, std::move(data));
}

Tensor enhancer_input(const Tensor& low_res01, int factor, Rng& rng) {
  if (low_res01.rank() != 4)
    throw DimensionError("expected a [N,C,h,w] batch, got " + shape_str(low_res01.shape()));
  Tensor up = scale_shift(upsample_nearest(low_res01, factor), 2.0f, -1.0f);
  std::vector<float> noise(static_cast<size_t>(up.dim(0)) * up.dim(2) * up.dim(3));
  for (auto& v : noise) v = static_cast<float>(rng.uniform());
  Tensor noise_plane({up.dim(0), 1, up.dim(2), up.dim(3)}, std::move(noise));
  return concat<float>({up, noise_plane}, 1);
}

GanLossReport discriminator_step(GanModel& m, AdamState& opt, const Tensor& real,
                                 const Tensor& gen_input) {
  ScopedFreeze guard(m.params);
  m.params.set_frozen("disc.", false);
  Tape tape;
  m.params.watch_all(tape);

  Tensor fake = forward(m.gen, m.params, gen_input, Mode::train, "gen.");
  Tensor d_real = forward(m.disc, m.params, real, Mode::train, "disc.");
  Tensor d_fake = forward(m.disc, m.params, fake, Mode::train, "disc.");
  Tensor loss = add(bce_loss(d_real, Tensor::full(d_real.shape(), 1.0f)),
                    bce_loss(d_fake, Tensor::full(d_fake.shape(), 0.0f)));
  tape.backward(loss);
  adam_step(m.params, collect_gradients(tape, m.params), opt);

  GanLossReport report;
  report.d_loss = loss.item();
  report.d_real_mean = static_cast<float>(tensor_mean(d_real));
  report.d_fake_mean = static_cast<float>(tensor_mean(d_fake));
  report.value_v = gan_value(d_real, d_fake);
  return report;
}

GanLossReport generator_step(GanModel& m, AdamState& opt, const Tensor& gen_input,
                             const Tensor* recon_target01) {
  ScopedFreeze guard(m.params);
  m.params.set_frozen("gen.", false);
  Tape tape;
  m.params.watch_all(tape);

  Tensor out = forward(m.gen, m.params, gen_input, Mode::train, "gen.");
  Tensor d_out = forward(m.disc, m.params, out, Mode::train, "disc.");
  Tensor loss = bce_loss(d_out, Tensor::full(d_out.shape(), 1.0f));
  if (recon_target01) {
    Tensor recon = bce_loss(scale_shift(out, 0.5f, 0.5f), *recon_target01);
    loss = add(loss, scale_shift(recon, m.cfg.recon_weight, 0.0f));
  }
  tape.backward(loss);
  adam_step(m.params, collect_gradients(tape, m.params), opt);

  GanLossReport report;
  report.g_loss = loss.item();
  return report;
}

namespace {

GanTrainResult train_loop(GanModel model, const GanConfig& cfg, Rng& rng, size_t dataset_size,
                          const std::function<Tensor(const std::vector<int>&, int, int)>& reals,
                          const std::function<Tensor(const std::vector<int>&, int, int)>& inputs,
                          const std::function<const Tensor*(const std::vector<int>&, int, int,
                                                            Tensor&)>& recon) {
  GanTrainResult res{std::move(model), {}};
  AdamState opt_d, opt_g;
  opt_d.cfg = opt_g.cfg = cfg.adam;
  std::vector<int> order(dataset_size);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double d_loss = 0, g_loss = 0, value = 0, d_real = 0, d_fake = 0;
    int steps = 0;
    for (size_t start = 0; start < dataset_size; start += cfg.batch_size) {
      const int count = static_cast<int>(
          std::min<size_t>(cfg.batch_size, dataset_size - start));
      const int at = static_cast<int>(start);
      Tensor real = reals(order, at, count);
      auto df = discriminator_step(res.model, opt_d, real, inputs(order, at, count));
      Tensor target;
      const Tensor* target_ptr = recon(order, at, count, target);
      auto gf = generator_step(res.model, opt_g, inputs(order, at, count), target_ptr);
      d_loss += df.d_loss;
      g_loss += gf.g_loss;
      value += df.value_v;
      d_real += df.d_real_mean;
      d_fake += df.d_fake_mean;
      ++steps;
    }
    GanLossReport epoch_report;
    epoch_report.d_loss = static_cast<float>(d_loss / steps);
    epoch_report.g_loss = static_cast<float>(g_loss / steps);
    epoch_report.value_v = static_cast<float>(value / steps);
    epoch_report.d_real_mean = static_cast<float>(d_real / steps);
    epoch_report.d_fake_mean = static_cast<float>(d_fake / steps);
    res.epochs.push_back(epoch_report);
  }
  return res;
}

}  // namespace

GanTrainResult train_gan(const std::vector<Tensor>& images, const GanConfig& cfg, uint64_t seed) {
  if (images.empty()) throw InputError("training dataset is empty");
  const Shape expect{cfg.channels, cfg.image_size, cfg.image_size};
  if (images[0].shape() != expect)
    throw InputError("dataset images are " + shape_str(images[0].shape()) + ", config wants " +
                     shape_str(expect));
  Rng rng(seed);
  GanModel model = make_model(cfg, GanKind::dcgan, rng);
  return train_loop(
      std::move(model), cfg, rng, images.size(),
      [&](const std::vector<int>& order, int at, int n) {
        return stack_images(images, order, at, n, true);
      },
      [&](const std::vector<int>&, int, int n) { return sample_noise(n, cfg, rng); },
      [](const std::vector<int>&, int, int, Tensor&) -> const Tensor* { return nullptr; });
}

GanTrainResult train_enhancer(const std::vector<EnhancerPair>& pairs, const GanConfig& cfg,
                              uint64_t seed) {
  if (pairs.empty()) throw InputError("training dataset is empty");
  std::vector<Tensor> lows, highs;
  lows.reserve(pairs.size());
  highs.reserve(pairs.size());
  for (const auto& p : pairs) {
    const Shape expect_high{cfg.channels, cfg.image_size, cfg.image_size};
    const int low = cfg.image_size / cfg.upscale_factor;
    if (p.high_res.shape() != expect_high || p.low_res.shape() != Shape{cfg.channels, low, low})
      throw InputError("pair shapes " + shape_str(p.low_res.shape()) + " / " +
                       shape_str(p.high_res.shape()) + " do not match the config");
    lows.push_back(p.low_res);
    highs.push_back(p.high_res);
  }
  Rng rng(seed);
  GanModel model = make_model(cfg, GanKind::enhancer, rng);
  return train_loop(
      std::move(model), cfg, rng, pairs.size(),
      [&](const std::vector<int>& order, int at, int n) {
        return stack_images(highs, order, at, n, true);
      },
      [&](const std::vector<int>& order, int at, int n) {
        return enhancer_input(stack_images(lows, order, at, n, false), cfg.upscale_factor, rng);
      },
      [&](const std::vector<int>& order, int at, int n, Tensor& hold) -> const Tensor* {
        hold = stack_images(highs, order, at, n, false);
        return &hold;
      });
}

Tensor enhance(const GanModel& m, const Tensor& low_res01, uint64_t noise_seed) {
  if (m.kind != GanKind::enhancer)
    throw CheckpointError("checkpoint does not hold a conditional enhancer");
  const bool single = low_res01.rank() == 3;
  Tensor low = single ? reshape(low_res01, Shape{1, low_res01.dim(0), low_res01.dim(1),
                                                 low_res01.dim(2)})
                      : low_res01;
  if (low.rank() != 4)
    throw DimensionError("expected [C,h,w] or [N,C,h,w], got " + shape_str(low_res01.shape()));
  Rng rng(noise_seed);
  Tensor input = enhancer_input(low, m.cfg.upscale_factor, rng);
  ParamSet params = m.params;
  Tensor out = scale_shift(forward(m.gen, params, input, Mode::eval, "gen."), 0.5f, 0.5f);
  if (single) return reshape(out, Shape{out.dim(1), out.dim(2), out.dim(3)});
  return out;
}

Tensor extract_features(const GanModel& m, const Tensor& images01) {
  const bool single = images01.rank() == 3;
  Tensor x = single ? reshape(images01, Shape{1, images01.dim(0), images01.dim(1),
                                              images01.dim(2)})
                    : images01;
  if (x.rank() != 4 || x.dim(2) != m.cfg.image_size || x.dim(3) != m.cfg.image_size)
    throw DimensionError("expected images of size " + std::to_string(m.cfg.image_size) + "x" +
                         std::to_string(m.cfg.image_size) + ", got " +
                         shape_str(images01.shape()));
  x = scale_shift(x, 2.0f, -1.0f);
  ParamSet params = m.params;
  std::vector<Tensor> taps;
  forward(m.disc, params, x, Mode::eval, "disc.", &taps);

  std::vector<Tensor> pieces;
  for (size_t i = 0; i < m.disc.layers.size(); ++i) {
    const LayerSpec& layer = m.disc.layers[i];
    if (layer.kind != LayerKind::activation || layer.act != Act::leaky_relu) continue;
    Tensor t = taps[i];
    const int h = t.dim(2);
    if (h < 4 || h % 4 != 0)
      throw ContractError("activation map " + shape_str(t.shape()) +
                          " cannot be pooled to 4x4");
    if (h > 4) t = maxpool2d(t, h / 4, h / 4);
    pieces.push_back(reshape(t, Shape{t.dim(0), t.dim(1) * 16}));
  }
  Tensor features = concat(pieces, 1);
  if (single) return reshape(features, Shape{features.dim(1)});
  return features;
}

ProbeResult linear_probe(const Tensor& features, const std::vector<int>& labels, float l2) {
  if (features.rank() != 2)
    throw DimensionError("features must be [N,F], got " + shape_str(features.shape()));
  const int n = features.dim(0), f = features.dim(1);
  if (static_cast<size_t>(n) != labels.size())
    throw DimensionError("label count " + std::to_string(labels.size()) +
                         " does not match feature rows " + std::to_string(n));
  if (l2 < 0) throw InputError("l2 penalty must be non-negative");
  std::set<int> class_set(labels.begin(), labels.end());
  if (class_set.size() < 2) throw InputError("probe needs at least two classes");
  std::vector<int> classes(class_set.begin(), class_set.end());
  const int c = static_cast<int>(classes.size());

  std::vector<int> train_idx, hold_idx;
  for (int i = 0; i < n; ++i) (i % 5 == 0 ? hold_idx : train_idx).push_back(i);
  const int nt = static_cast<int>(train_idx.size());
  if (nt == 0) throw InputError("probe needs more than one sample");

  Eigen::MatrixXd x(nt, f + 1), y = Eigen::MatrixXd::Zero(nt, c);
  for (int r = 0; r < nt; ++r) {
    const int i = train_idx[static_cast<size_t>(r)];
    for (int j = 0; j < f; ++j) x(r, j) = features[static_cast<long long>(i) * f + j];
    x(r, f) = 1.0;
    const auto it = std::lower_bound(classes.begin(), classes.end(), labels[static_cast<size_t>(i)]);
    y(r, static_cast<int>(it - classes.begin())) = 1.0;
  }

  Eigen::MatrixXd w;
  if (nt <= f + 1) {
    Eigen::MatrixXd gram = x * x.transpose();
    gram.diagonal().array() += l2;
    w = x.transpose() * gram.ldlt().solve(y);
  } else {
    Eigen::MatrixXd normal = x.transpose() * x;
    normal.diagonal().array() += l2;
    w = normal.ldlt().solve(x.transpose() * y);
  }

  int correct = 0;
  for (int i : hold_idx) {
    Eigen::VectorXd row(f + 1);
    for (int j = 0; j < f; ++j) row(j) = features[static_cast<long long>(i) * f + j];
    row(f) = 1.0;
    Eigen::VectorXd scores = w.transpose() * row;
    int best = 0;
    for (int k = 1; k < c; ++k)
      if (scores(k) > scores(best)) best = k;
    if (classes[static_cast<size_t>(best)] == labels[static_cast<size_t>(i)]) ++correct;
  }

  ProbeResult res;
  std::vector<float> wdata(static_cast<size_t>(f + 1) * c);
  for (int r = 0; r < f + 1; ++r)
    for (int k = 0; k < c; ++k) wdata[static_cast<size_t>(r) * c + k] = static_cast<float>(w(r, k));
  res.weights = Tensor({f + 1, c}, std::move(wdata));
  res.accuracy = hold_idx.empty() ? 0.0f
                                  : static_cast<float>(correct) /
                                        static_cast<float>(hold_idx.size());
  return res;
}

namespace {

constexpr const char* kMetaFields[] = {"meta.kind",       "meta.noise_dim",
                                       "meta.image_size", "meta.channels",
                                       "meta.base_feature_maps", "meta.upscale_factor"};

int meta_int(const std::map<std::string, Tensor>& raw, const std::string& key) {
  const auto it = raw.find(key);
  if (it == raw.end()) throw CheckpointError("checkpoint is missing " + key);
  if (it->second.size() != 1) throw CheckpointError(key + " must hold a single value");
  return static_cast<int>(std::lround(it->second[0]));
}

}  // namespace

void save_gan_checkpoint(const std::string& path, const GanModel& m) {
  std::map<std::string, Tensor> out = m.params.tensors();
  const float fields[] = {static_cast<float>(static_cast<int>(m.kind)),
                          static_cast<float>(m.cfg.noise_dim),
                          static_cast<float>(m.cfg.image_size),
                          static_cast<float>(m.cfg.channels),
                          static_cast<float>(m.cfg.base_feature_maps),
                          static_cast<float>(m.cfg.upscale_factor)};
  for (size_t i = 0; i < std::size(kMetaFields); ++i)
    out.emplace(kMetaFields[i], Tensor({1}, {fields[i]}));
  save_checkpoint(path, out);
}

GanModel load_gan_checkpoint(const std::string& path) {
  auto raw = load_checkpoint(path);
  GanConfig cfg;
  const int kind = meta_int(raw, "meta.kind");
  cfg.noise_dim = meta_int(raw, "meta.noise_dim");
  cfg.image_size = meta_int(raw, "meta.image_size");
  cfg.channels = meta_int(raw, "meta.channels");
  cfg.base_feature_maps = meta_int(raw, "meta.base_feature_maps");
  cfg.upscale_factor = meta_int(raw, "meta.upscale_factor");
  if (kind != static_cast<int>(GanKind::dcgan) && kind != static_cast<int>(GanKind::enhancer))
    throw CheckpointError(path + ": unknown model kind " + std::to_string(kind));

  GanModel m;
  try {
    m = kind == static_cast<int>(GanKind::dcgan) ? make_gan(cfg, 0) : make_enhancer_gan(cfg, 0);
  } catch (const BuildError& e) {
    throw CheckpointError(path + ": stored configuration is invalid: " + e.what());
  }
  for (auto& [name, param] : m.params) {
    const auto it = raw.find(name);
    if (it == raw.end()) throw CheckpointError(path + ": missing tensor " + name);
    if (it->second.shape() != param.value.shape())
      throw CheckpointError(path + ": tensor " + name + " has shape " +
                            shape_str(it->second.shape()) + ", expected " +
                            shape_str(param.value.shape()));
    param.value = it->second;
    raw.erase(it);
  }
  for (const char* key : kMetaFields) raw.erase(key);
  if (!raw.empty())
    throw CheckpointError(path + ": unexpected tensor " + raw.begin()->first);
  return m;
}

void write_gan_loss_csv(const std::string& path, const std::vector<GanLossReport>& epochs) {
  std::string out = "epoch,d_loss,g_loss,value_v,d_real_mean,d_fake_mean\n";
  for (size_t i = 0; i < epochs.size(); ++i)
    out += std::to_string(i + 1) + "," + format_g9(epochs[i].d_loss) + "," +
           format_g9(epochs[i].g_loss) + "," + format_g9(epochs[i].value_v) + "," +
           format_g9(epochs[i].d_real_mean) + "," + format_g9(epochs[i].d_fake_mean) + "\n";
  write_file(path, out.data(), out.size());
}

}  // namespace ganshot
