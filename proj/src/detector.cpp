#include "ganshot/detector.hpp"

#include <cmath>
#include <numeric>

namespace ganshot {

namespace {

constexpr float kDetectorSlope = 0.2f;
const std::vector<float> kSsdScales = {0.2f, 0.4f, 0.7f};
const std::vector<float> kSsdRatios = {1.0f, 2.0f, 0.5f};

std::vector<float> extra_scales() {
  std::vector<float> out;
  std::vector<float> chain = kSsdScales;
  chain.push_back(1.0f);
  for (size_t i = 0; i + 1 < chain.size(); ++i)
    out.push_back(std::sqrt(chain[i] * chain[i + 1]));
  return out;
}

BoundingBox clipped_box(float cx, float cy, float w, float h) {
  const float x0 = std::max(0.0f, cx - w / 2), x1 = std::min(1.0f, cx + w / 2);
  const float y0 = std::max(0.0f, cy - h / 2), y1 = std::min(1.0f, cy + h / 2);
  return {(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
}

}  // namespace

DefaultBoxSet generate_default_boxes(const std::vector<FeatureMapShape>& shapes,
                                     const std::vector<float>& scales,
                                     const std::vector<float>& ratios,
                                     const std::vector<float>& extra_square_scales) {
  if (shapes.size() != scales.size())
    throw InputError("need one scale per feature layer, got " + std::to_string(scales.size()) +
                     " for " + std::to_string(shapes.size()));
  if (ratios.empty()) throw InputError("ratio list is empty");
  if (!extra_square_scales.empty() && extra_square_scales.size() != shapes.size())
    throw InputError("extra square scales must match the layer count");

  DefaultBoxSet set;
  const int k = static_cast<int>(ratios.size()) + (extra_square_scales.empty() ? 0 : 1);
  for (size_t l = 0; l < shapes.size(); ++l) {
    const int m = shapes[l].m, n = shapes[l].n;
    if (m <= 0 || n <= 0) throw InputError("feature map dims must be positive");
    set.layout.push_back({m, n, k});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        const float cx = (j + 0.5f) / n, cy = (i + 0.5f) / m;
        for (float r : ratios) {
          const float root = std::sqrt(r);
          set.boxes.push_back(clipped_box(cx, cy, scales[l] * root, scales[l] / root));
        }
        if (!extra_square_scales.empty())
          set.boxes.push_back(clipped_box(cx, cy, extra_square_scales[l], extra_square_scales[l]));
      }
  }
  return set;
}

SsdModel build_ssd(int num_classes, int image_size, uint64_t seed) {
  if (num_classes < 1) throw BuildError("detector needs at least one class");
  if (image_size != 32 && image_size != 64)
    throw BuildError("unsupported image size " + std::to_string(image_size));

  SsdModel m;
  m.num_classes = num_classes;
  m.image_size = image_size;
  m.trunk.input = {3, image_size, image_size};
  m.trunk.conv(3, 32, 3, 1, 1).activation(Act::leaky_relu, kDetectorSlope);
  if (image_size == 64)
    m.trunk.conv(32, 32, 3, 2, 1).activation(Act::leaky_relu, kDetectorSlope);
  m.trunk.conv(32, 64, 3, 2, 1).activation(Act::leaky_relu, kDetectorSlope);
  m.trunk.conv(64, 64, 3, 2, 1).activation(Act::leaky_relu, kDetectorSlope);
  m.trunk.conv(64, 128, 3, 2, 1).activation(Act::leaky_relu, kDetectorSlope);
  m.trunk.conv(128, 128, 3, 2, 1).activation(Act::leaky_relu, kDetectorSlope);
  const int last = static_cast<int>(m.trunk.layers.size()) - 1;
  m.taps = {last - 4, last - 2, last};

  auto shapes = propagate_shapes(m.trunk);
  std::vector<FeatureMapShape> feature_shapes;
  for (int tap : m.taps) {
    const Shape& s = shapes[static_cast<size_t>(tap) + 1];  // index 0 is the input
    feature_shapes.push_back({s[1], s[2], s[0]});
  }
  m.defaults = generate_default_boxes(feature_shapes, kSsdScales, kSsdRatios, extra_scales());

  Rng rng(seed);
  init_params_into(m.params, m.trunk, rng, "trunk.");
  const int k = m.defaults.layout[0].k;
  for (size_t l = 0; l < feature_shapes.size(); ++l) {
    ModelSpec head;
    head.input = {feature_shapes[l].p, feature_shapes[l].m, feature_shapes[l].n};
    head.conv(feature_shapes[l].p, k * (num_classes + 5), 3, 1, 1);
    init_params_into(m.params, head, rng, "head" + std::to_string(l) + ".");
    m.heads.push_back(std::move(head));
  }
  return m;
}

std::pair<Tensor, Tensor> ssd_forward(const SsdModel& m, ParamSet& params, const Tensor& images01,
                                      Mode mode) {
  const int c1 = m.num_classes + 1;
  std::vector<Tensor> taps;
  forward(m.trunk, params, images01, mode, "trunk.", &taps);

  std::vector<Tensor> parts;
  for (size_t l = 0; l < m.heads.size(); ++l) {
    Tensor f = taps[static_cast<size_t>(m.taps[l])];
    Tensor h = forward(m.heads[l], params, f, mode, "head" + std::to_string(l) + ".");
    const BoxLayout& lay = m.defaults.layout[l];
    Tensor cellwise = permute(h, {0, 2, 3, 1});
    parts.push_back(reshape(cellwise, Shape{h.dim(0), lay.m * lay.n * lay.k, c1 + 4}));
  }
  Tensor merged = concat(parts, 1);
  return {slice_last(merged, 0, c1), slice_last(merged, c1, 4)};
}

std::array<float, 4> encode_offsets(const BoundingBox& gt, const BoundingBox& d) {
  if (gt.w <= 0 || gt.h <= 0)
    throw InputError("ground-truth box has non-positive dims " + std::to_string(gt.w) + "x" +
                     std::to_string(gt.h));
  if (d.w <= 0 || d.h <= 0)
    throw InputError("default box has non-positive dims");
  return {(gt.cx - d.cx) / d.w, (gt.cy - d.cy) / d.h, std::log(gt.w / d.w),
          std::log(gt.h / d.h)};
}

BoundingBox decode_offsets(const std::array<float, 4>& t, const BoundingBox& d) {
  if (d.w <= 0 || d.h <= 0) throw InputError("default box has non-positive dims");
  return {t[0] * d.w + d.cx, t[1] * d.h + d.cy, d.w * std::exp(t[2]), d.h * std::exp(t[3])};
}

std::vector<int> match_boxes(const std::vector<std::pair<BoundingBox, int>>& gts,
                             const DefaultBoxSet& defaults, float iou_threshold) {
  if (iou_threshold <= 0.0f || iou_threshold >= 1.0f)
    throw InputError("matching threshold must lie in (0,1)");
  const int g = static_cast<int>(gts.size());
  const int d = static_cast<int>(defaults.boxes.size());
  std::vector<int> assign(static_cast<size_t>(d), -1);
  if (g == 0 || d == 0) return assign;

  std::vector<float> overlap(static_cast<size_t>(g) * d);
  for (int gi = 0; gi < g; ++gi)
    for (int di = 0; di < d; ++di)
      overlap[static_cast<size_t>(gi) * d + di] =
          iou(gts[static_cast<size_t>(gi)].first, defaults.boxes[static_cast<size_t>(di)]);

  // every gt claims its best free default, highest overlap first; ties prefer
  // the lower default index, then the lower gt index
  std::vector<bool> gt_done(static_cast<size_t>(g), false);
  std::vector<bool> box_taken(static_cast<size_t>(d), false);
  const int rounds = std::min(g, d);
  for (int round = 0; round < rounds; ++round) {
    float best = -1.0f;
    int bg = -1, bd = -1;
    for (int di = 0; di < d; ++di) {
      if (box_taken[static_cast<size_t>(di)]) continue;
      for (int gi = 0; gi < g; ++gi) {
        if (gt_done[static_cast<size_t>(gi)]) continue;
        const float v = overlap[static_cast<size_t>(gi) * d + di];
        if (v > best) {
          best = v;
          bg = gi;
          bd = di;
        }
      }
    }
    if (bg < 0) break;
    gt_done[static_cast<size_t>(bg)] = true;
    box_taken[static_cast<size_t>(bd)] = true;
    assign[static_cast<size_t>(bd)] = bg;
  }

  for (int di = 0; di < d; ++di) {
    if (assign[static_cast<size_t>(di)] >= 0) continue;
    float best = 0.0f;
    int bg = -1;
    for (int gi = 0; gi < g; ++gi) {
      const float v = overlap[static_cast<size_t>(gi) * d + di];
      if (v > best) {
        best = v;
        bg = gi;
      }
    }
    if (bg >= 0 && best >= iou_threshold) assign[static_cast<size_t>(di)] = bg;
  }
  return assign;
}

Tensor multibox_loss(const Tensor& logits, const Tensor& offsets,
                     const std::vector<std::vector<std::pair<BoundingBox, int>>>& gts,
                     const DefaultBoxSet& defaults, float iou_threshold) {
  const int n = logits.dim(0);
  const int d = static_cast<int>(defaults.boxes.size());
  if (gts.size() != static_cast<size_t>(n))
    throw DimensionError("need ground truths for each of the " + std::to_string(n) + " images");
  if (logits.dim(1) != d)
    throw DimensionError("logits cover " + std::to_string(logits.dim(1)) + " boxes, default set has " +
                         std::to_string(d));

  std::vector<std::vector<int>> target_classes(static_cast<size_t>(n));
  std::vector<std::vector<std::array<float, 4>>> target_offsets(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto assign = match_boxes(gts[static_cast<size_t>(i)], defaults, iou_threshold);
    auto& cls = target_classes[static_cast<size_t>(i)];
    auto& off = target_offsets[static_cast<size_t>(i)];
    cls.assign(static_cast<size_t>(d), 0);
    off.assign(static_cast<size_t>(d), {0, 0, 0, 0});
    for (int b = 0; b < d; ++b) {
      const int gi = assign[static_cast<size_t>(b)];
      if (gi < 0) continue;
      const auto& [box, class_id] = gts[static_cast<size_t>(i)][static_cast<size_t>(gi)];
      if (class_id < 0 || class_id + 1 >= logits.dim(2))
        throw InputError("class id " + std::to_string(class_id) +
                         " does not fit the detector head");
      cls[static_cast<size_t>(b)] = class_id + 1;
      off[static_cast<size_t>(b)] = encode_offsets(box, defaults.boxes[static_cast<size_t>(b)]);
    }
  }
  return multibox_from_targets(logits, offsets, target_classes, target_offsets);
}

std::vector<Detection> detect(const SsdModel& m, const Tensor& image01) {
  if (image01.shape() != Shape{3, m.image_size, m.image_size})
    throw DimensionError("detector expects [3," + std::to_string(m.image_size) + "," +
                         std::to_string(m.image_size) + "], got " + shape_str(image01.shape()));
  ParamSet params = m.params;
  Tensor batch = reshape(image01, Shape{1, 3, m.image_size, m.image_size});
  auto [logits, offsets] = ssd_forward(m, params, batch, Mode::eval);

  const int d = static_cast<int>(m.defaults.boxes.size());
  const int c1 = m.num_classes + 1;
  std::vector<Detection> out;
  out.reserve(static_cast<size_t>(d) * m.num_classes);
  for (int b = 0; b < d; ++b) {
    const float* row = logits.ptr() + static_cast<long long>(b) * c1;
    float mx = row[0];
    for (int c = 1; c < c1; ++c) mx = std::max(mx, row[c]);
    double sum = 0;
    for (int c = 0; c < c1; ++c) sum += std::exp(static_cast<double>(row[c] - mx));
    const float* off = offsets.ptr() + static_cast<long long>(b) * 4;
    const BoundingBox box = decode_offsets({off[0], off[1], off[2], off[3]},
                                           m.defaults.boxes[static_cast<size_t>(b)]);
    for (int c = 1; c < c1; ++c)
      out.push_back({box, c - 1,
                     static_cast<float>(std::exp(static_cast<double>(row[c] - mx)) / sum)});
  }
  return out;
}

DetectorTrainResult train_detector(const std::vector<SyntheticScene>& scenes,
                                   const DetectorConfig& cfg, uint64_t seed) {
  if (scenes.empty()) throw InputError("training dataset is empty");
  const Shape expect{3, cfg.image_size, cfg.image_size};
  for (const auto& scene : scenes) {
    if (scene.image.shape() != expect)
      throw InputError("scene image is " + shape_str(scene.image.shape()) + ", config wants " +
                       shape_str(expect));
    for (const auto& [box, cls] : scene.gts)
      if (cls < 0 || cls >= cfg.num_classes)
        throw InputError("scene class " + std::to_string(cls) + " outside the configured " +
                         std::to_string(cfg.num_classes) + " classes");
  }

  Rng rng(seed);
  DetectorTrainResult res{build_ssd(cfg.num_classes, cfg.image_size, rng.next_u64()), {}};
  AdamState opt;
  opt.cfg = cfg.adam;
  std::vector<int> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  const long long per = numel(expect);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0;
    int steps = 0;
    for (size_t start = 0; start < scenes.size(); start += cfg.batch_size) {
      const int count = static_cast<int>(std::min<size_t>(cfg.batch_size, scenes.size() - start));
      std::vector<float> data(static_cast<size_t>(count) * per);
      std::vector<std::vector<std::pair<BoundingBox, int>>> gts(static_cast<size_t>(count));
      for (int b = 0; b < count; ++b) {
        const auto& scene = scenes[static_cast<size_t>(order[start + b])];
        for (long long i = 0; i < per; ++i)
          data[static_cast<size_t>(b) * per + i] = scene.image[i];
        gts[static_cast<size_t>(b)] = scene.gts;
      }
      Tensor batch(Shape{count, 3, cfg.image_size, cfg.image_size}, std::move(data));

      Tape tape;
      res.model.params.watch_all(tape);
      auto [logits, offsets] = ssd_forward(res.model, res.model.params, batch, Mode::train);
      Tensor loss = multibox_loss(logits, offsets, gts, res.model.defaults, cfg.iou_threshold);
      tape.backward(loss);
      adam_step(res.model.params, collect_gradients(tape, res.model.params), opt);
      epoch_loss += loss.item();
      ++steps;
    }
    res.epoch_loss.push_back(static_cast<float>(epoch_loss / steps));
  }
  return res;
}

namespace {
constexpr int kSsdCheckpointKind = 3;
}

void save_ssd_checkpoint(const std::string& path, const SsdModel& m) {
  std::map<std::string, Tensor> out = m.params.tensors();
  out.emplace("meta.kind", Tensor({1}, {static_cast<float>(kSsdCheckpointKind)}));
  out.emplace("meta.num_classes", Tensor({1}, {static_cast<float>(m.num_classes)}));
  out.emplace("meta.image_size", Tensor({1}, {static_cast<float>(m.image_size)}));
  save_checkpoint(path, out);
}

SsdModel load_ssd_checkpoint(const std::string& path) {
  auto raw = load_checkpoint(path);
  auto meta = [&](const std::string& key) {
    const auto it = raw.find(key);
    if (it == raw.end()) throw CheckpointError(path + ": missing " + key);
    if (it->second.size() != 1) throw CheckpointError(path + ": " + key + " must be scalar");
    return static_cast<int>(std::lround(it->second[0]));
  };
  if (meta("meta.kind") != kSsdCheckpointKind)
    throw CheckpointError(path + ": not a detector checkpoint");
  SsdModel m;
  try {
    m = build_ssd(meta("meta.num_classes"), meta("meta.image_size"), 0);
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
  raw.erase("meta.kind");
  raw.erase("meta.num_classes");
  raw.erase("meta.image_size");
  if (!raw.empty()) throw CheckpointError(path + ": unexpected tensor " + raw.begin()->first);
  return m;
}

}  // namespace ganshot
