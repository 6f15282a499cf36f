#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ganshot/data_io.hpp"
#include "ganshot/nn.hpp"

// Single-shot detector: multi-scale feature taps, default-box tiling, offset
// coding, matching and the multibox training loss.

namespace ganshot {

struct FeatureMapShape {
  int m = 0, n = 0;  // spatial rows, columns
  int p = 0;         // channels
};

struct BoxLayout {
  int m = 0, n = 0, k = 0;  // k boxes per cell
};

struct DefaultBoxSet {
  std::vector<BoundingBox> boxes;  // layer-major, cells row-major, ratio index last
  std::vector<BoxLayout> layout;
};

// One box per (cell, ratio) with w = s*sqrt(r), h = s/sqrt(r), centered at
// ((j+0.5)/n, (i+0.5)/m) and clipped to the unit square in corner form. When
// extra_square_scales is non-empty it appends one square box per cell.
DefaultBoxSet generate_default_boxes(const std::vector<FeatureMapShape>& shapes,
                                     const std::vector<float>& scales,
                                     const std::vector<float>& ratios,
                                     const std::vector<float>& extra_square_scales = {});

struct SsdModel {
  int num_classes = 1;
  int image_size = 32;
  ModelSpec trunk;
  std::vector<int> taps;          // trunk layer indices that feed heads
  std::vector<ModelSpec> heads;   // one 3x3 prediction conv per feature layer
  DefaultBoxSet defaults;
  ParamSet params;                // "trunk." and "head<i>." prefixes
};

// From-scratch conv backbone with three stride-2 feature layers (8x8, 4x4,
// 2x2 cells) and a k*(num_classes+5) channel prediction kernel per layer.
SsdModel build_ssd(int num_classes, int image_size, uint64_t seed);

// (class logits [N,D,C+1], box offsets [N,D,4]) over images in [0,1].
std::pair<Tensor, Tensor> ssd_forward(const SsdModel& m, ParamSet& params, const Tensor& images01,
                                      Mode mode);

// Offset coding relative to a default box; decode inverts encode exactly.
std::array<float, 4> encode_offsets(const BoundingBox& gt, const BoundingBox& d);
BoundingBox decode_offsets(const std::array<float, 4>& t, const BoundingBox& d);

// Ground-truth index per default, -1 for background. First a bipartite pass
// guarantees every gt its best default (ties: lower default, then lower gt;
// forced even at zero overlap), then unassigned defaults take their best gt
// at IoU >= threshold (ties: lower gt).
std::vector<int> match_boxes(const std::vector<std::pair<BoundingBox, int>>& gts,
                             const DefaultBoxSet& defaults, float iou_threshold = 0.5f);

// Differentiable multibox objective from precomputed per-default targets:
// class 0 is background, matched defaults carry class+1 and encoded offsets.
// Softmax cross-entropy over matched defaults plus the hardest background
// defaults at negative_ratio per matched, plus smooth-L1 on matched offsets,
// normalized by the total match count. Zero (with zero gradients) when
// nothing matched. The selection is held constant under differentiation.
template <typename S>
TensorT<S> multibox_from_targets(const TensorT<S>& logits, const TensorT<S>& offsets,
                                 const std::vector<std::vector<int>>& target_classes,
                                 const std::vector<std::vector<std::array<float, 4>>>& target_offsets,
                                 float negative_ratio = 3.0f);

// Matching + encoding + multibox_from_targets for a batch of scenes.
Tensor multibox_loss(const Tensor& logits, const Tensor& offsets,
                     const std::vector<std::vector<std::pair<BoundingBox, int>>>& gts,
                     const DefaultBoxSet& defaults, float iou_threshold = 0.5f);

// Decoded box and score for every (default, class) pair; suppression is the
// caller's concern.
std::vector<Detection> detect(const SsdModel& m, const Tensor& image01);

struct DetectorConfig {
  int num_classes = 2;
  int image_size = 32;
  int epochs = 25;
  int batch_size = 16;
  float iou_threshold = 0.5f;
  AdamConfig adam;
};

struct DetectorTrainResult {
  SsdModel model;
  std::vector<float> epoch_loss;  // mean multibox loss per epoch
};

DetectorTrainResult train_detector(const std::vector<SyntheticScene>& scenes,
                                   const DetectorConfig& cfg, uint64_t seed);

void save_ssd_checkpoint(const std::string& path, const SsdModel& m);
SsdModel load_ssd_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// multibox implementation
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> multibox_from_targets(const TensorT<S>& logits, const TensorT<S>& offsets,
                                 const std::vector<std::vector<int>>& target_classes,
                                 const std::vector<std::vector<std::array<float, 4>>>& target_offsets,
                                 float negative_ratio) {
  if (logits.rank() != 3 || offsets.rank() != 3 || offsets.dim(2) != 4)
    throw DimensionError("multibox expects logits [N,D,C+1] and offsets [N,D,4], got " +
                         shape_str(logits.shape()) + " and " + shape_str(offsets.shape()));
  const int n = logits.dim(0), d = logits.dim(1), c1 = logits.dim(2);
  if (offsets.dim(0) != n || offsets.dim(1) != d)
    throw DimensionError("logits and offsets disagree on batch or box count");
  if (c1 < 2) throw DimensionError("logits need background plus at least one class");
  if (target_classes.size() != static_cast<size_t>(n) ||
      target_offsets.size() != static_cast<size_t>(n))
    throw DimensionError("target lists must cover the batch");
  if (negative_ratio < 0) throw InputError("negative ratio must be non-negative");

  TapeT<S>* tape = merged_tape<S>({&logits, &offsets});

  struct Selected {
    int image, box, target;     // target class index into the logit row
    std::vector<S> probs;       // softmax of the logit row
  };
  std::vector<Selected> picked;
  struct Localized {
    int image, box;
    std::array<S, 4> diff;      // prediction minus encoded target
  };
  std::vector<Localized> localized;

  long long total_matched = 0;
  double loss_acc = 0;
  const S* lp = logits.ptr();
  const S* op = offsets.ptr();

  for (int i = 0; i < n; ++i) {
    if (target_classes[static_cast<size_t>(i)].size() != static_cast<size_t>(d) ||
        target_offsets[static_cast<size_t>(i)].size() != static_cast<size_t>(d))
      throw DimensionError("targets for image " + std::to_string(i) + " must list every default");

    auto cross_entropy = [&](int box, int target, std::vector<S>* probs) {
      const S* row = lp + (static_cast<long long>(i) * d + box) * c1;
      S mx = row[0];
      for (int c = 1; c < c1; ++c) mx = std::max(mx, row[c]);
      double sum = 0;
      for (int c = 0; c < c1; ++c) sum += std::exp(static_cast<double>(row[c] - mx));
      const double lse = std::log(sum) + mx;
      if (probs) {
        probs->resize(c1);
        for (int c = 0; c < c1; ++c)
          (*probs)[static_cast<size_t>(c)] = static_cast<S>(std::exp(row[c] - lse));
      }
      return lse - static_cast<double>(row[target]);
    };

    int matched_here = 0;
    for (int b = 0; b < d; ++b) {
      const int t = target_classes[static_cast<size_t>(i)][static_cast<size_t>(b)];
      if (t <= 0) continue;
      if (t >= c1)
        throw DimensionError("target class " + std::to_string(t) + " exceeds the logit width");
      ++matched_here;
      Selected s{i, b, t, {}};
      loss_acc += cross_entropy(b, t, &s.probs);
      picked.push_back(std::move(s));

      Localized loc{i, b, {}};
      const S* row = op + (static_cast<long long>(i) * d + b) * 4;
      const auto& enc = target_offsets[static_cast<size_t>(i)][static_cast<size_t>(b)];
      for (int j = 0; j < 4; ++j) {
        loc.diff[static_cast<size_t>(j)] = row[j] - static_cast<S>(enc[static_cast<size_t>(j)]);
        const double a = std::abs(static_cast<double>(loc.diff[static_cast<size_t>(j)]));
        loss_acc += a < 1.0 ? 0.5 * a * a : a - 0.5;
      }
      localized.push_back(loc);
    }
    total_matched += matched_here;

    if (matched_here > 0) {
      std::vector<std::pair<double, int>> background;
      for (int b = 0; b < d; ++b)
        if (target_classes[static_cast<size_t>(i)][static_cast<size_t>(b)] == 0)
          background.emplace_back(-cross_entropy(b, 0, nullptr), b);
      std::sort(background.begin(), background.end());
      const size_t want = std::min(background.size(),
                                   static_cast<size_t>(negative_ratio * matched_here));
      for (size_t bi = 0; bi < want; ++bi) {
        Selected s{i, background[bi].second, 0, {}};
        loss_acc += cross_entropy(background[bi].second, 0, &s.probs);
        picked.push_back(std::move(s));
      }
    }
  }

  std::vector<S> value = {total_matched == 0
                              ? S(0)
                              : static_cast<S>(loss_acc / static_cast<double>(total_matched))};
  TensorT<S> out(Shape{1}, std::move(value));
  if (!tape) return out;

  const S inv = total_matched == 0 ? S(0) : S(1) / static_cast<S>(total_matched);
  const int lnode = logits.node(), onode = offsets.node();
  const Shape lshape = logits.shape(), oshape = offsets.shape();
  int id = tape->record(
      Op::multibox, {lnode, onode}, {1},
      [lnode, onode, lshape, oshape, picked, localized, inv, d, c1](TapeT<S>& t,
                                                                    const std::vector<S>& g) {
        const S scale = g[0] * inv;
        if (lnode >= 0) {
          std::vector<S> gl(static_cast<size_t>(numel(lshape)), S(0));
          for (const auto& s : picked) {
            S* row = gl.data() + (static_cast<long long>(s.image) * d + s.box) * c1;
            for (int c = 0; c < c1; ++c)
              row[c] += scale * (s.probs[static_cast<size_t>(c)] - (c == s.target ? S(1) : S(0)));
          }
          t.accumulate(lnode, gl);
        }
        if (onode >= 0) {
          std::vector<S> go(static_cast<size_t>(numel(oshape)), S(0));
          for (const auto& l : localized) {
            S* row = go.data() + (static_cast<long long>(l.image) * d + l.box) * 4;
            for (int j = 0; j < 4; ++j)
              row[j] += scale * std::clamp(l.diff[static_cast<size_t>(j)], S(-1), S(1));
          }
          t.accumulate(onode, go);
        }
      });
  tape->bind(out, id);
  return out;
}

}  // namespace ganshot
