#pragma once

#include <cmath>
#include <vector>

#include "ganshot/boxes.hpp"
#include "ganshot/tensor.hpp"

// Reference implementations used only by tests. Deliberately written with
// different algorithms than the library (padded buffers, dilation + kernel
// flip, quadratic scans) so agreement is meaningful.

namespace oracle {

using ganshot::BoundingBox;
using ganshot::Detection;
using ganshot::Shape;

// Convolution over an explicitly zero-padded copy of the input.
// x [N,C,H,W], k [O,C,Kh,Kw].
template <typename S>
std::vector<S> conv2d(const S* x, const Shape& xs, const S* k, const Shape& ks, int stride,
                      int pad) {
  const int n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const int o = ks[0], kh = ks[2], kw = ks[3];
  const int ph = h + 2 * pad, pw = w + 2 * pad;
  const int oh = (ph - kh) / stride + 1, ow = (pw - kw) / stride + 1;
  std::vector<S> padded(static_cast<size_t>(n) * c * ph * pw, S(0));
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          padded[((static_cast<size_t>(ni) * c + ci) * ph + i + pad) * pw + j + pad] =
              x[((static_cast<size_t>(ni) * c + ci) * h + i) * w + j];
  std::vector<S> out(static_cast<size_t>(n) * o * oh * ow, S(0));
  for (int ni = 0; ni < n; ++ni)
    for (int oi = 0; oi < o; ++oi)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          S acc = 0;
          for (int ci = 0; ci < c; ++ci)
            for (int a = 0; a < kh; ++a)
              for (int b = 0; b < kw; ++b)
                acc += padded[((static_cast<size_t>(ni) * c + ci) * ph + i * stride + a) * pw +
                              j * stride + b] *
                       k[((static_cast<size_t>(oi) * c + ci) * kh + a) * kw + b];
          out[((static_cast<size_t>(ni) * o + oi) * oh + i) * ow + j] = acc;
        }
  return out;
}

// Transposed convolution as zero-dilation followed by a stride-1 convolution
// with the spatially flipped, axis-swapped kernel. x [N,C,H,W], k [C,O,Kh,Kw].
template <typename S>
std::vector<S> conv_transpose2d(const S* x, const Shape& xs, const S* k, const Shape& ks,
                                int stride, int pad) {
  const int n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const int o = ks[1], kh = ks[2], kw = ks[3];
  const int dh = (h - 1) * stride + 1, dw = (w - 1) * stride + 1;
  std::vector<S> dilated(static_cast<size_t>(n) * c * dh * dw, S(0));
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          dilated[((static_cast<size_t>(ni) * c + ci) * dh + i * stride) * dw + j * stride] =
              x[((static_cast<size_t>(ni) * c + ci) * h + i) * w + j];
  std::vector<S> flipped(static_cast<size_t>(o) * c * kh * kw);
  for (int ci = 0; ci < c; ++ci)
    for (int oi = 0; oi < o; ++oi)
      for (int a = 0; a < kh; ++a)
        for (int b = 0; b < kw; ++b)
          flipped[((static_cast<size_t>(oi) * c + ci) * kh + (kh - 1 - a)) * kw + (kw - 1 - b)] =
              k[((static_cast<size_t>(ci) * o + oi) * kh + a) * kw + b];
  return conv2d<S>(dilated.data(), {n, c, dh, dw}, flipped.data(), {o, c, kh, kw}, 1,
                   kh - 1 - pad);
}

// Quadratic NMS: a detection survives unless a strictly-preferred same-class
// detection overlaps it at or above the threshold, where preference is
// (higher score, then lower class id, then earlier input position) and the
// preferred detection itself survives.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, float threshold) {
  const size_t n = dets.size();
  auto prefer = [&](size_t a, size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    if (dets[a].class_id != dets[b].class_id) return dets[a].class_id < dets[b].class_id;
    return a < b;
  };
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), prefer);
  std::vector<bool> alive(n, true);
  for (size_t ai = 0; ai < n; ++ai) {
    const size_t a = order[ai];
    if (!alive[a]) continue;
    for (size_t bi = ai + 1; bi < n; ++bi) {
      const size_t b = order[bi];
      if (!alive[b] || dets[a].class_id != dets[b].class_id) continue;
      if (ganshot::iou(dets[a].box, dets[b].box) >= threshold) alive[b] = false;
    }
  }
  std::vector<Detection> kept;
  for (size_t i : order)
    if (alive[i]) kept.push_back(dets[i]);
  return kept;
}

// Exhaustive default-box assignment: per-ground-truth best pass by repeated
// full scans, then the threshold pass. Returns gt index per default, -1 for
// background.
inline std::vector<int> match(const std::vector<BoundingBox>& gts,
                              const std::vector<BoundingBox>& defaults, float threshold) {
  const int g = static_cast<int>(gts.size()), d = static_cast<int>(defaults.size());
  std::vector<int> assign(d, -1);
  std::vector<bool> gt_done(g, false), box_taken(d, false);
  for (int round = 0; round < g && round < d; ++round) {
    float best = -1.0f;
    int bg = -1, bd = -1;
    for (int gi = 0; gi < g; ++gi) {
      if (gt_done[gi]) continue;
      for (int di = 0; di < d; ++di) {
        if (box_taken[di]) continue;
        const float v = ganshot::iou(gts[gi], defaults[di]);
        if (v > best || (v == best && (di < bd || (di == bd && gi < bg)))) {
          best = v;
          bg = gi;
          bd = di;
        }
      }
    }
    if (bg < 0) break;
    gt_done[bg] = true;
    box_taken[bd] = true;
    assign[bd] = bg;
  }
  for (int di = 0; di < d; ++di) {
    if (assign[di] >= 0) continue;
    float best = 0.0f;
    int bg = -1;
    for (int gi = 0; gi < g; ++gi) {
      const float v = ganshot::iou(gts[gi], defaults[di]);
      if (v > best) {
        best = v;
        bg = gi;
      }
    }
    if (bg >= 0 && best >= threshold) assign[di] = bg;
  }
  return assign;
}

// Greedy matched-count at one score cutoff, rebuilt from scratch: detections
// in score order claim the best still-unmatched same-class gt at IoU >= thr.
struct PrCounts {
  int tp = 0, fp = 0, fn = 0;
};

inline PrCounts pr_counts_at(const std::vector<std::vector<Detection>>& dets,
                             const std::vector<std::vector<std::pair<BoundingBox, int>>>& gts,
                             float cutoff, float iou_thr) {
  PrCounts out;
  for (size_t img = 0; img < dets.size(); ++img) {
    std::vector<size_t> order;
    for (size_t i = 0; i < dets[img].size(); ++i)
      if (dets[img][i].score >= cutoff) order.push_back(i);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      if (dets[img][a].score != dets[img][b].score)
        return dets[img][a].score > dets[img][b].score;
      return a < b;
    });
    std::vector<bool> used(gts[img].size(), false);
    int tp = 0;
    for (size_t i : order) {
      const Detection& det = dets[img][i];
      float best = 0.0f;
      int bg = -1;
      for (size_t gi = 0; gi < gts[img].size(); ++gi) {
        if (used[gi] || gts[img][gi].second != det.class_id) continue;
        const float v = ganshot::iou(det.box, gts[img][gi].first);
        if (v > best) {
          best = v;
          bg = static_cast<int>(gi);
        }
      }
      if (bg >= 0 && best >= iou_thr) {
        used[bg] = true;
        ++tp;
      }
    }
    out.tp += tp;
    out.fp += static_cast<int>(order.size()) - tp;
    out.fn += static_cast<int>(gts[img].size()) - tp;
  }
  return out;
}

}  // namespace oracle
