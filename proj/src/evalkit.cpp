#include "ganshot/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ganshot/data_io.hpp"
#include "ganshot/ops.hpp"

namespace ganshot {

namespace {

void validate_eval(const EvalConfig& cfg) {
  auto open_unit = [](float v) { return v > 0.0f && v < 1.0f; };
  if (!open_unit(cfg.score_threshold) || !open_unit(cfg.nms_threshold) ||
      !open_unit(cfg.iou_match_threshold))
    throw InputError("evaluation thresholds must lie in (0,1)");
}

bool ranks_before(const std::vector<Detection>& dets, size_t a, size_t b) {
  if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
  if (dets[a].class_id != dets[b].class_id) return dets[a].class_id < dets[b].class_id;
  return a < b;
}

struct ImageMatch {
  std::vector<std::pair<float, bool>> outcomes;  // (score, counted as true positive)
  std::vector<float> gt_score;                   // claiming score per gt, NaN if unclaimed
};

// Detections in (score, input order) claim their best unmatched same-class
// ground truth; claims are independent of any score cutoff because higher
// cutoffs only truncate the tail of the same ordering.
ImageMatch match_image(const std::vector<Detection>& dets,
                       const std::vector<std::pair<BoundingBox, int>>& gts, float iou_thr) {
  std::vector<size_t> order(dets.size());
  for (size_t i = 0; i < dets.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return a < b;
  });

  ImageMatch out;
  out.gt_score.assign(gts.size(), std::numeric_limits<float>::quiet_NaN());
  std::vector<bool> used(gts.size(), false);
  for (size_t i : order) {
    const Detection& det = dets[i];
    float best = 0.0f;
    int bg = -1;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      if (used[gi] || gts[gi].second != det.class_id) continue;
      const float v = iou(det.box, gts[gi].first);
      if (v > best) {
        best = v;
        bg = static_cast<int>(gi);
      }
    }
    const bool tp = bg >= 0 && best >= iou_thr;
    if (tp) {
      used[static_cast<size_t>(bg)] = true;
      out.gt_score[static_cast<size_t>(bg)] = det.score;
    }
    out.outcomes.emplace_back(det.score, tp);
  }
  return out;
}

struct CutoffCounts {
  long long tp = 0, selected = 0;
};

CutoffCounts counts_at(const std::vector<std::pair<float, bool>>& sorted_desc, float cutoff) {
  CutoffCounts c;
  for (const auto& [score, tp] : sorted_desc) {
    if (score < cutoff) break;
    ++c.selected;
    if (tp) ++c.tp;
  }
  return c;
}

float precision_of(const CutoffCounts& c) {
  return c.selected == 0 ? 1.0f
                         : static_cast<float>(c.tp) / static_cast<float>(c.selected);
}

float recall_of(long long tp, long long total_gts) {
  if (total_gts == 0) return std::numeric_limits<float>::quiet_NaN();
  return static_cast<float>(tp) / static_cast<float>(total_gts);
}

float f1_of(const CutoffCounts& c, long long total_gts) {
  if (c.tp == 0) return 0.0f;
  const float p = precision_of(c);
  const float r = recall_of(c.tp, total_gts);
  return 2.0f * p * r / (p + r);
}

}  // namespace

std::vector<Detection> nms(const std::vector<Detection>& dets, float overlap_threshold) {
  if (overlap_threshold <= 0.0f || overlap_threshold >= 1.0f)
    throw InputError("suppression threshold must lie in (0,1)");
  std::vector<size_t> order(dets.size());
  for (size_t i = 0; i < dets.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return ranks_before(dets, a, b); });

  std::vector<Detection> kept;
  std::vector<char> dropped(dets.size(), 0);
  for (size_t rank = 0; rank < order.size(); ++rank) {
    const size_t i = order[rank];
    if (dropped[i]) continue;
    kept.push_back(dets[i]);
    for (size_t later = rank + 1; later < order.size(); ++later) {
      const size_t j = order[later];
      if (dropped[j] || dets[j].class_id != dets[i].class_id) continue;
      if (iou(dets[i].box, dets[j].box) >= overlap_threshold) dropped[j] = 1;
    }
  }
  return kept;
}

PrCurve pr_curve(const std::vector<std::vector<Detection>>& dets,
                 const std::vector<std::vector<std::pair<BoundingBox, int>>>& gts,
                 const EvalConfig& cfg) {
  validate_eval(cfg);
  if (dets.size() != gts.size())
    throw DimensionError("got detections for " + std::to_string(dets.size()) +
                         " images but ground truth for " + std::to_string(gts.size()));

  std::vector<std::pair<float, bool>> outcomes;
  long long total_gts = 0;
  for (size_t img = 0; img < dets.size(); ++img) {
    ImageMatch m = match_image(dets[img], gts[img], cfg.iou_match_threshold);
    outcomes.insert(outcomes.end(), m.outcomes.begin(), m.outcomes.end());
    total_gts += static_cast<long long>(gts[img].size());
  }
  std::sort(outcomes.begin(), outcomes.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });

  PrCurve curve;
  CutoffCounts running;
  for (size_t i = 0; i < outcomes.size(); ++i) {
    ++running.selected;
    if (outcomes[i].second) ++running.tp;
    const bool group_end = i + 1 == outcomes.size() || outcomes[i + 1].first != outcomes[i].first;
    if (group_end)
      curve.points.push_back(
          {outcomes[i].first, precision_of(running), recall_of(running.tp, total_gts)});
  }
  std::reverse(curve.points.begin(), curve.points.end());

  curve.f1_at_default = f1_of(counts_at(outcomes, cfg.score_threshold), total_gts);
  return curve;
}

CompareReport compare_pipelines(const std::string& dataset,
                                const std::vector<SyntheticScene>& scenes,
                                const SsdModel& ssd_naive, const GanModel& enhancer,
                                const SsdModel& ssd_enhanced, const EvalConfig& cfg) {
  validate_eval(cfg);
  if (scenes.empty()) throw InputError("comparison needs at least one scene");
  const int size = ssd_naive.image_size;
  if (ssd_enhanced.image_size != size)
    throw ConfigError("detectors expect different input sizes, " + std::to_string(size) +
                      " vs " + std::to_string(ssd_enhanced.image_size));
  if (enhancer.kind != GanKind::enhancer)
    throw ConfigError("the restoration checkpoint is not an enhancer");
  if (enhancer.cfg.image_size != size)
    throw ConfigError("enhancer restores to " + std::to_string(enhancer.cfg.image_size) +
                      ", detectors expect " + std::to_string(size));
  const int factor = enhancer.cfg.upscale_factor;
  const Shape expect{3, size, size};
  for (const auto& scene : scenes)
    if (scene.image.shape() != expect)
      throw InputError("scene image is " + shape_str(scene.image.shape()) + ", expected " +
                       shape_str(expect));

  struct Totals {
    CutoffCounts counts;
    long long gts = 0, tiny = 0, tiny_tp = 0;
  };
  Totals totals[2];

  for (size_t si = 0; si < scenes.size(); ++si) {
    const SyntheticScene& scene = scenes[si];
    Tensor low = box_downsample(scene.image, factor);
    Tensor naive = reshape(
        upsample_nearest(reshape(low, Shape{1, 3, size / factor, size / factor}), factor),
        expect);
    Tensor restored = enhance(enhancer, low, static_cast<uint64_t>(si));

    const Tensor* inputs[2] = {&naive, &restored};
    const SsdModel* models[2] = {&ssd_naive, &ssd_enhanced};
    for (int p = 0; p < 2; ++p) {
      auto dets = nms(detect(*models[p], *inputs[p]), cfg.nms_threshold);
      ImageMatch m = match_image(dets, scene.gts, cfg.iou_match_threshold);
      Totals& t = totals[p];
      for (const auto& [score, tp] : m.outcomes) {
        if (score < cfg.score_threshold) continue;
        ++t.counts.selected;
        if (tp) ++t.counts.tp;
      }
      t.gts += static_cast<long long>(scene.gts.size());
      for (size_t gi = 0; gi < scene.gts.size(); ++gi) {
        const BoundingBox& box = scene.gts[gi].first;
        if (std::max(box.w, box.h) * static_cast<float>(size) > 8.0f) continue;
        ++t.tiny;
        if (!std::isnan(m.gt_score[gi]) && m.gt_score[gi] >= cfg.score_threshold) ++t.tiny_tp;
      }
    }
  }

  CompareReport report;
  const char* names[2] = {"ssd", "dcgan+ssd"};
  for (int p = 0; p < 2; ++p) {
    const Totals& t = totals[p];
    CompareRow row;
    row.dataset = dataset;
    row.pipeline = names[p];
    row.precision = precision_of(t.counts);
    row.recall = recall_of(t.counts.tp, t.gts);
    row.f1 = f1_of(t.counts, t.gts);
    row.tiny_recall = t.tiny == 0 ? std::numeric_limits<float>::quiet_NaN()
                                  : static_cast<float>(t.tiny_tp) / static_cast<float>(t.tiny);
    report.rows.push_back(std::move(row));
  }
  return report;
}

namespace {

void draw_outline(std::vector<float>& data, int height, int width, const BoundingBox& box,
                  float r, float g, float b) {
  auto clamp_px = [](long v, int hi) { return static_cast<int>(std::clamp<long>(v, 0, hi)); };
  const int x0 = clamp_px(static_cast<long>(std::floor(box.x0() * width)), width - 1);
  const int x1 = std::max(x0, clamp_px(static_cast<long>(std::ceil(box.x1() * width)) - 1, width - 1));
  const int y0 = clamp_px(static_cast<long>(std::floor(box.y0() * height)), height - 1);
  const int y1 = std::max(y0, clamp_px(static_cast<long>(std::ceil(box.y1() * height)) - 1, height - 1));

  const long long plane = static_cast<long long>(height) * width;
  auto paint = [&](int y, int x) {
    const long long at = static_cast<long long>(y) * width + x;
    data[static_cast<size_t>(at)] = r;
    data[static_cast<size_t>(plane + at)] = g;
    data[static_cast<size_t>(2 * plane + at)] = b;
  };
  for (int x = x0; x <= x1; ++x) {
    paint(y0, x);
    paint(y1, x);
  }
  for (int y = y0; y <= y1; ++y) {
    paint(y, x0);
    paint(y, x1);
  }
}

}  // namespace

Tensor annotate(const Tensor& image01, const std::vector<std::pair<BoundingBox, int>>& gts,
                const std::vector<Detection>& dets) {
  if (image01.rank() != 3 || image01.dim(0) != 3)
    throw DimensionError("annotate expects a [3,H,W] image, got " + shape_str(image01.shape()));
  const int height = image01.dim(1), width = image01.dim(2);
  std::vector<float> data(image01.ptr(), image01.ptr() + image01.size());
  for (const auto& [box, cls] : gts) draw_outline(data, height, width, box, 0.0f, 1.0f, 0.0f);
  for (const auto& det : dets) draw_outline(data, height, width, det.box, 1.0f, 0.0f, 0.0f);
  return Tensor(image01.shape(), std::move(data));
}

void write_pr_csv(const std::string& path, const PrCurve& curve) {
  std::string text = "cutoff,precision,recall\n";
  for (const auto& p : curve.points)
    text += format_g9(p.cutoff) + "," + format_g9(p.precision) + "," + format_g9(p.recall) + "\n";
  write_file(path, text.data(), text.size());
}

void write_compare_csv(const std::string& path, const CompareReport& report) {
  std::string text = "dataset,pipeline,f1,precision,recall,tiny_recall\n";
  for (const auto& row : report.rows)
    text += row.dataset + "," + row.pipeline + "," + format_g9(row.f1) + "," +
            format_g9(row.precision) + "," + format_g9(row.recall) + "," +
            format_g9(row.tiny_recall) + "\n";
  write_file(path, text.data(), text.size());
}

}  // namespace ganshot
