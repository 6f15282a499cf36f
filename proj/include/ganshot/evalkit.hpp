#pragma once

#include <string>
#include <vector>

#include "ganshot/boxes.hpp"
#include "ganshot/detector.hpp"
#include "ganshot/gan.hpp"

// Detection post-processing and measurement: suppression, precision/recall
// curves, and the side-by-side pipeline comparison.

namespace ganshot {

struct EvalConfig {
  float score_threshold = 0.5f;
  float nms_threshold = 0.2f;
  float iou_match_threshold = 0.5f;
};

// Greedy class-wise suppression. Detections are ranked by score, ties broken
// by lower class id then input position; a lower-ranked detection is dropped
// when a kept detection of the same class overlaps it at IoU >= threshold.
// The survivors come back in rank order.
std::vector<Detection> nms(const std::vector<Detection>& dets, float overlap_threshold);

struct PrPoint {
  float cutoff = 0;
  float precision = 0;
  float recall = 0;
};

struct PrCurve {
  std::vector<PrPoint> points;  // one per distinct score, ascending cutoff
  float f1_at_default = 0;
};

// Score-ordered greedy matching of detections to same-class ground truths at
// IoU >= iou_match_threshold, each ground truth claimed at most once. Points
// report precision and recall with only detections scoring >= cutoff kept;
// f1_at_default evaluates at cfg.score_threshold. Precision is 1 when nothing
// clears the cutoff, f1 is 0 without true positives, and recall is NaN when
// the ground-truth set is empty.
PrCurve pr_curve(const std::vector<std::vector<Detection>>& dets,
                 const std::vector<std::vector<std::pair<BoundingBox, int>>>& gts,
                 const EvalConfig& cfg = {});

struct CompareRow {
  std::string dataset;
  std::string pipeline;
  float f1 = 0;
  float precision = 0;
  float recall = 0;
  float tiny_recall = 0;  // recall over ground truths at most 8 px across
};

struct CompareReport {
  std::vector<CompareRow> rows;
};

// Detects each scene twice from its downsampled copy: once naively upsampled
// back to detector resolution ("ssd") and once restored by the enhancer
// ("dcgan+ssd"). Both passes share cfg; rows report metrics at the default
// score threshold. The enhancer fixes the downsample factor and must target
// the detectors' input size.
CompareReport compare_pipelines(const std::string& dataset,
                                const std::vector<SyntheticScene>& scenes,
                                const SsdModel& ssd_naive, const GanModel& enhancer,
                                const SsdModel& ssd_enhanced, const EvalConfig& cfg = {});

// Copy of the image with ground-truth outlines in green and detection
// outlines in red, detections drawn on top.
Tensor annotate(const Tensor& image01, const std::vector<std::pair<BoundingBox, int>>& gts,
                const std::vector<Detection>& dets);

void write_pr_csv(const std::string& path, const PrCurve& curve);
void write_compare_csv(const std::string& path, const CompareReport& report);

}  // namespace ganshot
