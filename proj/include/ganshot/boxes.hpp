#pragma once

#include <algorithm>

// Axis-aligned boxes in normalized [0,1] image coordinates, center form.

namespace ganshot {

struct BoundingBox {
  float cx = 0, cy = 0, w = 0, h = 0;

  float x0() const { return cx - w / 2; }
  float y0() const { return cy - h / 2; }
  float x1() const { return cx + w / 2; }
  float y1() const { return cy + h / 2; }

  static BoundingBox from_corners(float x0, float y0, float x1, float y1) {
    return {(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
  }
};

struct Detection {
  BoundingBox box;
  int class_id = 0;
  float score = 0;
};

inline float iou(const BoundingBox& a, const BoundingBox& b) {
  const float ix = std::max(0.0f, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const float iy = std::max(0.0f, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const float inter = ix * iy;
  const float uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0f;
}

}  // namespace ganshot
