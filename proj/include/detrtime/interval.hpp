#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "detrtime/common.hpp"
#include "detrtime/events.hpp"

namespace detrtime {

// 1D box algebra on [start, end] intervals. The functions are pure
// arithmetic and accept any real coordinates with start <= end; window
// normalization is a convention of the callers, not a requirement here.
struct Interval {
  double start = 0.0;
  double end = 0.0;

  double measure() const { return end - start; }
};

// (center, length) -> boundaries, clamped into [0,1].
inline Interval cl_to_interval(double center, double length) {
  Interval iv;
  iv.start = std::clamp(center - length / 2.0, 0.0, 1.0);
  iv.end = std::clamp(center + length / 2.0, 0.0, 1.0);
  return iv;
}

// L1 distance between boundary pairs, computed on the unclamped boundaries
// so it stays a metric on (center, length) boxes.
inline double l1_box(std::array<double, 2> a, std::array<double, 2> b) {
  const double a_start = a[0] - a[1] / 2.0, a_end = a[0] + a[1] / 2.0;
  const double b_start = b[0] - b[1] / 2.0, b_end = b[0] + b[1] / 2.0;
  return std::abs(a_start - b_start) + std::abs(a_end - b_end);
}

inline double l1_interval(const Interval& a, const Interval& b) {
  return std::abs(a.start - b.start) + std::abs(a.end - b.end);
}

// |a∩b| / |a∪b|; 0 when the union has zero measure (degenerate intervals are
// legal inputs: the prediction head can emit near-zero lengths).
inline double iou_1d(const Interval& a, const Interval& b) {
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = a.measure() + b.measure() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

// IoU minus the normalized hull slack: IoU - (|hull| - |a∪b|) / |hull| where
// the hull is the smallest interval containing both. Lies in (-1, 1]; equals
// IoU exactly when the hull coincides with the union.
inline double giou_1d(const Interval& a, const Interval& b) {
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = a.measure() + b.measure() - inter;
  const double hull = std::max(a.end, b.end) - std::min(a.start, b.start);
  const double iou = uni <= 0.0 ? 0.0 : inter / uni;
  if (hull <= 0.0) return iou;
  return iou - (hull - uni) / hull;
}

// Rectangular pairwise matching costs: rows are predictions, columns targets.
struct CostMatrix {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> values;  // row-major

  CostMatrix() = default;
  CostMatrix(std::int64_t r, std::int64_t c)
      : rows(r), cols(c), values(static_cast<std::size_t>(r * c), 0.0) {}

  double& at(std::int64_t i, std::int64_t j) {
    return values[static_cast<std::size_t>(i * cols + j)];
  }
  double at(std::int64_t i, std::int64_t j) const {
    return values[static_cast<std::size_t>(i * cols + j)];
  }
};

// entry(i,j) = w_class*(-p_i[class_j]) + w_bbox*l1_box(box_i, box_j)
//            + w_giou*(-giou_1d(box_i, box_j)).
// The class term uses -p (not -log p): matcher costs and loss coefficients
// are configured separately.
inline CostMatrix build_cost_matrix(const std::vector<std::vector<double>>& pred_class_probs,
                                    const std::vector<std::array<double, 2>>& pred_boxes,
                                    const EventSet& targets, double w_class, double w_bbox,
                                    double w_giou) {
  const auto n = static_cast<std::int64_t>(pred_class_probs.size());
  if (static_cast<std::int64_t>(pred_boxes.size()) != n) {
    throw ShapeError("build_cost_matrix: " + std::to_string(pred_class_probs.size()) +
                     " probability rows vs " + std::to_string(pred_boxes.size()) + " box rows");
  }
  const auto m = static_cast<std::int64_t>(targets.events.size());
  CostMatrix cost(n, m);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& probs = pred_class_probs[static_cast<std::size_t>(i)];
    const auto& box = pred_boxes[static_cast<std::size_t>(i)];
    const Interval pred_iv = cl_to_interval(box[0], box[1]);
    for (std::int64_t j = 0; j < m; ++j) {
      const Event& tgt = targets.events[static_cast<std::size_t>(j)];
      if (tgt.class_id >= probs.size()) {
        throw ShapeError("build_cost_matrix: target class " + std::to_string(int(tgt.class_id)) +
                         " out of range for " + std::to_string(probs.size()) + " class columns");
      }
      const Interval tgt_iv = cl_to_interval(tgt.center, tgt.length);
      cost.at(i, j) = w_class * (-probs[tgt.class_id]) +
                      w_bbox * l1_box(box, {tgt.center, tgt.length}) +
                      w_giou * (-giou_1d(pred_iv, tgt_iv));
    }
  }
  return cost;
}

}  // namespace detrtime
