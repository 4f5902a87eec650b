#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ddpls/geometry.hpp"

namespace ddpls {

struct ClassCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t num_gt = 0;
};

struct EvalReport {
  /// Mean of per_class_ap over classes with at least one ground-truth box; 0 when there are none.
  double map = 0.0;
  std::vector<double> per_class_ap;
  double iou_threshold = 0.5;
  std::vector<ClassCounts> counts;
};

/// One precision/recall point per prediction of a class, in greedy order.
struct PrCurve {
  std::vector<double> precision;
  std::vector<double> recall;
};

/// Area under the precision envelope (running max from the right) over recall.
double average_precision(const PrCurve& curve);

/// Rotated-IoU mAP. preds[i] and gts[i] belong to image i. Predictions of one
/// class are sorted by descending score (stable, so input order breaks ties)
/// and each takes the highest-IoU unmatched ground truth of its image at
/// IoU >= iou_threshold.
EvalReport evaluate(const std::vector<std::vector<OrientedBox>>& preds,
                    const std::vector<std::vector<OrientedBox>>& gts, int num_classes,
                    double iou_threshold = 0.5, std::vector<PrCurve>* curves = nullptr);

std::string report_to_json(const EvalReport& report, const std::vector<std::string>& class_names);

}  // namespace ddpls
