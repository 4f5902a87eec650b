#include "ddpls/eval.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace ddpls {

double average_precision(const PrCurve& curve) {
  const std::size_t n = curve.precision.size();
  if (n == 0) return 0.0;
  std::vector<double> envelope(curve.precision);
  for (std::size_t i = n - 1; i-- > 0;) envelope[i] = std::max(envelope[i], envelope[i + 1]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (curve.recall[i] - prev_recall) * envelope[i];
    prev_recall = curve.recall[i];
  }
  return ap;
}

EvalReport evaluate(const std::vector<std::vector<OrientedBox>>& preds,
                    const std::vector<std::vector<OrientedBox>>& gts, int num_classes, double iou_threshold,
                    std::vector<PrCurve>* curves) {
  if (preds.size() != gts.size()) throw std::invalid_argument("evaluate: prediction and ground-truth image counts differ");
  EvalReport report;
  report.iou_threshold = iou_threshold;
  report.per_class_ap.assign(num_classes, 0.0);
  report.counts.assign(num_classes, {});
  if (curves) curves->assign(num_classes, {});

  struct Ref {
    std::size_t image;
    std::size_t index;
    double score;
  };
  double ap_sum = 0.0;
  int classes_with_gt = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<Ref> order;
    std::size_t num_gt = 0;
    std::vector<std::vector<char>> matched(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) {
      matched[i].assign(gts[i].size(), 0);
      for (const auto& g : gts[i]) num_gt += g.class_id == c;
      for (std::size_t j = 0; j < preds[i].size(); ++j) {
        if (preds[i][j].class_id == c) order.push_back({i, j, preds[i][j].score});
      }
    }
    std::stable_sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });

    ClassCounts& counts = report.counts[c];
    counts.num_gt = num_gt;
    PrCurve curve;
    for (const Ref& r : order) {
      const OrientedBox& p = preds[r.image][r.index];
      double best = -1.0;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < gts[r.image].size(); ++j) {
        const OrientedBox& g = gts[r.image][j];
        if (g.class_id != c || matched[r.image][j]) continue;
        const double iou = rotated_iou(p, g);
        if (iou > best) {
          best = iou;
          best_j = j;
        }
      }
      if (best >= iou_threshold) {
        matched[r.image][best_j] = 1;
        ++counts.tp;
      } else {
        ++counts.fp;
      }
      curve.precision.push_back(static_cast<double>(counts.tp) / static_cast<double>(counts.tp + counts.fp));
      curve.recall.push_back(num_gt ? static_cast<double>(counts.tp) / static_cast<double>(num_gt) : 0.0);
    }
    counts.fn = num_gt - counts.tp;
    if (num_gt > 0) {
      report.per_class_ap[c] = average_precision(curve);
      ap_sum += report.per_class_ap[c];
      ++classes_with_gt;
    }
    if (curves) (*curves)[c] = std::move(curve);
  }
  report.map = classes_with_gt ? ap_sum / classes_with_gt : 0.0;
  return report;
}

std::string report_to_json(const EvalReport& report, const std::vector<std::string>& class_names) {
  nlohmann::json j;
  j["map"] = report.map;
  j["iou_threshold"] = report.iou_threshold;
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < report.per_class_ap.size(); ++c) {
    const auto& k = report.counts[c];
    classes.push_back({{"class", c < class_names.size() ? class_names[c] : std::to_string(c)},
                       {"ap", report.per_class_ap[c]},
                       {"tp", k.tp},
                       {"fp", k.fp},
                       {"fn", k.fn},
                       {"num_gt", k.num_gt}});
  }
  j["classes"] = classes;
  return j.dump(2);
}

}  // namespace ddpls
