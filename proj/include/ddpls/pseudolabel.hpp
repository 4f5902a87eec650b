#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ddpls/detector.hpp"

namespace ddpls {

/// Pseudo Density Score of one teacher output: the mean, over every pixel of
/// every pyramid level, of the per-pixel maximum class probability.
struct PdsResult {
  double s_pds = 0.0;
  /// Per level, per pixel: max over classes (row-major, same indexing as LevelMap).
  std::vector<std::vector<double>> per_pixel_max;
  std::size_t n_total = 0;
};

/// Throws ShapeError when the maps hold no pixels.
PdsResult compute_pds(const DenseScoreMaps& maps);

/// Selected dense pseudo-label pixels.
struct SelectionMask {
  std::vector<std::vector<std::uint8_t>> levels;
  std::size_t k_selected = 0;
  double beta = 0.0;
  /// Sum of per-pixel max scores over the selected pixels.
  double confidence_sum = 0.0;

  bool selected(std::size_t level, std::size_t pixel) const { return levels[level][pixel] != 0; }
};

/// round-half-up(clamp(ratio_percent / 100, 0, 1) * n).
std::size_t selection_count(double ratio_percent, std::size_t n);

/// Marks the k largest per-pixel scores over all levels jointly. Equal scores
/// are taken in ascending (level, row, column) order.
SelectionMask select_top_k(const PdsResult& pds, std::size_t k);

/// Density-guided selection: keeps the top beta * S_PDS percent of pixels.
SelectionMask select_ddpls(const DenseScoreMaps& maps, double beta);
SelectionMask select_ddpls(const PdsResult& pds, double beta);

/// Fixed-ratio baseline: keeps the top `ratio_percent` percent of pixels.
SelectionMask select_fixed_ratio(const DenseScoreMaps& maps, double ratio_percent);
SelectionMask select_fixed_ratio(const PdsResult& pds, double ratio_percent);

/// Teacher targets restricted to the selection: cls and reg copied at
/// selected pixels, zero everywhere else.
struct DensePseudoLabel {
  SelectionMask mask;
  DenseScoreMaps targets;
};

DensePseudoLabel build_dense_pseudo_label(const DenseScoreMaps& teacher_maps, SelectionMask mask);

struct UnsupervisedLossOptions {
  double qfl_gamma = 2.0;
  double smooth_l1_beta = 1.0 / 9.0;
  double reg_weight = 1.0;
  /// Scale each selected pixel's regression term by the teacher's max class score there.
  bool score_weighted_reg = true;
};

double quality_focal_term(double student, double target, double gamma);

/// Quality focal loss against the soft targets on every pixel and class, plus
/// smooth-L1 to the teacher regression on selected pixels (optionally scaled
/// by the teacher's max class score); both divided by max(1, k_selected). Adds grad_scale * gradient into `grad` when given.
LossReport unsupervised_loss(const DenseScoreMaps& student_maps, const DensePseudoLabel& pseudo,
                             const UnsupervisedLossOptions& options = {}, MapGradients* grad = nullptr,
                             double grad_scale = 1.0);

}  // namespace ddpls
