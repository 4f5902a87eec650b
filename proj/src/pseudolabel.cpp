#include "ddpls/pseudolabel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ddpls {

PdsResult compute_pds(const DenseScoreMaps& maps) {
  PdsResult result;
  double sum = 0.0;
  for (const auto& level : maps.levels) {
    const std::size_t p = level.pixels();
    std::vector<double> best(p, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
      double m = level.num_classes > 0 ? level.cls_at(0, i) : 0.0;
      for (int c = 1; c < level.num_classes; ++c) m = std::max(m, level.cls_at(c, i));
      best[i] = m;
      sum += m;
    }
    result.n_total += p;
    result.per_pixel_max.push_back(std::move(best));
  }
  if (result.n_total == 0) throw ShapeError("compute_pds: empty score maps");
  result.s_pds = sum / static_cast<double>(result.n_total);
  return result;
}

std::size_t selection_count(double ratio_percent, std::size_t n) {
  const double f = std::clamp(ratio_percent / 100.0, 0.0, 1.0);
  const double k = std::floor(f * static_cast<double>(n) + 0.5);
  return std::min(n, static_cast<std::size_t>(std::max(0.0, k)));
}

SelectionMask select_top_k(const PdsResult& pds, std::size_t k) {
  struct Entry {
    double score;
    std::uint32_t level;
    std::uint32_t pixel;
  };
  std::vector<Entry> entries;
  entries.reserve(pds.n_total);
  for (std::size_t l = 0; l < pds.per_pixel_max.size(); ++l) {
    const auto& s = pds.per_pixel_max[l];
    for (std::size_t i = 0; i < s.size(); ++i) {
      entries.push_back({s[i], static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(i)});
    }
  }
  k = std::min(k, entries.size());
  auto before = [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.level != b.level) return a.level < b.level;
    return a.pixel < b.pixel;
  };
  std::partial_sort(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(k), entries.end(), before);

  SelectionMask mask;
  for (const auto& s : pds.per_pixel_max) mask.levels.emplace_back(s.size(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    mask.levels[entries[i].level][entries[i].pixel] = 1;
    mask.confidence_sum += entries[i].score;
  }
  mask.k_selected = k;
  return mask;
}

SelectionMask select_fixed_ratio(const PdsResult& pds, double ratio_percent) {
  return select_top_k(pds, selection_count(ratio_percent, pds.n_total));
}

SelectionMask select_fixed_ratio(const DenseScoreMaps& maps, double ratio_percent) {
  return select_fixed_ratio(compute_pds(maps), ratio_percent);
}

SelectionMask select_ddpls(const PdsResult& pds, double beta) {
  SelectionMask mask = select_fixed_ratio(pds, beta * pds.s_pds);
  mask.beta = beta;
  return mask;
}

SelectionMask select_ddpls(const DenseScoreMaps& maps, double beta) { return select_ddpls(compute_pds(maps), beta); }

DensePseudoLabel build_dense_pseudo_label(const DenseScoreMaps& teacher_maps, SelectionMask mask) {
  if (mask.levels.size() != teacher_maps.levels.size()) throw ShapeError("selection mask level count mismatch");
  DensePseudoLabel out;
  out.targets.num_classes = teacher_maps.num_classes;
  for (std::size_t l = 0; l < teacher_maps.levels.size(); ++l) {
    const LevelMap& src = teacher_maps.levels[l];
    if (mask.levels[l].size() != src.pixels()) throw ShapeError("selection mask shape mismatch");
    LevelMap dst(src.stride, src.height, src.width, src.num_classes);
    const std::size_t p = src.pixels();
    for (std::size_t i = 0; i < p; ++i) {
      if (!mask.levels[l][i]) continue;
      for (int c = 0; c < src.num_classes; ++c) dst.cls_at(c, i) = src.cls_at(c, i);
      for (int k = 0; k < kRegChannels; ++k) dst.reg_at(k, i) = src.reg_at(k, i);
    }
    out.targets.levels.push_back(std::move(dst));
  }
  out.mask = std::move(mask);
  return out;
}

namespace {

double xlog(double coefficient, double x) { return coefficient == 0.0 ? 0.0 : coefficient * std::log(x); }

double smooth_l1_value(double r, double beta) {
  const double a = std::abs(r);
  return a < beta ? 0.5 * a * a / beta : a - 0.5 * beta;
}

double smooth_l1_slope(double r, double beta) {
  const double a = std::abs(r);
  if (a < beta) return r / beta;
  return r > 0 ? 1.0 : -1.0;
}

}  // namespace

double quality_focal_term(double student, double target, double gamma) {
  const double diff = std::abs(target - student);
  if (diff == 0.0) return 0.0;
  const double bce = -(xlog(target, student) + xlog(1.0 - target, 1.0 - student));
  return std::pow(diff, gamma) * bce;
}

LossReport unsupervised_loss(const DenseScoreMaps& student_maps, const DensePseudoLabel& pseudo,
                             const UnsupervisedLossOptions& options, MapGradients* grad, double grad_scale) {
  if (!student_maps.same_shape(pseudo.targets)) throw ShapeError("student and pseudo-label shapes differ");
  for (const auto& l : student_maps.levels) {
    for (double v : l.cls) {
      if (std::isnan(v)) throw NumericError("NaN in student cls predictions");
    }
    for (double v : l.reg) {
      if (!std::isfinite(v)) throw NumericError("non-finite student regression");
    }
  }
  const double norm = std::max<double>(1.0, static_cast<double>(pseudo.mask.k_selected));
  const double g = options.qfl_gamma;
  LossReport report;
  for (std::size_t l = 0; l < student_maps.levels.size(); ++l) {
    const LevelMap& s = student_maps.levels[l];
    const LevelMap& t = pseudo.targets.levels[l];
    const std::size_t p = s.pixels();
    for (int c = 0; c < s.num_classes; ++c) {
      for (std::size_t i = 0; i < p; ++i) {
        const double sv = s.cls_at(c, i);
        const double tv = t.cls_at(c, i);
        report.cls += quality_focal_term(sv, tv, g);
        if (grad) {
          const double d = sv - tv;
          if (d == 0.0) continue;
          const double ad = std::abs(d);
          const double bce = -(xlog(tv, sv) + xlog(1.0 - tv, 1.0 - sv));
          // d/dz with s = sigmoid(z): |d|^g * d + bce * g * |d|^(g-1) * sign(d) * s(1-s)
          const double dz = std::pow(ad, g) * d + bce * g * std::pow(ad, g - 1.0) * (d > 0 ? 1.0 : -1.0) * sv * (1.0 - sv);
          grad->cls[l][c * p + i] += grad_scale * dz / norm;
        }
      }
    }
    const auto& sel = pseudo.mask.levels[l];
    for (std::size_t i = 0; i < p; ++i) {
      if (!sel[i]) continue;
      double w = options.reg_weight;
      if (options.score_weighted_reg) {
        double best = 0.0;
        for (int c = 0; c < t.num_classes; ++c) best = std::max(best, t.cls_at(c, i));
        w *= best;
      }
      for (int k = 0; k < kRegChannels; ++k) {
        const double r = s.reg_at(k, i) - t.reg_at(k, i);
        report.reg += w * smooth_l1_value(r, options.smooth_l1_beta);
        if (grad) {
          grad->reg[l][k * p + i] += grad_scale * w * smooth_l1_slope(r, options.smooth_l1_beta) / norm;
        }
      }
    }
  }
  report.cls /= norm;
  report.reg /= norm;
  return report;
}

}  // namespace ddpls
