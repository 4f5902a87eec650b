#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ddpls/datasets.hpp"
#include "ddpls/detector.hpp"

namespace ddpls {

class AugmentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AugmentConfig {
  bool scale_jitter = true;
  std::pair<double, double> scale_range{0.5, 1.5};
  double flip_h_prob = 0.5;
  double flip_v_prob = 0.5;

  double color_jitter_prob = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double grayscale_prob = 0.2;
  double blur_prob = 0.5;
  std::pair<double, double> blur_sigma{0.1, 2.0};

  /// When true the strong view reuses the weak view's geometric draw.
  bool shared_geometry = true;
};

/// Scale about the origin followed by optional flips of the output canvas.
/// Maps source point (x, y) to (fx(s * x), fy(s * y)) with f(v) = W - v when flipped.
struct GeoRecord {
  double scale = 1.0;
  bool flip_h = false;
  bool flip_v = false;
  int out_width = 0;
  int out_height = 0;

  bool invertible() const;
  Point apply(Point p) const;
  Point invert(Point p) const;
  OrientedBox apply(const OrientedBox& box) const;
  OrientedBox invert(const OrientedBox& box) const;

  friend bool operator==(const GeoRecord&, const GeoRecord&) = default;
};

struct PhotometricOp {
  std::string name;  // "color_jitter", "grayscale" or "gaussian_blur"
  std::vector<double> params;
};

struct AugmentedView {
  Image image;
  GeoRecord geo;
  std::vector<PhotometricOp> photometric;
  std::uint64_t rng_seed = 0;
  /// Labeled boxes mapped into the view; centers outside the canvas are dropped.
  std::vector<OrientedBox> boxes;
};

/// Resamples `image` through `geo` onto geo.out_width x geo.out_height (bilinear, zero fill).
Image warp_image(const Image& image, const GeoRecord& geo);

/// Scale jitter and random flips; deterministic per seed.
AugmentedView weak_augment(const SceneSample& sample, std::uint64_t seed, const AugmentConfig& config = {});

/// Weak geometry plus color jitter, random grayscale and Gaussian blur.
AugmentedView strong_augment(const SceneSample& sample, std::uint64_t seed, const AugmentConfig& config = {});

void apply_color_jitter(Image& image, double brightness, double contrast, double saturation);
void apply_grayscale(Image& image);
/// Separable Gaussian blur whose kernel is renormalized over in-image taps.
void apply_gaussian_blur(Image& image, double sigma);

/// Resamples teacher maps so pixel (l, i, j) refers to the same source location
/// as the student's pixel (l, i, j): bilinear for cls, nearest for reg (whose
/// boxes are re-encoded in the student frame).
DenseScoreMaps align_teacher_to_student(const DenseScoreMaps& teacher_maps, const GeoRecord& teacher_geo,
                                        const GeoRecord& student_geo);

}  // namespace ddpls
