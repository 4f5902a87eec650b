#include "ddpls/augment.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "ddpls/nn.hpp"

namespace ddpls {

bool GeoRecord::invertible() const {
  return std::isfinite(scale) && scale > 0.0 && out_width > 0 && out_height > 0;
}

Point GeoRecord::apply(Point p) const {
  Point q{p.x * scale, p.y * scale};
  if (flip_h) q.x = out_width - q.x;
  if (flip_v) q.y = out_height - q.y;
  return q;
}

Point GeoRecord::invert(Point q) const {
  if (!invertible()) throw AugmentError("geometric record is not invertible");
  if (flip_h) q.x = out_width - q.x;
  if (flip_v) q.y = out_height - q.y;
  return {q.x / scale, q.y / scale};
}

OrientedBox GeoRecord::apply(const OrientedBox& box) const {
  OrientedBox out = box;
  const Point c = apply(Point{box.cx, box.cy});
  out.cx = c.x;
  out.cy = c.y;
  out.w = box.w * scale;
  out.h = box.h * scale;
  if (flip_h != flip_v) out.theta = -box.theta;
  return normalized(out);
}

OrientedBox GeoRecord::invert(const OrientedBox& box) const {
  OrientedBox out = box;
  const Point c = invert(Point{box.cx, box.cy});
  out.cx = c.x;
  out.cy = c.y;
  out.w = box.w / scale;
  out.h = box.h / scale;
  if (flip_h != flip_v) out.theta = -box.theta;
  return normalized(out);
}

Image warp_image(const Image& image, const GeoRecord& geo) {
  if (!geo.invertible()) throw AugmentError("cannot warp through a non-invertible record");
  if (geo.scale == 1.0 && !geo.flip_h && !geo.flip_v && geo.out_width == image.width &&
      geo.out_height == image.height) {
    return image;
  }
  Image out(geo.out_width, geo.out_height, image.channels);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      const Point src = geo.invert(Point{x + 0.5, y + 0.5});
      for (int c = 0; c < image.channels; ++c) out.at(c, y, x) = sample_bilinear(image, c, src.y - 0.5, src.x - 0.5);
    }
  }
  return out;
}

namespace {

constexpr std::uint64_t kPhotometricStream = 0x9e3779b97f4a7c15ull;

GeoRecord draw_geometry(std::uint64_t seed, const AugmentConfig& config, int width, int height) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  GeoRecord geo;
  geo.out_width = width;
  geo.out_height = height;
  const double u_scale = unit(rng);
  const double u_flip_h = unit(rng);
  const double u_flip_v = unit(rng);
  if (config.scale_jitter) {
    geo.scale = config.scale_range.first + u_scale * (config.scale_range.second - config.scale_range.first);
  }
  geo.flip_h = u_flip_h < config.flip_h_prob;
  geo.flip_v = u_flip_v < config.flip_v_prob;
  return geo;
}

AugmentedView make_view(const SceneSample& sample, std::uint64_t seed, const GeoRecord& geo) {
  AugmentedView view;
  view.rng_seed = seed;
  view.geo = geo;
  view.image = warp_image(sample.image, geo);
  for (const auto& b : sample.labeled_boxes()) {
    const OrientedBox m = geo.apply(b);
    if (m.cx >= 0 && m.cy >= 0 && m.cx < geo.out_width && m.cy < geo.out_height) view.boxes.push_back(m);
  }
  return view;
}

float gray_of(const Image& img, int y, int x) {
  return 0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) + 0.114f * img.at(2, y, x);
}

void clamp_unit(Image& image) {
  for (float& v : image.data) v = std::clamp(v, 0.0f, 1.0f);
}

}  // namespace

AugmentedView weak_augment(const SceneSample& sample, std::uint64_t seed, const AugmentConfig& config) {
  return make_view(sample, seed, draw_geometry(seed, config, sample.image.width, sample.image.height));
}

void apply_color_jitter(Image& image, double brightness, double contrast, double saturation) {
  if (image.channels != 3) throw AugmentError("color jitter needs 3 channels");
  for (float& v : image.data) v = static_cast<float>(v * brightness);
  clamp_unit(image);
  double mean = 0.0;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) mean += gray_of(image, y, x);
  }
  mean /= static_cast<double>(image.plane());
  for (float& v : image.data) v = static_cast<float>((v - mean) * contrast + mean);
  clamp_unit(image);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const float g = gray_of(image, y, x);
      for (int c = 0; c < 3; ++c) {
        float& v = image.at(c, y, x);
        v = static_cast<float>(g + (v - g) * saturation);
      }
    }
  }
  clamp_unit(image);
}

void apply_grayscale(Image& image) {
  if (image.channels != 3) throw AugmentError("grayscale needs 3 channels");
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const float g = std::clamp(gray_of(image, y, x), 0.0f, 1.0f);
      for (int c = 0; c < 3; ++c) image.at(c, y, x) = g;
    }
  }
}

void apply_gaussian_blur(Image& image, double sigma) {
  if (!(sigma > 0.0)) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));

  auto pass = [&](const Image& src, bool horizontal) {
    Image dst(src.width, src.height, src.channels);
    for (int c = 0; c < src.channels; ++c) {
      for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) {
          double acc = 0.0;
          double wsum = 0.0;
          for (int k = -radius; k <= radius; ++k) {
            const int xx = horizontal ? x + k : x;
            const int yy = horizontal ? y : y + k;
            if (xx < 0 || yy < 0 || xx >= src.width || yy >= src.height) continue;
            const double w = kernel[k + radius];
            acc += w * src.at(c, yy, xx);
            wsum += w;
          }
          dst.at(c, y, x) = static_cast<float>(acc / wsum);
        }
      }
    }
    return dst;
  };
  image = pass(pass(image, true), false);
}

AugmentedView strong_augment(const SceneSample& sample, std::uint64_t seed, const AugmentConfig& config) {
  AugmentedView view = weak_augment(sample, seed, config);
  std::mt19937_64 rng(seed ^ kPhotometricStream);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  // Draw every variate up front so that each op's randomness does not depend
  // on whether earlier ops fired.
  const double u_jitter = unit(rng);
  const double b = 1.0 + config.brightness * (2.0 * unit(rng) - 1.0);
  const double c = 1.0 + config.contrast * (2.0 * unit(rng) - 1.0);
  const double s = 1.0 + config.saturation * (2.0 * unit(rng) - 1.0);
  const double u_gray = unit(rng);
  const double u_blur = unit(rng);
  const double sigma = config.blur_sigma.first + unit(rng) * (config.blur_sigma.second - config.blur_sigma.first);

  if (u_jitter < config.color_jitter_prob) {
    apply_color_jitter(view.image, b, c, s);
    view.photometric.push_back({"color_jitter", {b, c, s}});
  }
  if (u_gray < config.grayscale_prob) {
    apply_grayscale(view.image);
    view.photometric.push_back({"grayscale", {}});
  }
  if (u_blur < config.blur_prob) {
    apply_gaussian_blur(view.image, sigma);
    view.photometric.push_back({"gaussian_blur", {sigma}});
  }
  return view;
}

DenseScoreMaps align_teacher_to_student(const DenseScoreMaps& teacher_maps, const GeoRecord& teacher_geo,
                                        const GeoRecord& student_geo) {
  if (!teacher_geo.invertible() || !student_geo.invertible()) {
    throw AugmentError("align_teacher_to_student: non-invertible record");
  }
  if (teacher_geo == student_geo) return teacher_maps;

  DenseScoreMaps out;
  out.num_classes = teacher_maps.num_classes;
  for (const LevelMap& t : teacher_maps.levels) {
    LevelMap s(t.stride, t.height, t.width, t.num_classes);
    const std::size_t tp = t.pixels();
    for (std::size_t i = 0; i < s.pixels(); ++i) {
      const Point q = s.location(i);
      const Point src = student_geo.invert(q);
      const Point tq = teacher_geo.apply(src);
      const double fx = tq.x / t.stride - 0.5;
      const double fy = tq.y / t.stride - 0.5;
      const int x0 = static_cast<int>(std::floor(fx));
      const int y0 = static_cast<int>(std::floor(fy));
      const double ax = fx - x0;
      const double ay = fy - y0;
      auto cls_at = [&](int c, int yy, int xx) -> double {
        if (xx < 0 || yy < 0 || xx >= t.width || yy >= t.height) return 0.0;
        return t.cls_at(c, static_cast<std::size_t>(yy) * t.width + xx);
      };
      for (int c = 0; c < t.num_classes; ++c) {
        const double v = (1 - ay) * ((1 - ax) * cls_at(c, y0, x0) + ax * cls_at(c, y0, x0 + 1)) +
                         ay * ((1 - ax) * cls_at(c, y0 + 1, x0) + ax * cls_at(c, y0 + 1, x0 + 1));
        s.cls_at(c, i) = std::clamp(v, 0.0, 1.0);
      }
      const int nx = static_cast<int>(std::lround(fx));
      const int ny = static_cast<int>(std::lround(fy));
      if (nx < 0 || ny < 0 || nx >= t.width || ny >= t.height) continue;
      const std::size_t ti = static_cast<std::size_t>(ny) * t.width + nx;
      std::array<double, kRegChannels> reg{};
      for (int k = 0; k < kRegChannels; ++k) reg[k] = t.reg[k * tp + ti];
      const OrientedBox in_teacher = decode_box(reg, t.location(ti), t.stride);
      const OrientedBox in_student = student_geo.apply(teacher_geo.invert(in_teacher));
      const auto enc = encode_box(in_student, q, s.stride);
      for (int k = 0; k < kRegChannels; ++k) s.reg_at(k, i) = enc[k];
    }
    out.levels.push_back(std::move(s));
  }
  return out;
}

}  // namespace ddpls
