#include <doctest.h>

#include <cmath>
#include <random>

#include "ddpls/augment.hpp"

using namespace ddpls;

namespace {

SceneSample sample_scene() {
  DensityProfile p;
  p.image_size = 64;
  p.cluster_radius = 30.0;
  return generate_scene(p, "aug");
}

Image random_image(std::mt19937_64& rng, int w, int h) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(w, h, 3);
  for (float& v : img.data) v = u(rng);
  return img;
}

double mean(const Image& img) {
  double s = 0.0;
  for (float v : img.data) s += v;
  return s / static_cast<double>(img.data.size());
}

AugmentConfig no_photometric() {
  AugmentConfig c;
  c.color_jitter_prob = 0.0;
  c.grayscale_prob = 0.0;
  c.blur_prob = 0.0;
  return c;
}

}  // namespace

TEST_CASE("augmentation is deterministic per seed") {
  const SceneSample s = sample_scene();
  for (std::uint64_t seed : {0ull, 1ull, 99ull}) {
    const AugmentedView a = strong_augment(s, seed), b = strong_augment(s, seed);
    CHECK(a.image == b.image);
    CHECK(a.geo == b.geo);
    CHECK(a.boxes == b.boxes);
    CHECK(a.photometric.size() == b.photometric.size());
    const AugmentedView w = weak_augment(s, seed);
    CHECK(w.photometric.empty());
    CHECK(w.geo == a.geo);
  }
}

TEST_CASE("identity configuration leaves the sample unchanged") {
  const SceneSample s = sample_scene();
  AugmentConfig c = no_photometric();
  c.scale_jitter = false;
  c.flip_h_prob = 0.0;
  c.flip_v_prob = 0.0;
  const AugmentedView v = strong_augment(s, 5, c);
  CHECK(v.image == s.image);
  CHECK(v.geo.scale == 1.0);
  CHECK(v.boxes == s.boxes);
}

TEST_CASE("strong equals weak when photometric probabilities are zero") {
  const SceneSample s = sample_scene();
  const AugmentConfig c = no_photometric();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const AugmentedView a = strong_augment(s, seed, c), b = weak_augment(s, seed, c);
    CHECK(a.image == b.image);
    CHECK(a.geo == b.geo);
    CHECK(a.photometric.empty());
  }
}

TEST_CASE("strong views stay in range and record their ops") {
  const SceneSample s = sample_scene();
  bool saw_gray = false;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const AugmentedView v = strong_augment(s, seed);
    for (float x : v.image.data) {
      REQUIRE(x >= 0.0f);
      REQUIRE(x <= 1.0f);
    }
    for (const auto& op : v.photometric) {
      CHECK((op.name == "color_jitter" || op.name == "grayscale" || op.name == "gaussian_blur"));
      if (op.name == "color_jitter") {
        for (double f : op.params) CHECK(std::abs(f - 1.0) <= 0.4);
      }
      if (op.name == "gaussian_blur") {
        CHECK(op.params[0] >= 0.1);
        CHECK(op.params[0] <= 2.0);
      }
      saw_gray |= op.name == "grayscale";
    }
  }
  CHECK(saw_gray);
}

TEST_CASE("horizontal flip of a box") {
  const GeoRecord g{1.0, true, false, 100, 80};
  const OrientedBox b = normalized({30, 20, 12, 5, 0.4});
  const OrientedBox f = g.apply(b);
  CHECK(f.cx == doctest::Approx(70.0));
  CHECK(f.cy == doctest::Approx(20.0));
  CHECK(f.theta == doctest::Approx(-0.4));
  std::vector<Point> mirrored;
  for (const auto& c : corners(b)) mirrored.push_back({100 - c.x, c.y});
  CHECK(rotated_iou(f, min_area_rect(mirrored)) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("geometric records round trip boxes") {
  std::mt19937_64 rng(20);
  std::uniform_real_distribution<double> pos(0, 128), side(2, 30), ang(-kHalfPi, kHalfPi), sc(0.5, 1.5);
  std::bernoulli_distribution coin(0.5);
  for (int i = 0; i < 1000; ++i) {
    const GeoRecord g{sc(rng), coin(rng), coin(rng), 128, 128};
    const OrientedBox b = normalized({pos(rng), pos(rng), side(rng), side(rng), ang(rng)});
    const OrientedBox r = g.invert(g.apply(b));
    CHECK(std::abs(r.cx - b.cx) <= 1e-6);
    CHECK(std::abs(r.cy - b.cy) <= 1e-6);
    CHECK(std::abs(r.w - b.w) <= 1e-6);
    CHECK(std::abs(r.h - b.h) <= 1e-6);
    CHECK(rotated_iou(r, b) == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK_FALSE(GeoRecord{0.0, false, false, 10, 10}.invertible());
  CHECK_FALSE(GeoRecord{1.0, false, false, 0, 10}.invertible());
}

TEST_CASE("photometric ops") {
  std::mt19937_64 rng(21);
  Image img = random_image(rng, 16, 12);
  apply_grayscale(img);
  for (std::size_t p = 0; p < 16 * 12; ++p) {
    CHECK(img.data[p] == img.data[16 * 12 + p]);
    CHECK(img.data[p] == img.data[2 * 16 * 12 + p]);
  }
  Image j = random_image(rng, 16, 12);
  const Image before = j;
  apply_color_jitter(j, 1.0, 1.0, 1.0);
  for (std::size_t i = 0; i < j.data.size(); ++i) CHECK(j.data[i] == doctest::Approx(before.data[i]).epsilon(1e-6));
  apply_color_jitter(j, 1.4, 0.6, 1.4);
  for (float v : j.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("gaussian blur matches a direct 2D convolution and keeps the mean") {
  std::mt19937_64 rng(22);
  const Image src = random_image(rng, 24, 20);
  for (double sigma : {0.1, 0.7, 2.0}) {
    Image got = src;
    apply_gaussian_blur(got, sigma);
    const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) {
          double acc = 0.0, norm = 0.0;
          for (int dy = -r; dy <= r; ++dy) {
            for (int dx = -r; dx <= r; ++dx) {
              const int xx = x + dx, yy = y + dy;
              if (xx < 0 || yy < 0 || xx >= src.width || yy >= src.height) continue;
              const double w = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
              acc += w * src.at(c, yy, xx);
              norm += w;
            }
          }
          REQUIRE(std::abs(got.at(c, y, x) - acc / norm) <= 1e-5);
        }
      }
    }
  }
  const Image big = random_image(rng, 64, 64);
  Image blurred = big;
  apply_gaussian_blur(blurred, 2.0);
  CHECK(std::abs(mean(blurred) - mean(big)) <= 1e-3);
}

TEST_CASE("align_teacher_to_student") {
  std::mt19937_64 rng(23);
  DenseScoreMaps t = make_maps(64, 64, 2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& lv : t.levels) {
    for (double& v : lv.cls) v = u(rng);
    for (double& v : lv.reg) v = 0.2 * (u(rng) - 0.5);
  }
  const GeoRecord id{1.0, false, false, 64, 64};

  SUBCASE("identical records give the input") {
    const GeoRecord g{0.8, true, false, 64, 64};
    const DenseScoreMaps a = align_teacher_to_student(t, g, g);
    for (std::size_t l = 0; l < t.levels.size(); ++l) {
      CHECK(a.levels[l].cls == t.levels[l].cls);
      CHECK(a.levels[l].reg == t.levels[l].reg);
    }
  }
  SUBCASE("a horizontal flip mirrors along the width") {
    const GeoRecord flip{1.0, true, false, 64, 64};
    const DenseScoreMaps a = align_teacher_to_student(t, id, flip);
    for (std::size_t l = 0; l < t.levels.size(); ++l) {
      const auto& tl = t.levels[l];
      for (int c = 0; c < tl.num_classes; ++c) {
        for (int y = 0; y < tl.height; ++y) {
          for (int x = 0; x < tl.width; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * tl.width + x;
            const std::size_t q = static_cast<std::size_t>(y) * tl.width + (tl.width - 1 - x);
            CHECK(a.levels[l].cls_at(c, p) == doctest::Approx(tl.cls_at(c, q)).epsilon(1e-12));
          }
        }
      }
      // Decoded boxes are the mirrored teacher boxes.
      const std::size_t p = 3;
      const std::size_t q = tl.width - 1 - 3;
      std::array<double, kRegChannels> rs{}, rt{};
      for (int k = 0; k < kRegChannels; ++k) {
        rs[k] = a.levels[l].reg_at(k, p);
        rt[k] = tl.reg_at(k, q);
      }
      const OrientedBox bs = decode_box(rs, a.levels[l].location(p), tl.stride);
      const OrientedBox bt = decode_box(rt, tl.location(q), tl.stride);
      CHECK(rotated_iou(bs, flip.apply(bt)) == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  SUBCASE("scale 0.5 downsamples a delta map and keeps its mass") {
    DenseScoreMaps delta = make_maps(64, 64, 1);
    auto& lv = delta.levels[0];
    lv.cls_at(0, 5 * lv.width + 7) = 1.0;
    const GeoRecord half{0.5, false, false, 64, 64};
    const DenseScoreMaps a = align_teacher_to_student(delta, id, half);
    double mass = 0.0;
    for (double v : a.levels[0].cls) mass += v;
    CHECK(mass * 4.0 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(a.levels[0].cls_at(0, 2 * lv.width + 3) > 0.0);
  }
  SUBCASE("non-invertible records are rejected") {
    CHECK_THROWS_AS(align_teacher_to_student(t, id, GeoRecord{0.0, false, false, 64, 64}), AugmentError);
  }
}
