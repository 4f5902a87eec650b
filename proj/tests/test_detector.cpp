#include <doctest.h>

#include <cmath>
#include <random>

#include "ddpls/detector.hpp"
#include "oracles.hpp"

using namespace ddpls;

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

Image random_image(std::mt19937_64& rng, int w, int h) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(w, h, 3);
  for (float& v : img.data) v = u(rng);
  return img;
}

// Maps whose cls entries are sigmoid(logits) for the returned logits.
DenseScoreMaps maps_from_logits(const std::vector<std::vector<double>>& logits, const DenseScoreMaps& shape) {
  DenseScoreMaps m = shape;
  for (std::size_t l = 0; l < m.levels.size(); ++l) {
    for (std::size_t i = 0; i < logits[l].size(); ++i) m.levels[l].cls[i] = sigmoid(logits[l][i]);
  }
  return m;
}

bool close_rel(double analytic, double numeric, double tol) {
  return std::abs(analytic - numeric) <= tol * std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

}  // namespace

TEST_CASE("forward shapes and pixel count") {
  const Detector det;
  const ParameterSet params = det.init_params(1);
  std::mt19937_64 rng(1);
  const DenseScoreMaps maps = det.forward(random_image(rng, 128, 128), params);
  REQUIRE(maps.levels.size() == 3);
  CHECK(maps.levels[0].height == 32);
  CHECK(maps.levels[1].width == 16);
  CHECK(maps.levels[2].height == 8);
  CHECK(maps.total_pixels() == 1344);
  for (const auto& l : maps.levels) {
    CHECK(l.cls.size() == l.pixels() * 3);
    CHECK(l.reg.size() == l.pixels() * kRegChannels);
  }
  maps.validate();
  CHECK_THROWS_AS(det.forward(random_image(rng, 120, 128), params), ShapeError);
}

TEST_CASE("forward is deterministic and starts at the prior") {
  const Detector det;
  ParameterSet params = det.init_params(2);
  std::mt19937_64 rng(2);
  const Image img = random_image(rng, 64, 64);
  const DenseScoreMaps a = det.forward(img, params);
  const DenseScoreMaps b = det.forward(img, params);
  for (std::size_t l = 0; l < a.levels.size(); ++l) {
    CHECK(a.levels[l].cls == b.levels[l].cls);
    CHECK(a.levels[l].reg == b.levels[l].reg);
  }
  const double bias = params.get("head.cls.bias").values[0];
  CHECK(bias == doctest::Approx(-4.59512).epsilon(1e-5));
  for (double& w : params.get("head.cls.weight").values) w = 0.0;
  const DenseScoreMaps z = det.forward(img, params);
  for (const auto& l : z.levels) {
    for (double v : l.cls) CHECK(v == sigmoid(bias));
  }
  CHECK(sigmoid(bias) == doctest::Approx(0.01).epsilon(1e-9));
}

TEST_CASE("level assignment by long side") {
  const DetectorConfig cfg;
  CHECK(level_for_box({0, 0, 10, 5, 0}, cfg) == 0);
  CHECK(level_for_box({0, 0, 16, 5, 0}, cfg) == 1);
  CHECK(level_for_box({0, 0, 5, 23.9, 0}, cfg) == 1);
  CHECK(level_for_box({0, 0, 24, 5, 0}, cfg) == 2);
}

TEST_CASE("assign_targets basic cases") {
  const DetectorConfig cfg;
  const DenseScoreMaps shape = make_maps(32, 32, 3);
  const auto none = assign_targets({}, shape, cfg);
  CHECK(none.num_positive() == 0);

  // A box covering the whole image whose long side still falls in level 0.
  DetectorConfig wide = cfg;
  wide.scale_bounds = {100.0, 200.0};
  const std::vector<OrientedBox> cover{{16, 16, 40, 40, 0, 2}};
  const auto full = assign_targets(cover, shape, wide);
  CHECK(full.levels[0].positive == std::vector<std::uint8_t>(64, 1));
  CHECK(full.levels[1].positive == std::vector<std::uint8_t>(16, 0));
  CHECK(full.levels[0].target_class[5] == 2);
}

TEST_CASE("nested boxes: the inner region goes to the smaller box") {
  DetectorConfig cfg;
  cfg.scale_bounds = {100.0, 200.0};
  const DenseScoreMaps shape = make_maps(32, 32, 2);
  const std::vector<OrientedBox> boxes{{16, 16, 30, 30, 0, 0}, {16, 16, 10, 10, 0, 1}};
  const auto a = assign_targets(boxes, shape, cfg);
  const auto& l0 = a.levels[0];
  for (std::size_t p = 0; p < l0.positive.size(); ++p) {
    const Point loc = shape.levels[0].location(p);
    const bool inner = std::abs(loc.x - 16) <= 5 && std::abs(loc.y - 16) <= 5;
    CHECK(l0.positive[p] == 1);
    CHECK(l0.target_index[p] == (inner ? 1 : 0));
  }
}

TEST_CASE("assign_targets equals an exhaustive per-pixel oracle") {
  const DetectorConfig cfg;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> pos(0, 32), side(3, 30), ang(-kHalfPi, kHalfPi);
  std::uniform_int_distribution<int> count(0, 3), cls(0, 2);
  for (int trial = 0; trial < 300; ++trial) {
    const int size = trial % 2 ? 32 : 16;
    const DenseScoreMaps shape = make_maps(size, size, 3);
    std::vector<OrientedBox> boxes;
    const int n = count(rng);
    for (int i = 0; i < n; ++i) boxes.push_back({pos(rng), pos(rng), side(rng), side(rng), ang(rng), cls(rng)});
    const auto got = assign_targets(boxes, shape, cfg);
    for (std::size_t l = 0; l < shape.levels.size(); ++l) {
      const auto& lv = shape.levels[l];
      for (int r = 0; r < lv.height; ++r) {
        for (int c = 0; c < lv.width; ++c) {
          const Point loc{(c + 0.5) * lv.stride, (r + 0.5) * lv.stride};
          int want = -1;
          for (int b = 0; b < n; ++b) {
            const double long_side = std::max(boxes[b].w, boxes[b].h);
            const int level = long_side < 16 ? 0 : (long_side < 24 ? 1 : 2);
            if (level != static_cast<int>(l)) continue;
            if (!oracle::inside_convex(loc, oracle::box_polygon(boxes[b]))) continue;
            if (want < 0 || boxes[b].w * boxes[b].h < boxes[want].w * boxes[want].h) want = b;
          }
          const std::size_t p = static_cast<std::size_t>(r) * lv.width + c;
          REQUIRE(got.levels[l].target_index[p] == want);
          CHECK(got.levels[l].positive[p] == (want >= 0));
          if (want >= 0) CHECK(got.levels[l].target_class[p] == boxes[want].class_id);
        }
      }
    }
  }
}

TEST_CASE("encode and decode are inverse") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> pos(0, 64), side(2, 40), ang(-kHalfPi, kHalfPi);
  for (int i = 0; i < 500; ++i) {
    const OrientedBox b = normalized({pos(rng), pos(rng), side(rng), side(rng), ang(rng)});
    const Point loc{pos(rng), pos(rng)};
    const auto enc = encode_box(b, loc, 8);
    const OrientedBox d = decode_box(enc, loc, 8);
    CHECK(d.cx == doctest::Approx(b.cx).epsilon(1e-9));
    CHECK(d.w == doctest::Approx(b.w).epsilon(1e-9));
    CHECK(d.h == doctest::Approx(b.h).epsilon(1e-9));
    CHECK(d.theta == doctest::Approx(b.theta).epsilon(1e-9));
  }
}

TEST_CASE("focal loss hand value and zero cases") {
  CHECK(sigmoid_focal_term(0.5, true, 0.25, 2.0) == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));
  CHECK(sigmoid_focal_term(0.5, true, 0.25, 2.0) == doctest::Approx(0.04332).epsilon(1e-4));
  CHECK(sigmoid_focal_term(1.0, true, 0.25, 2.0) == 0.0);
  CHECK(sigmoid_focal_term(0.0, false, 0.25, 2.0) == 0.0);

  const DetectorConfig cfg;
  DenseScoreMaps preds = make_maps(32, 32, 3);
  const std::vector<OrientedBox> boxes{{10, 12, 12, 6, 0.4, 1}};
  const auto targets = assign_targets(boxes, preds, cfg);
  REQUIRE(targets.num_positive() > 0);
  for (std::size_t l = 0; l < preds.levels.size(); ++l) {
    auto& lv = preds.levels[l];
    const auto& la = targets.levels[l];
    for (std::size_t p = 0; p < lv.pixels(); ++p) {
      if (la.target_class[p] >= 0) lv.cls_at(la.target_class[p], p) = 1.0;
      for (int k = 0; k < kRegChannels; ++k) lv.reg_at(k, p) = la.target_reg[k * lv.pixels() + p];
    }
  }
  const LossReport perfect = supervised_loss(preds, targets);
  CHECK(perfect.cls == 0.0);
  CHECK(perfect.reg == 0.0);

  const auto empty = assign_targets({}, preds, cfg);
  DenseScoreMaps half = make_maps(32, 32, 3);
  for (auto& lv : half.levels) std::fill(lv.cls.begin(), lv.cls.end(), 0.5);
  const LossReport bg = supervised_loss(half, empty);
  CHECK(bg.reg == 0.0);
  CHECK(bg.cls == doctest::Approx(84 * 3 * 0.75 * 0.25 * std::log(2.0)).epsilon(1e-12));

  half.levels[0].cls[0] = NAN;
  CHECK_THROWS_AS(supervised_loss(half, empty), NumericError);
}

TEST_CASE("supervised loss gradient matches central differences") {
  const DetectorConfig cfg;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z(0.0, 2.0);
  std::uniform_real_distribution<double> pos(4, 28), side(6, 30), ang(-kHalfPi, kHalfPi);
  const double eps = 1e-4;
  for (int trial = 0; trial < 10; ++trial) {
    DenseScoreMaps shape = make_maps(32, 32, 3);
    std::vector<std::vector<double>> logits;
    for (auto& lv : shape.levels) {
      logits.emplace_back(lv.cls.size());
      for (double& v : logits.back()) v = z(rng);
      for (double& v : lv.reg) v = z(rng) * 0.5;
    }
    std::vector<OrientedBox> boxes;
    for (int b = 0; b < 3; ++b) boxes.push_back({pos(rng), pos(rng), side(rng), side(rng), ang(rng), b});
    const auto targets = assign_targets(boxes, shape, cfg);
    const DenseScoreMaps preds = maps_from_logits(logits, shape);
    MapGradients g = MapGradients::zeros_like(preds);
    supervised_loss(preds, targets, {}, &g);

    std::uniform_int_distribution<std::size_t> pick_level(0, 2);
    for (int k = 0; k < 10; ++k) {
      const std::size_t l = pick_level(rng);
      const bool reg = k % 2 == 1;
      std::vector<double>& vec = reg ? shape.levels[l].reg : logits[l];
      std::uniform_int_distribution<std::size_t> pick(0, vec.size() - 1);
      const std::size_t i = pick(rng);
      const double orig = vec[i];
      vec[i] = orig + eps;
      const double up = supervised_loss(maps_from_logits(logits, shape), targets).total();
      vec[i] = orig - eps;
      const double down = supervised_loss(maps_from_logits(logits, shape), targets).total();
      vec[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double analytic = reg ? g.reg[l][i] : g.cls[l][i];
      CHECK(close_rel(analytic, numeric, 1e-3));
    }
  }
}

TEST_CASE("network backward matches central differences") {
  DetectorConfig cfg;
  cfg.stem_channels = 4;
  cfg.stage_channels = {4, 6, 8};
  cfg.fpn_channels = 4;
  const Detector det(cfg);
  std::mt19937_64 rng(6);
  ParameterSet params = det.init_params(6);
  for (double& v : params.get("head.cls.weight").values) v *= 30.0;
  for (double& v : params.get("head.reg.weight").values) v *= 30.0;
  const Image img = random_image(rng, 32, 32);
  const std::vector<OrientedBox> boxes{{12, 14, 12, 7, 0.3, 0}, {22, 20, 20, 9, -0.8, 1}};

  auto loss_of = [&](const ParameterSet& p) {
    const DenseScoreMaps maps = det.forward(img, p);
    return supervised_loss(maps, assign_targets(boxes, maps, cfg)).total();
  };
  ForwardTape tape;
  const DenseScoreMaps maps = det.forward(img, params, &tape);
  MapGradients g = MapGradients::zeros_like(maps);
  supervised_loss(maps, assign_targets(boxes, maps, cfg), {}, &g);
  ParameterSet grads = params.zeros_like();
  det.backward(tape, params, g, grads);

  const double eps = 1e-4;
  int checked = 0;
  for (auto& arr : params.arrays()) {
    std::uniform_int_distribution<std::size_t> pick(0, arr.values.size() - 1);
    for (int k = 0; k < 2; ++k) {
      const std::size_t i = pick(rng);
      const double orig = arr.values[i];
      arr.values[i] = orig + eps;
      const double up = loss_of(params);
      arr.values[i] = orig - eps;
      const double down = loss_of(params);
      arr.values[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double analytic = grads.get(arr.name).values[i];
      INFO(arr.name, "[", i, "] analytic ", analytic, " numeric ", numeric);
      CHECK(std::abs(analytic - numeric) <= 1e-3 * std::max(std::abs(numeric), std::abs(analytic)) + 1e-7);
      ++checked;
    }
  }
  CHECK(checked == 2 * static_cast<int>(params.arrays().size()));
}

TEST_CASE("rotated NMS and decoding") {
  const std::vector<OrientedBox> twins{{10, 10, 8, 4, 0.2, 0, 0.8}, {10, 10, 8, 4, 0.2, 0, 0.9}};
  const auto kept = rotated_nms(twins, 0.5);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);
  const std::vector<OrientedBox> other_class{{10, 10, 8, 4, 0.2, 0, 0.8}, {10, 10, 8, 4, 0.2, 1, 0.9}};
  CHECK(rotated_nms(other_class, 0.5).size() == 2);

  DenseScoreMaps maps = make_maps(32, 32, 2);
  for (auto& lv : maps.levels) std::fill(lv.cls.begin(), lv.cls.end(), 0.01);
  CHECK(decode_predictions(maps).empty());
  auto& lv = maps.levels[1];
  const std::size_t p = 5;
  lv.cls_at(1, p) = 0.7;
  lv.reg_at(2, p) = std::log(2.0);
  const auto dets = decode_predictions(maps);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].class_id == 1);
  CHECK(dets[0].score == 0.7);
  CHECK(dets[0].cx == lv.location(p).x);
  CHECK(dets[0].w == doctest::Approx(16.0));
}
