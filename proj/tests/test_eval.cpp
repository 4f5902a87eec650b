#include <doctest.h>

#include <random>

#include "ddpls/eval.hpp"
#include "oracles.hpp"

using namespace ddpls;

namespace {

OrientedBox box(double cx, double cy, double w, double h, double theta, int cls, double score = 1.0) {
  OrientedBox b{cx, cy, w, h, theta};
  b.class_id = cls;
  b.score = score;
  return b;
}

// Square shifted along x so that its IoU with the unit-10 square equals iou.
double shift_for_iou(double iou) { return 10.0 - 20.0 * iou / (1.0 + iou); }

}  // namespace

TEST_CASE("perfect and empty predictions") {
  const std::vector<std::vector<OrientedBox>> gts{{box(10, 10, 8, 4, 0.3, 0), box(30, 30, 6, 6, 0, 1)},
                                                  {box(20, 20, 10, 5, -0.7, 0)}};
  std::vector<std::vector<OrientedBox>> perfect = gts;
  for (auto& img : perfect) {
    for (auto& b : img) b.score = 0.9;
  }
  const EvalReport r = evaluate(perfect, gts, 2);
  CHECK(r.map == doctest::Approx(1.0));
  CHECK(r.counts[0].tp == 2);
  CHECK(r.counts[0].fn == 0);

  const EvalReport none = evaluate({{}, {}}, gts, 2);
  CHECK(none.map == 0.0);
  CHECK(none.counts[1].fn == 1);

  const EvalReport no_gt = evaluate({{}, {}}, {{}, {}}, 2);
  CHECK(no_gt.map == 0.0);
  CHECK_THROWS(evaluate({{}}, gts, 2));
}

TEST_CASE("hand-computed AP of 0.5") {
  const std::vector<std::vector<OrientedBox>> gts{{box(0, 0, 10, 10, 0, 0), box(50, 0, 10, 10, 0, 0)}};
  const std::vector<std::vector<OrientedBox>> preds{
      {box(shift_for_iou(0.7), 0, 10, 10, 0, 0, 0.9), box(50 + shift_for_iou(0.2), 0, 10, 10, 0, 0, 0.8)}};
  CHECK(rotated_iou(preds[0][0], gts[0][0]) == doctest::Approx(0.7));
  std::vector<PrCurve> curves;
  const EvalReport r = evaluate(preds, gts, 1, 0.5, &curves);
  CHECK(r.per_class_ap[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(curves[0].precision == std::vector<double>{1.0, 0.5});
  CHECK(curves[0].recall == std::vector<double>{0.5, 0.5});
}

TEST_CASE("average_precision envelope") {
  CHECK(average_precision({{1.0, 0.5, 2.0 / 3.0}, {0.5, 0.5, 1.0}}) == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0));
  CHECK(average_precision({{}, {}}) == 0.0);
}

TEST_CASE("evaluate matches the threshold-enumeration oracle") {
  std::mt19937_64 rng(30);
  std::uniform_real_distribution<double> pos(0, 40), side(4, 14), ang(-kHalfPi, kHalfPi), jitter(-3, 3), u(0, 1);
  std::uniform_int_distribution<int> ngt(0, 4), cls(0, 1), nimg(1, 3);
  for (int trial = 0; trial < 300; ++trial) {
    oracle::ApCase k;
    const int images = nimg(rng);
    int npred = 0;
    for (int i = 0; i < images; ++i) {
      k.gts.emplace_back();
      k.preds.emplace_back();
      const int n = ngt(rng);
      for (int g = 0; g < n; ++g) k.gts.back().push_back(box(pos(rng), pos(rng), side(rng), side(rng), ang(rng), cls(rng)));
      for (const auto& g : k.gts.back()) {
        if (npred < 10 && u(rng) < 0.8) {
          k.preds.back().push_back(box(g.cx + jitter(rng), g.cy + jitter(rng), g.w, g.h, g.theta, g.class_id, u(rng)));
          ++npred;
        }
      }
      if (npred < 10 && u(rng) < 0.5) {
        k.preds.back().push_back(box(pos(rng), pos(rng), side(rng), side(rng), ang(rng), cls(rng), u(rng)));
        ++npred;
      }
    }
    const EvalReport r = evaluate(k.preds, k.gts, 2);
    CHECK(r.map == doctest::Approx(oracle::mean_ap_by_thresholds(k, 2, 0.5)).epsilon(1e-9));
  }
}

TEST_CASE("AP depends only on score order") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> pos(0, 40), jitter(-3, 3), u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<OrientedBox>> gts(1), preds(1);
    for (int g = 0; g < 5; ++g) {
      gts[0].push_back(box(pos(rng), pos(rng), 8, 5, 0.2, 0));
      preds[0].push_back(box(gts[0].back().cx + jitter(rng), gts[0].back().cy, 8, 5, 0.2, 0, u(rng)));
    }
    auto rescaled = preds;
    for (auto& b : rescaled[0]) b.score = 0.1 + 0.5 * b.score * b.score;
    CHECK(evaluate(preds, gts, 1).map == evaluate(rescaled, gts, 1).map);
  }
}

TEST_CASE("a duplicate detection never raises AP") {
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> pos(0, 40), jitter(-2, 2), u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<OrientedBox>> gts(1), preds(1);
    for (int g = 0; g < 4; ++g) {
      gts[0].push_back(box(30.0 * g + jitter(rng), pos(rng), 9, 6, -0.4, 0));
      preds[0].push_back(box(gts[0].back().cx + jitter(rng), gts[0].back().cy, 9, 6, -0.4, 0, u(rng)));
    }
    const double base = evaluate(preds, gts, 1).map;
    auto dup = preds;
    OrientedBox extra = preds[0][trial % 4];
    extra.score *= u(rng);  // a higher-scored copy would take the match first
    dup[0].push_back(extra);
    CHECK(evaluate(dup, gts, 1).map <= base + 1e-12);
  }
}

TEST_CASE("report JSON names classes") {
  const std::vector<std::vector<OrientedBox>> gts{{box(0, 0, 10, 10, 0, 0)}};
  const EvalReport r = evaluate(gts, gts, 1);
  const std::string j = report_to_json(r, {"plane"});
  CHECK(j.find("\"plane\"") != std::string::npos);
  CHECK(j.find("\"map\"") != std::string::npos);
}
