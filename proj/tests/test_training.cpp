#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "ddpls/experiment.hpp"
#include "ddpls/training.hpp"

using namespace ddpls;

namespace {

ParameterSet filled(double v, std::size_t n = 7) {
  ParameterSet p;
  p.add("a.weight", {static_cast<int>(n)}, v);
  p.add("a.bias", {2}, v);
  return p;
}

double max_gap(const ParameterSet& a, const ParameterSet& b) {
  double g = 0.0;
  for (std::size_t i = 0; i < a.arrays().size(); ++i) {
    for (std::size_t k = 0; k < a.arrays()[i].values.size(); ++k) {
      g = std::max(g, std::abs(a.arrays()[i].values[k] - b.arrays()[i].values[k]));
    }
  }
  return g;
}

// Small detector and tiny scenes so that full runs take well under a second.
TrainConfig tiny_config() {
  TrainConfig c;
  c.detector.stem_channels = 4;
  c.detector.stage_channels = {4, 6, 8};
  c.detector.fpn_channels = 4;
  c.detector.scale_bounds = {8.0, 12.0};
  c.iterations = 8;
  c.burn_in = 4;
  c.alpha_warmup = 2;
  c.eval_interval = 0;
  c.lr = 0.01;
  return c;
}

std::vector<SceneSample> tiny_scenes(int n, int labeled_percent) {
  DensityProfile p;
  p.image_size = 32;
  p.num_clusters = 1;
  p.objects_per_cluster = {2, 4};
  p.scale_range = {5.0, 14.0};
  p.cluster_radius = 14.0;
  auto scenes = generate_split(p, "t", n);
  split_labeled(scenes, labeled_percent, 0);
  return scenes;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("EMA update cases") {
  TeacherStudentState s{filled(0.0), filled(1.0), 0.0};
  ema_update(s);
  CHECK(s.teacher == filled(0.0));
  s.lambda = 1.0;
  ema_update(s);
  CHECK(s.teacher == filled(1.0));
  CHECK(s.student == filled(1.0));

  TeacherStudentState t{filled(0.0), filled(1.0), 0.001};
  ema_update(t);
  CHECK(t.teacher.get("a.weight").values[0] == doctest::Approx(0.001).epsilon(1e-15));

  TeacherStudentState bad{filled(0.0, 3), filled(1.0, 4), 0.5};
  CHECK_THROWS_AS(ema_update(bad), ShapeError);
}

TEST_CASE("EMA contracts the gap by (1 - lambda) per step") {
  std::mt19937_64 rng(40);
  std::uniform_real_distribution<double> u(-1.0, 1.0), lam(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    TeacherStudentState s{filled(0.0), filled(0.0), lam(rng)};
    for (auto& a : s.teacher.arrays()) {
      for (double& v : a.values) v = u(rng);
    }
    for (auto& a : s.student.arrays()) {
      for (double& v : a.values) v = u(rng);
    }
    const ParameterSet student = s.student;
    double gap = max_gap(s.teacher, s.student);
    const double gap0 = gap;
    const int n = 1 + trial % 20;
    for (int i = 0; i < n; ++i) {
      ema_update(s);
      const double next = max_gap(s.teacher, s.student);
      CHECK(next == doctest::Approx((1.0 - s.lambda) * gap).epsilon(1e-9));
      gap = next;
    }
    CHECK(s.student == student);
    CHECK(gap <= std::pow(1.0 - s.lambda, n) * gap0 * (1 + 1e-9) + 1e-15);
  }
}

TEST_CASE("batch composition") {
  CHECK(batch_split(3, {2, 1}) == std::pair{2, 1});
  CHECK(batch_split(3, {1, 0}) == std::pair{3, 0});
  CHECK(batch_split(4, {1, 1}) == std::pair{2, 2});
  CHECK_THROWS_AS(batch_split(3, {0, 0}), ConfigError);

  SamplerConfig cfg;
  cfg.labeled_pool = {0, 1, 2, 3, 4};
  cfg.unlabeled_pool = {10, 11, 12, 13, 14, 15, 16};
  const BatchPlan a = compose_batch(cfg, 7);
  const BatchPlan b = compose_batch(cfg, 7);
  CHECK(a.labeled == b.labeled);
  CHECK(a.unlabeled == b.unlabeled);
  CHECK(a.labeled_seeds == b.labeled_seeds);
  CHECK(a.labeled.size() == 2);
  CHECK(a.unlabeled.size() == 1);

  // Seven unlabeled draws, one per iteration, visit every unlabeled id once.
  std::set<std::size_t> seen;
  for (int it = 0; it < 7; ++it) seen.insert(compose_batch(cfg, it).unlabeled[0]);
  CHECK(seen.size() == 7);

  cfg.sample_ratio = {1, 0};
  const BatchPlan sup = compose_batch(cfg, 0);
  CHECK(sup.labeled.size() == 3);
  CHECK(sup.unlabeled.empty());

  SamplerConfig empty = cfg;
  empty.sample_ratio = {2, 1};
  empty.unlabeled_pool.clear();
  CHECK_THROWS_AS(compose_batch(empty, 0), ConfigError);
}

TEST_CASE("alpha ramp and learning rate schedule") {
  TrainConfig c;
  CHECK(effective_alpha(c, 0) == doctest::Approx(2.0 / 500));
  CHECK(effective_alpha(c, 499) == 2.0);
  CHECK(effective_alpha(c, 5000) == 2.0);
  c.alpha_warmup = 0;
  CHECK(effective_alpha(c, 0) == 2.0);
  c.lr_steps = {100};
  CHECK(learning_rate(c, 99) == c.lr);
  CHECK(learning_rate(c, 100) == doctest::Approx(c.lr * 0.1));
}

TEST_CASE("train_step reports the loss identity and leaves the teacher alone in burn-in") {
  const TrainConfig config = tiny_config();
  const Detector det(config.detector);
  const auto scenes = tiny_scenes(12, 50);
  SamplerConfig sc;
  for (std::size_t i = 0; i < scenes.size(); ++i) (scenes[i].is_labeled ? sc.labeled_pool : sc.unlabeled_pool).push_back(i);

  TeacherStudentState state{det.init_params(1), det.init_params(1), config.ema_lambda};
  OptimizerState opt{state.student.zeros_like()};
  const std::uint64_t teacher_hash = state.teacher.content_hash();
  const auto burn = train_step(state, opt, materialize_batch(compose_batch(sc, 0), scenes, config.augment), det,
                               config, true);
  CHECK(state.teacher.content_hash() == teacher_hash);
  CHECK_FALSE(state.student == state.teacher);
  CHECK(burn.l_u == 0.0);
  CHECK(burn.pseudo.empty());
  CHECK(state.iteration == 1);

  state.teacher = state.student;
  for (int it = 1; it < 4; ++it) {
    const auto r = train_step(state, opt, materialize_batch(compose_batch(sc, it), scenes, config.augment), det,
                              config, false);
    CHECK(r.total == doctest::Approx(r.l_s + r.alpha * r.l_u).epsilon(1e-12));
    REQUIRE(r.pseudo.size() == 1);
    const auto& p = r.pseudo[0];
    CHECK(p.k_selected == selection_count(config.beta * p.s_pds, p.n_total));
    const auto j = r.to_json();
    CHECK(j["phase"] == "semi");
    CHECK(j["k_selected"] == p.k_selected);
  }

  TrainConfig copy_all = config;
  copy_all.ema_lambda = 1.0;
  state.lambda = 1.0;
  train_step(state, opt, materialize_batch(compose_batch(sc, 9), scenes, config.augment), det, copy_all, false);
  CHECK(state.teacher == state.student);
}

TEST_CASE("a non-finite loss aborts with a snapshot") {
  const TrainConfig config = tiny_config();
  const Detector det(config.detector);
  const auto scenes = tiny_scenes(4, 100);
  SamplerConfig sc;
  sc.labeled_pool = {0, 1, 2, 3};
  sc.sample_ratio = {1, 0};
  TeacherStudentState state{det.init_params(1), det.init_params(1), config.ema_lambda};
  for (double& v : state.student.get("head.cls.bias").values) v = NAN;
  OptimizerState opt{state.student.zeros_like()};
  try {
    train_step(state, opt, materialize_batch(compose_batch(sc, 0), scenes, config.augment), det, config, true);
    FAIL("expected TrainingAbort");
  } catch (const TrainingAbort& e) {
    CHECK(e.snapshot().find("iteration") != std::string::npos);
  } catch (const std::exception&) {
    // A NumericError from the loss is an equally valid abort.
  }
}

TEST_CASE("the 1:0 arm follows the supervised trajectory bitwise") {
  TrainConfig semi = tiny_config();
  semi.sample_ratio = {1, 0};
  TrainConfig sup = semi;
  sup.burn_in = sup.iterations;
  const auto scenes = tiny_scenes(8, 50);
  const RunResult a = run_training(semi, scenes, {});
  const RunResult b = run_training(sup, scenes, {});
  CHECK(a.state.student == b.state.student);
  for (const auto& s : a.steps) CHECK(s.l_u == 0.0);
}

TEST_CASE("budget equal to burn-in yields teacher == student") {
  TrainConfig c = tiny_config();
  c.iterations = c.burn_in;
  const RunResult r = run_training(c, tiny_scenes(8, 50), {});
  CHECK(r.state.teacher == r.state.student);
  CHECK(r.steps.size() == static_cast<std::size_t>(c.burn_in));
  for (const auto& s : r.steps) CHECK(s.burn_in);
}

TEST_CASE("runs are reproducible and resumable") {
  const auto root = std::filesystem::temp_directory_path() / "ddpls_training_test";
  std::filesystem::remove_all(root);
  const auto scenes = tiny_scenes(8, 50);
  const auto test = tiny_scenes(2, 100);
  TrainConfig c = tiny_config();
  c.eval_interval = 4;

  const RunResult a = run_training(c, scenes, test, RunPaths{(root / "a").string()});
  const RunResult b = run_training(c, scenes, test, RunPaths{(root / "b").string()});
  CHECK(read_file(root / "a" / "metrics.jsonl") == read_file(root / "b" / "metrics.jsonl"));
  CHECK(a.state.teacher == b.state.teacher);

  TrainConfig half = c;
  half.iterations = 6;
  run_training(half, scenes, test, RunPaths{(root / "r").string()});
  const RunResult resumed = run_training(c, scenes, test, RunPaths{(root / "r").string()}, (root / "r").string());
  CHECK(resumed.state.student == a.state.student);
  CHECK(resumed.state.teacher == a.state.teacher);

  const Checkpoint ck = load_checkpoint((root / "a" / "teacher.ckpt").string());
  CHECK(ck.iteration == c.iterations);
  CHECK(ck.set("teacher") == a.state.teacher);
  CHECK_THROWS_AS(ck.set("nope"), CheckpointError);

  TrainConfig other = c;
  other.beta = 50.0;
  CHECK_THROWS_AS(run_training(other, scenes, test, RunPaths{(root / "x").string()}, (root / "a").string()),
                  CheckpointError);
  std::filesystem::remove_all(root);
}

TEST_CASE("config JSON round trip and validation") {
  TrainConfig c = tiny_config();
  c.selection = SelectionMode::kFixedRatio;
  c.fixed_ratio = 3.5;
  c.sample_ratio = {1, 1};
  c.lr_steps = {5, 7};
  const TrainConfig r = train_config_from_json(to_json(c));
  CHECK(to_json(r) == to_json(c));
  CHECK(config_hash(r) == config_hash(c));
  TrainConfig longer = c;
  longer.iterations = 1000;
  CHECK(config_hash(longer) == config_hash(c));
  longer.beta = 7;
  CHECK(config_hash(longer) != config_hash(c));

  nlohmann::json j = to_json(c);
  j["bogus"] = 1;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
  nlohmann::json sel = to_json(c);
  sel["selection"] = "greedy";
  CHECK_THROWS_AS(train_config_from_json(sel), ConfigError);

  TrainConfig bad;
  bad.ema_lambda = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.sample_ratio = {0, 0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
