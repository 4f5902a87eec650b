#include "ddpls/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

namespace ddpls {

using json = nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Reads `key` from `j` into `out` when present.
template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (sample_ratio.first < 0 || sample_ratio.second < 0 || sample_ratio.first + sample_ratio.second == 0) {
    throw ConfigError("sample_ratio must be two non-negative integers, not both zero");
  }
  if (iterations < 0 || burn_in < 0) throw ConfigError("iterations and burn_in must be non-negative");
  if (!(ema_lambda >= 0.0 && ema_lambda <= 1.0)) throw ConfigError("ema_lambda must lie in [0, 1]");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be finite and non-negative");
  if (!(fixed_ratio >= 0.0 && fixed_ratio <= 100.0)) throw ConfigError("fixed_ratio must lie in [0, 100]");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be finite and non-negative");
  if (alpha_warmup < 0) throw ConfigError("alpha_warmup must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (detector.num_classes <= 0) throw ConfigError("num_classes must be positive");
  if (augment.scale_range.first <= 0.0 || augment.scale_range.second < augment.scale_range.first) {
    throw ConfigError("augment.scale_range must be positive and ordered");
  }
}

json to_json(const TrainConfig& c) {
  json j;
  j["detector"] = {{"num_classes", c.detector.num_classes},
                   {"stem_channels", c.detector.stem_channels},
                   {"stage_channels", c.detector.stage_channels},
                   {"fpn_channels", c.detector.fpn_channels},
                   {"scale_bounds", c.detector.scale_bounds},
                   {"cls_prior", c.detector.cls_prior}};
  j["supervised_loss"] = {{"focal_alpha", c.supervised.focal_alpha},
                          {"focal_gamma", c.supervised.focal_gamma},
                          {"smooth_l1_beta", c.supervised.smooth_l1_beta},
                          {"reg_weight", c.supervised.reg_weight}};
  j["unsupervised_loss"] = {{"qfl_gamma", c.unsupervised.qfl_gamma},
                            {"smooth_l1_beta", c.unsupervised.smooth_l1_beta},
                            {"reg_weight", c.unsupervised.reg_weight},
                            {"score_weighted_reg", c.unsupervised.score_weighted_reg}};
  const AugmentConfig& a = c.augment;
  j["augment"] = {{"scale_jitter", a.scale_jitter},
                  {"scale_range", {a.scale_range.first, a.scale_range.second}},
                  {"flip_h_prob", a.flip_h_prob},
                  {"flip_v_prob", a.flip_v_prob},
                  {"color_jitter_prob", a.color_jitter_prob},
                  {"brightness", a.brightness},
                  {"contrast", a.contrast},
                  {"saturation", a.saturation},
                  {"grayscale_prob", a.grayscale_prob},
                  {"blur_prob", a.blur_prob},
                  {"blur_sigma", {a.blur_sigma.first, a.blur_sigma.second}},
                  {"shared_geometry", a.shared_geometry}};
  j["decode"] = {{"score_thresh", c.decode.score_thresh},
                 {"nms_iou", c.decode.nms_iou},
                 {"pre_nms_top_k", c.decode.pre_nms_top_k},
                 {"max_detections", c.decode.max_detections}};
  j["selection"] = c.selection == SelectionMode::kDensityGuided ? "ddpls" : "fixed";
  j["beta"] = c.beta;
  j["fixed_ratio"] = c.fixed_ratio;
  j["alpha"] = c.alpha;
  j["alpha_warmup"] = c.alpha_warmup;
  j["ema_lambda"] = c.ema_lambda;
  j["batch_size"] = c.batch_size;
  j["sample_ratio"] = {c.sample_ratio.first, c.sample_ratio.second};
  j["iterations"] = c.iterations;
  j["burn_in"] = c.burn_in;
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["lr_steps"] = c.lr_steps;
  j["lr_gamma"] = c.lr_gamma;
  j["eval_interval"] = c.eval_interval;
  j["checkpoint_interval"] = c.checkpoint_interval;
  j["seed"] = c.seed;
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  reject_unknown(j,
                 {"detector", "supervised_loss", "unsupervised_loss", "augment", "decode", "selection", "beta",
                  "fixed_ratio", "alpha", "alpha_warmup", "ema_lambda", "batch_size", "sample_ratio", "iterations",
                  "burn_in", "lr", "momentum", "weight_decay", "lr_steps", "lr_gamma", "eval_interval",
                  "checkpoint_interval", "seed"},
                 "train");
  TrainConfig c;
  if (j.contains("detector")) {
    const json& d = j["detector"];
    reject_unknown(d, {"num_classes", "stem_channels", "stage_channels", "fpn_channels", "scale_bounds", "cls_prior"},
                   "train.detector");
    read(d, "num_classes", c.detector.num_classes);
    read(d, "stem_channels", c.detector.stem_channels);
    read(d, "stage_channels", c.detector.stage_channels);
    read(d, "fpn_channels", c.detector.fpn_channels);
    read(d, "scale_bounds", c.detector.scale_bounds);
    read(d, "cls_prior", c.detector.cls_prior);
  }
  if (j.contains("supervised_loss")) {
    const json& s = j["supervised_loss"];
    reject_unknown(s, {"focal_alpha", "focal_gamma", "smooth_l1_beta", "reg_weight"}, "train.supervised_loss");
    read(s, "focal_alpha", c.supervised.focal_alpha);
    read(s, "focal_gamma", c.supervised.focal_gamma);
    read(s, "smooth_l1_beta", c.supervised.smooth_l1_beta);
    read(s, "reg_weight", c.supervised.reg_weight);
  }
  if (j.contains("unsupervised_loss")) {
    const json& u = j["unsupervised_loss"];
    reject_unknown(u, {"qfl_gamma", "smooth_l1_beta", "reg_weight", "score_weighted_reg"}, "train.unsupervised_loss");
    read(u, "qfl_gamma", c.unsupervised.qfl_gamma);
    read(u, "smooth_l1_beta", c.unsupervised.smooth_l1_beta);
    read(u, "reg_weight", c.unsupervised.reg_weight);
    read(u, "score_weighted_reg", c.unsupervised.score_weighted_reg);
  }
  if (j.contains("augment")) {
    const json& a = j["augment"];
    reject_unknown(a,
                   {"scale_jitter", "scale_range", "flip_h_prob", "flip_v_prob", "color_jitter_prob", "brightness",
                    "contrast", "saturation", "grayscale_prob", "blur_prob", "blur_sigma", "shared_geometry"},
                   "train.augment");
    read(a, "scale_jitter", c.augment.scale_jitter);
    read(a, "scale_range", c.augment.scale_range);
    read(a, "flip_h_prob", c.augment.flip_h_prob);
    read(a, "flip_v_prob", c.augment.flip_v_prob);
    read(a, "color_jitter_prob", c.augment.color_jitter_prob);
    read(a, "brightness", c.augment.brightness);
    read(a, "contrast", c.augment.contrast);
    read(a, "saturation", c.augment.saturation);
    read(a, "grayscale_prob", c.augment.grayscale_prob);
    read(a, "blur_prob", c.augment.blur_prob);
    read(a, "blur_sigma", c.augment.blur_sigma);
    read(a, "shared_geometry", c.augment.shared_geometry);
  }
  if (j.contains("decode")) {
    const json& d = j["decode"];
    reject_unknown(d, {"score_thresh", "nms_iou", "pre_nms_top_k", "max_detections"}, "train.decode");
    read(d, "score_thresh", c.decode.score_thresh);
    read(d, "nms_iou", c.decode.nms_iou);
    read(d, "pre_nms_top_k", c.decode.pre_nms_top_k);
    read(d, "max_detections", c.decode.max_detections);
  }
  if (j.contains("selection")) {
    std::string mode;
    read(j, "selection", mode);
    if (mode == "ddpls") {
      c.selection = SelectionMode::kDensityGuided;
    } else if (mode == "fixed") {
      c.selection = SelectionMode::kFixedRatio;
    } else {
      throw ConfigError("selection must be 'ddpls' or 'fixed'");
    }
  }
  read(j, "beta", c.beta);
  read(j, "fixed_ratio", c.fixed_ratio);
  read(j, "alpha", c.alpha);
  read(j, "alpha_warmup", c.alpha_warmup);
  read(j, "ema_lambda", c.ema_lambda);
  read(j, "batch_size", c.batch_size);
  read(j, "sample_ratio", c.sample_ratio);
  read(j, "iterations", c.iterations);
  read(j, "burn_in", c.burn_in);
  read(j, "lr", c.lr);
  read(j, "momentum", c.momentum);
  read(j, "weight_decay", c.weight_decay);
  read(j, "lr_steps", c.lr_steps);
  read(j, "lr_gamma", c.lr_gamma);
  read(j, "eval_interval", c.eval_interval);
  read(j, "checkpoint_interval", c.checkpoint_interval);
  read(j, "seed", c.seed);
  c.validate();
  return c;
}

void ema_update(TeacherStudentState& state) {
  state.teacher.require_same_layout(state.student);
  const double keep = 1.0 - state.lambda;
  const double take = state.lambda;
  auto& t = state.teacher.arrays();
  const auto& s = state.student.arrays();
  for (std::size_t a = 0; a < t.size(); ++a) {
    auto& tv = t[a].values;
    const auto& sv = s[a].values;
    for (std::size_t i = 0; i < tv.size(); ++i) tv[i] = keep * tv[i] + take * sv[i];
  }
}

std::pair<int, int> batch_split(int batch_size, std::pair<int, int> ratio) {
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  const int total = ratio.first + ratio.second;
  if (ratio.first < 0 || ratio.second < 0 || total == 0) throw ConfigError("invalid sample ratio");
  const int n_l = static_cast<int>(std::floor(static_cast<double>(batch_size) * ratio.first / total + 0.5));
  return {n_l, batch_size - n_l};
}

namespace {

std::vector<std::size_t> draw_from_pool(const std::vector<std::size_t>& pool, std::uint64_t stream, int iteration,
                                        int count) {
  std::vector<std::size_t> out;
  if (count == 0) return out;
  const std::size_t n = pool.size();
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> perm(n);
  for (int j = 0; j < count; ++j) {
    const std::size_t pos = static_cast<std::size_t>(iteration) * count + j;
    const std::size_t epoch = pos / n;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::mt19937_64 rng(mix(stream, epoch));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(pool[perm[pos % n]]);
  }
  return out;
}

}  // namespace

BatchPlan compose_batch(const SamplerConfig& cfg, int iteration) {
  const auto [n_l, n_u] = batch_split(cfg.batch_size, cfg.sample_ratio);
  if (n_l > 0 && cfg.labeled_pool.empty()) throw ConfigError("sample ratio needs labeled images but the pool is empty");
  if (n_u > 0 && cfg.unlabeled_pool.empty()) {
    throw ConfigError("sample ratio needs unlabeled images but the pool is empty");
  }
  BatchPlan plan;
  plan.iteration = iteration;
  plan.labeled = draw_from_pool(cfg.labeled_pool, mix(cfg.seed, 1), iteration, n_l);
  plan.unlabeled = draw_from_pool(cfg.unlabeled_pool, mix(cfg.seed, 2), iteration, n_u);
  const std::uint64_t base = mix(mix(cfg.seed, 3), static_cast<std::uint64_t>(iteration));
  for (int j = 0; j < n_l; ++j) plan.labeled_seeds.push_back(mix(base, static_cast<std::uint64_t>(j)));
  for (int j = 0; j < n_u; ++j) plan.unlabeled_seeds.push_back(mix(base, static_cast<std::uint64_t>(1000 + j)));
  return plan;
}

TrainingBatch materialize_batch(const BatchPlan& plan, const std::vector<SceneSample>& samples,
                                const AugmentConfig& augment) {
  TrainingBatch batch;
  batch.plan = plan;
  for (std::size_t j = 0; j < plan.labeled.size(); ++j) {
    const SceneSample& s = samples.at(plan.labeled[j]);
    batch.labeled_ids.push_back(s.id);
    batch.labeled.push_back(weak_augment(s, plan.labeled_seeds[j], augment));
  }
  for (std::size_t j = 0; j < plan.unlabeled.size(); ++j) {
    const SceneSample& s = samples.at(plan.unlabeled[j]);
    const std::uint64_t seed = plan.unlabeled_seeds[j];
    UnlabeledItem item;
    item.id = s.id;
    item.weak = weak_augment(s, seed, augment);
    item.strong = strong_augment(s, augment.shared_geometry ? seed : splitmix64(seed), augment);
    batch.unlabeled.push_back(std::move(item));
  }
  return batch;
}

double StepReport::mean_s_pds() const {
  if (pseudo.empty()) return 0.0;
  double s = 0.0;
  for (const auto& p : pseudo) s += p.s_pds;
  return s / static_cast<double>(pseudo.size());
}

json StepReport::to_json() const {
  json j;
  j["type"] = "step";
  j["iteration"] = iteration;
  j["phase"] = burn_in ? "burn_in" : "semi";
  j["l_s"] = l_s;
  j["l_u"] = l_u;
  j["alpha"] = alpha;
  j["total"] = total;
  j["components"] = {{"sup_cls", supervised.cls},
                     {"sup_reg", supervised.reg},
                     {"unsup_cls", unsupervised.cls},
                     {"unsup_reg", unsupervised.reg}};
  j["lr"] = lr;
  std::size_t k = 0;
  json pseudo_list = json::array();
  for (const auto& p : pseudo) {
    k += p.k_selected;
    pseudo_list.push_back({{"s_pds", p.s_pds},
                           {"k_selected", p.k_selected},
                           {"n_total", p.n_total},
                           {"confidence_sum", p.confidence_sum}});
  }
  if (!pseudo.empty()) {
    j["s_pds"] = mean_s_pds();
    j["k_selected"] = k;
    j["beta"] = beta;
  }
  j["pseudo"] = pseudo_list;
  return j;
}

double effective_alpha(const TrainConfig& config, int phase2_step) {
  if (config.alpha_warmup <= 0) return config.alpha;
  const double ramp = std::min(1.0, static_cast<double>(phase2_step + 1) / config.alpha_warmup);
  return config.alpha * ramp;
}

double learning_rate(const TrainConfig& config, int iteration) {
  double lr = config.lr;
  for (int step : config.lr_steps) {
    if (iteration >= step) lr *= config.lr_gamma;
  }
  return lr;
}

void sgd_step(ParameterSet& params, const ParameterSet& grads, OptimizerState& opt, double lr, double momentum,
              double weight_decay) {
  params.require_same_layout(grads);
  if (opt.velocity.arrays().empty()) opt.velocity = params.zeros_like();
  params.require_same_layout(opt.velocity);
  auto& ps = params.arrays();
  const auto& gs = grads.arrays();
  auto& vs = opt.velocity.arrays();
  for (std::size_t a = 0; a < ps.size(); ++a) {
    const double wd = ends_with(ps[a].name, ".weight") ? weight_decay : 0.0;
    auto& w = ps[a].values;
    const auto& g = gs[a].values;
    auto& v = vs[a].values;
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum * v[i] + g[i] + wd * w[i];
      w[i] -= lr * v[i];
    }
  }
}

StepReport train_step(TeacherStudentState& state, OptimizerState& opt, const TrainingBatch& batch,
                      const Detector& detector, const TrainConfig& config, bool burn_in) {
  StepReport report;
  report.iteration = state.iteration;
  report.burn_in = burn_in;
  report.lr = learning_rate(config, state.iteration);
  report.beta = config.selection == SelectionMode::kDensityGuided ? config.beta : 0.0;
  ParameterSet grads = state.student.zeros_like();

  const double n_l = static_cast<double>(batch.labeled.size());
  for (const AugmentedView& view : batch.labeled) {
    ForwardTape tape;
    const DenseScoreMaps maps = detector.forward(view.image, state.student, &tape);
    const AssignmentResult targets = assign_targets(view.boxes, maps, detector.config());
    MapGradients g = MapGradients::zeros_like(maps);
    const LossReport r = supervised_loss(maps, targets, config.supervised, &g, 1.0 / n_l);
    detector.backward(tape, state.student, g, grads);
    report.supervised.cls += r.cls / n_l;
    report.supervised.reg += r.reg / n_l;
  }
  report.l_s = report.supervised.total();

  if (!burn_in && !batch.unlabeled.empty()) {
    report.alpha = effective_alpha(config, state.iteration - config.burn_in);
    const double n_u = static_cast<double>(batch.unlabeled.size());
    for (const UnlabeledItem& item : batch.unlabeled) {
      DenseScoreMaps teacher_maps = detector.forward(item.weak.image, state.teacher);
      if (!(item.weak.geo == item.strong.geo)) {
        teacher_maps = align_teacher_to_student(teacher_maps, item.weak.geo, item.strong.geo);
      }
      const PdsResult pds = compute_pds(teacher_maps);
      SelectionMask mask = config.selection == SelectionMode::kDensityGuided
                               ? select_ddpls(pds, config.beta)
                               : select_fixed_ratio(pds, config.fixed_ratio);
      report.pseudo.push_back({pds.s_pds, mask.k_selected, pds.n_total, mask.confidence_sum});
      const DensePseudoLabel pseudo = build_dense_pseudo_label(teacher_maps, std::move(mask));

      ForwardTape tape;
      const DenseScoreMaps maps = detector.forward(item.strong.image, state.student, &tape);
      MapGradients g = MapGradients::zeros_like(maps);
      const LossReport r = unsupervised_loss(maps, pseudo, config.unsupervised, &g, report.alpha / n_u);
      detector.backward(tape, state.student, g, grads);
      report.unsupervised.cls += r.cls / n_u;
      report.unsupervised.reg += r.reg / n_u;
    }
    report.l_u = report.unsupervised.total();
  }
  report.total = report.l_s + report.alpha * report.l_u;

  if (!std::isfinite(report.total)) {
    json snap = report.to_json();
    snap["labeled_ids"] = batch.labeled_ids;
    json ids = json::array();
    for (const auto& u : batch.unlabeled) ids.push_back(u.id);
    snap["unlabeled_ids"] = ids;
    throw TrainingAbort("non-finite loss at iteration " + std::to_string(state.iteration), snap.dump());
  }

  sgd_step(state.student, grads, opt, report.lr, config.momentum, config.weight_decay);
  if (!burn_in) ema_update(state);
  ++state.iteration;
  return report;
}

std::vector<std::vector<OrientedBox>> predict(const Detector& detector, const ParameterSet& params,
                                              const std::vector<SceneSample>& samples, const DecodeOptions& decode) {
  std::vector<std::vector<OrientedBox>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(decode_predictions(detector.forward(s.image, params), decode));
  return out;
}

EvalReport evaluate_params(const Detector& detector, const ParameterSet& params,
                           const std::vector<SceneSample>& samples, const DecodeOptions& decode) {
  std::vector<std::vector<OrientedBox>> gts;
  gts.reserve(samples.size());
  for (const auto& s : samples) gts.push_back(s.boxes);
  return evaluate(predict(detector, params, samples, decode), gts, detector.config().num_classes);
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[8] = {'D', 'D', 'P', 'L', 'S', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ostream& os, const std::string& s) {
  put(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T take(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError("truncated checkpoint");
  return v;
}

std::string take_string(std::istream& is) {
  const auto n = take<std::uint32_t>(is);
  if (n > (1u << 20)) throw CheckpointError("corrupt checkpoint string");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw CheckpointError("truncated checkpoint");
  return s;
}

}  // namespace

const ParameterSet& Checkpoint::set(const std::string& name) const {
  for (const auto& [n, p] : sets) {
    if (n == name) return p;
  }
  throw CheckpointError("checkpoint has no parameter set '" + name + "'");
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write " + path);
  os.write(kMagic, sizeof(kMagic));
  put(os, kVersion);
  put(os, ck.config_hash);
  put(os, static_cast<std::int32_t>(ck.iteration));
  put(os, ck.lambda);
  put(os, static_cast<std::uint32_t>(ck.sets.size()));
  for (const auto& [name, params] : ck.sets) {
    put_string(os, name);
    put(os, static_cast<std::uint32_t>(params.arrays().size()));
    for (const auto& a : params.arrays()) {
      put_string(os, a.name);
      put(os, static_cast<std::uint32_t>(a.shape.size()));
      for (int d : a.shape) put(os, static_cast<std::int32_t>(d));
      put(os, static_cast<std::uint64_t>(a.values.size()));
      os.write(reinterpret_cast<const char*>(a.values.data()),
               static_cast<std::streamsize>(a.values.size() * sizeof(double)));
    }
  }
  if (!os) throw CheckpointError("failed writing " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read " + path);
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(path + " is not a checkpoint");
  }
  if (take<std::uint32_t>(is) != kVersion) throw CheckpointError(path + ": unsupported checkpoint version");
  Checkpoint ck;
  ck.config_hash = take<std::uint64_t>(is);
  ck.iteration = take<std::int32_t>(is);
  ck.lambda = take<double>(is);
  const auto nsets = take<std::uint32_t>(is);
  for (std::uint32_t s = 0; s < nsets; ++s) {
    std::string name = take_string(is);
    ParameterSet params;
    const auto narrays = take<std::uint32_t>(is);
    for (std::uint32_t a = 0; a < narrays; ++a) {
      std::string aname = take_string(is);
      const auto ndim = take<std::uint32_t>(is);
      if (ndim > 8) throw CheckpointError("corrupt checkpoint shape");
      std::vector<int> shape;
      for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(take<std::int32_t>(is));
      NamedArray& arr = params.add(aname, shape);
      const auto count = take<std::uint64_t>(is);
      if (count != arr.values.size()) throw CheckpointError("checkpoint array size does not match its shape");
      if (!is.read(reinterpret_cast<char*>(arr.values.data()), static_cast<std::streamsize>(count * sizeof(double)))) {
        throw CheckpointError("truncated checkpoint");
      }
    }
    ck.sets.emplace_back(std::move(name), std::move(params));
  }
  return ck;
}

std::uint64_t config_hash(const TrainConfig& config) {
  json j = to_json(config);
  // Budget and reporting knobs may change between a run and its resumption.
  j.erase("iterations");
  j.erase("eval_interval");
  j.erase("checkpoint_interval");
  return fnv1a(j.dump());
}

// ---- run loop ----

namespace {

json eval_record(int iteration, const std::string& model, const EvalReport& r) {
  return {{"type", "eval"}, {"iteration", iteration}, {"model", model}, {"map", r.map}, {"per_class_ap", r.per_class_ap}};
}

void write_checkpoint_pair(const std::filesystem::path& dir, const RunPaths& paths, const TeacherStudentState& state,
                           const OptimizerState& opt, std::uint64_t hash) {
  Checkpoint teacher{hash, state.iteration, state.lambda, {{"teacher", state.teacher}}};
  Checkpoint student{hash, state.iteration, state.lambda, {{"student", state.student}, {"velocity", opt.velocity}}};
  save_checkpoint(teacher, (dir / paths.teacher_checkpoint).string());
  save_checkpoint(student, (dir / paths.student_checkpoint).string());
}

}  // namespace

RunResult run_training(const TrainConfig& config, const std::vector<SceneSample>& train,
                       const std::vector<SceneSample>& test, const RunPaths& paths, const std::string& resume_from,
                       const std::function<void(const StepReport&)>& on_step) {
  config.validate();
  const Detector detector(config.detector);
  const std::uint64_t hash = config_hash(config);

  SamplerConfig semi;
  semi.batch_size = config.batch_size;
  semi.sample_ratio = config.sample_ratio;
  semi.seed = config.seed;
  for (std::size_t i = 0; i < train.size(); ++i) (train[i].is_labeled ? semi.labeled_pool : semi.unlabeled_pool).push_back(i);
  SamplerConfig burn = semi;
  burn.sample_ratio = {1, 0};

  RunResult result;
  TeacherStudentState& state = result.state;
  state.lambda = config.ema_lambda;
  OptimizerState opt;
  if (resume_from.empty()) {
    state.student = detector.init_params(config.seed);
    state.teacher = state.student;
    opt.velocity = state.student.zeros_like();
  } else {
    const std::filesystem::path dir(resume_from);
    const Checkpoint t = load_checkpoint((dir / paths.teacher_checkpoint).string());
    const Checkpoint s = load_checkpoint((dir / paths.student_checkpoint).string());
    if (t.config_hash != hash || s.config_hash != hash) {
      throw CheckpointError("checkpoint was written by an incompatible configuration");
    }
    if (t.iteration != s.iteration) throw CheckpointError("teacher and student checkpoints are from different iterations");
    const ParameterSet reference = detector.init_params(config.seed);
    state.teacher = t.set("teacher");
    state.student = s.set("student");
    opt.velocity = s.set("velocity");
    reference.require_same_layout(state.teacher);
    reference.require_same_layout(state.student);
    reference.require_same_layout(opt.velocity);
    state.iteration = t.iteration;
  }

  std::ofstream metrics;
  std::filesystem::path out_dir;
  if (!paths.out_dir.empty()) {
    out_dir = paths.out_dir;
    std::filesystem::create_directories(out_dir);
    metrics.open(out_dir / paths.metrics, resume_from.empty() ? std::ios::trunc : std::ios::app);
    if (!metrics) throw ConfigError("cannot write metrics log in " + paths.out_dir);
  }
  auto log = [&](const json& record) {
    if (metrics.is_open()) metrics << record.dump() << '\n';
  };

  while (state.iteration < config.iterations) {
    const int it = state.iteration;
    const bool in_burn_in = it < config.burn_in;
    if (it == config.burn_in) state.teacher = state.student;
    const BatchPlan plan = compose_batch(in_burn_in ? burn : semi, it);
    const TrainingBatch batch = materialize_batch(plan, train, config.augment);
    StepReport report = train_step(state, opt, batch, detector, config, in_burn_in);
    log(report.to_json());
    if (on_step) on_step(report);
    result.steps.push_back(std::move(report));

    const int done = state.iteration;
    if (config.eval_interval > 0 && done % config.eval_interval == 0 && done < config.iterations && !test.empty()) {
      // The teacher is only meaningful after burn-in; before that the student is reported.
      const bool teacher_ready = done > config.burn_in;
      const EvalReport r =
          evaluate_params(detector, teacher_ready ? state.teacher : state.student, test, config.decode);
      log(eval_record(done, teacher_ready ? "teacher" : "student", r));
      result.evals.emplace_back(done, r);
    }
    if (config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 && !out_dir.empty()) {
      write_checkpoint_pair(out_dir, paths, state, opt, hash);
    }
  }
  if (config.iterations <= config.burn_in) state.teacher = state.student;

  if (!test.empty()) {
    result.final_eval = evaluate_params(detector, state.teacher, test, config.decode);
    log(eval_record(state.iteration, "teacher", result.final_eval));
    result.evals.emplace_back(state.iteration, result.final_eval);
  }
  if (!out_dir.empty()) {
    write_checkpoint_pair(out_dir, paths, state, opt, hash);
    if (!test.empty()) {
      std::ofstream ev(out_dir / paths.eval_report, std::ios::trunc);
      ev << report_to_json(result.final_eval, ClassTable::synthetic(config.detector.num_classes).names) << '\n';
    }
  }
  return result;
}

}  // namespace ddpls
