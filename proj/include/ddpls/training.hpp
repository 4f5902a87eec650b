#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ddpls/augment.hpp"
#include "ddpls/datasets.hpp"
#include "ddpls/detector.hpp"
#include "ddpls/eval.hpp"
#include "ddpls/nn.hpp"
#include "ddpls/pseudolabel.hpp"

namespace ddpls {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a step produces a non-finite loss. `snapshot` is a JSON
/// description of the step (iteration, loss parts, batch ids).
class TrainingAbort : public std::runtime_error {
 public:
  TrainingAbort(const std::string& what, std::string snapshot)
      : std::runtime_error(what), snapshot_(std::move(snapshot)) {}
  const std::string& snapshot() const { return snapshot_; }

 private:
  std::string snapshot_;
};

enum class SelectionMode { kDensityGuided, kFixedRatio };

struct TrainConfig {
  DetectorConfig detector;
  LossOptions supervised;
  UnsupervisedLossOptions unsupervised;
  AugmentConfig augment;
  DecodeOptions decode;

  SelectionMode selection = SelectionMode::kDensityGuided;
  double beta = 100.0;
  /// Percent of pixels kept by the fixed-ratio baseline.
  double fixed_ratio = 1.0;

  double alpha = 2.0;
  /// Phase-2 iterations over which alpha ramps linearly from 0; 0 disables.
  int alpha_warmup = 500;
  double ema_lambda = 0.001;

  int batch_size = 3;
  std::pair<int, int> sample_ratio{2, 1};
  int iterations = 10000;
  int burn_in = 1000;

  double lr = 0.0025;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  /// Iterations after which the LR is multiplied by lr_gamma.
  std::vector<int> lr_steps;
  double lr_gamma = 0.1;

  /// Teacher evaluation period in iterations; 0 evaluates only at the end.
  int eval_interval = 1000;
  /// Checkpoint period in iterations; 0 writes only the final pair.
  int checkpoint_interval = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
/// Missing keys keep their defaults; unknown keys raise ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct TeacherStudentState {
  ParameterSet teacher;
  ParameterSet student;
  double lambda = 0.001;
  int iteration = 0;
};

/// teacher <- (1 - lambda) * teacher + lambda * student, elementwise.
/// Throws ShapeError on a layout mismatch.
void ema_update(TeacherStudentState& state);

struct SamplerConfig {
  int batch_size = 3;
  std::pair<int, int> sample_ratio{2, 1};
  std::vector<std::size_t> labeled_pool;
  std::vector<std::size_t> unlabeled_pool;
  std::uint64_t seed = 0;
};

/// Labeled and unlabeled counts per batch: n_l = round(batch * r_l / (r_l + r_u)).
std::pair<int, int> batch_split(int batch_size, std::pair<int, int> sample_ratio);

struct BatchPlan {
  int iteration = 0;
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
  std::vector<std::uint64_t> labeled_seeds;
  std::vector<std::uint64_t> unlabeled_seeds;
};

/// Deterministic per (cfg, iteration). Each pool is cycled epoch by epoch in
/// an order reshuffled per epoch. Throws ConfigError when a needed pool is empty.
BatchPlan compose_batch(const SamplerConfig& cfg, int iteration);

struct UnlabeledItem {
  std::string id;
  AugmentedView weak;
  AugmentedView strong;
};

struct TrainingBatch {
  BatchPlan plan;
  std::vector<std::string> labeled_ids;
  std::vector<AugmentedView> labeled;
  std::vector<UnlabeledItem> unlabeled;
};

/// Builds the views of a plan. Labeled samples get the weak pipeline.
TrainingBatch materialize_batch(const BatchPlan& plan, const std::vector<SceneSample>& samples,
                                const AugmentConfig& augment);

struct PseudoRecord {
  double s_pds = 0.0;
  std::size_t k_selected = 0;
  std::size_t n_total = 0;
  double confidence_sum = 0.0;
};

struct StepReport {
  int iteration = 0;
  bool burn_in = true;
  double l_s = 0.0;
  double l_u = 0.0;
  double alpha = 0.0;
  double total = 0.0;
  double beta = 0.0;
  LossReport supervised;
  LossReport unsupervised;
  double lr = 0.0;
  std::vector<PseudoRecord> pseudo;

  /// Mean s_pds over the batch's unlabeled images (0 when none).
  double mean_s_pds() const;
  nlohmann::json to_json() const;
};

struct OptimizerState {
  ParameterSet velocity;
};

/// Alpha after the linear warm-up, for a phase-2 step index starting at 0.
double effective_alpha(const TrainConfig& config, int phase2_step);
double learning_rate(const TrainConfig& config, int iteration);

/// Momentum SGD with decoupled-from-bias weight decay (applied to ".weight" arrays only).
void sgd_step(ParameterSet& params, const ParameterSet& grads, OptimizerState& opt, double lr, double momentum,
              double weight_decay);

/// One optimization step. In burn-in only the supervised path runs and the
/// teacher is not read; otherwise the teacher labels the weak views, the
/// student learns from both paths and the teacher follows by EMA.
StepReport train_step(TeacherStudentState& state, OptimizerState& opt, const TrainingBatch& batch,
                      const Detector& detector, const TrainConfig& config, bool burn_in);

/// Predictions of `params` on each image.
std::vector<std::vector<OrientedBox>> predict(const Detector& detector, const ParameterSet& params,
                                              const std::vector<SceneSample>& samples, const DecodeOptions& decode);
EvalReport evaluate_params(const Detector& detector, const ParameterSet& params,
                           const std::vector<SceneSample>& samples, const DecodeOptions& decode);

/// Binary checkpoint holding one or more named parameter sets and a config hash.
struct Checkpoint {
  std::uint64_t config_hash = 0;
  int iteration = 0;
  double lambda = 0.0;
  std::vector<std::pair<std::string, ParameterSet>> sets;

  const ParameterSet& set(const std::string& name) const;
};
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Hash of everything that fixes the parameter layout and training recipe.
std::uint64_t config_hash(const TrainConfig& config);

struct RunPaths {
  std::string out_dir;
  std::string metrics = "metrics.jsonl";
  std::string teacher_checkpoint = "teacher.ckpt";
  std::string student_checkpoint = "student.ckpt";
  std::string eval_report = "eval.json";
};

struct RunResult {
  TeacherStudentState state;
  std::vector<StepReport> steps;
  EvalReport final_eval;
  std::vector<std::pair<int, EvalReport>> evals;
};

/// Burn-in with fully labeled batches, teacher <- student copy, then
/// semi-supervised steps up to the budget. Writes metrics, evaluation and
/// checkpoints when paths.out_dir is nonempty. `resume_from` names a checkpoint
/// directory written by an earlier run with the same config hash.
RunResult run_training(const TrainConfig& config, const std::vector<SceneSample>& train,
                       const std::vector<SceneSample>& test, const RunPaths& paths = {},
                       const std::string& resume_from = "",
                       const std::function<void(const StepReport&)>& on_step = nullptr);

}  // namespace ddpls
