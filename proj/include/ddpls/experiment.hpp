#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddpls/datasets.hpp"
#include "ddpls/training.hpp"

namespace ddpls {

/// Where the images of an experiment come from: either an on-disk manifest
/// (splits "train" and "test") or a synthetic preset generated in memory.
struct DatasetSpec {
  std::string manifest;  // empty selects the synthetic preset
  DensityProfile profile;
  int train_count = 200;
  int test_count = 50;
  /// Percent of training images that keep their labels.
  double labeled_percent = 10.0;
};

struct ExperimentConfig {
  DatasetSpec data;
  TrainConfig train;
};

nlohmann::json to_json(const DensityProfile& profile);
DensityProfile profile_from_json(const nlohmann::json& j);

nlohmann::json to_json(const ExperimentConfig& config);
/// Unknown keys raise ConfigError. A relative manifest path is resolved
/// against `base_dir`.
ExperimentConfig experiment_from_json(const nlohmann::json& j, const std::string& base_dir = "");
ExperimentConfig load_experiment(const std::string& path);

/// Synthetic scenes "<prefix>_0000", "<prefix>_0001", ... for one profile.
std::vector<SceneSample> generate_split(const DensityProfile& profile, const std::string& prefix, int count);

struct ExperimentData {
  std::vector<SceneSample> train;
  std::vector<SceneSample> test;
  std::vector<std::string> class_names;
};

/// Materializes the training and test images. The labeled split is seeded by
/// profile.seed, so every training seed sees the same labeled subset.
ExperimentData load_experiment_data(const DatasetSpec& spec);

}  // namespace ddpls
