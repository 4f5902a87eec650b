#include "ddpls/experiment.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

namespace ddpls {

using json = nlohmann::json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

json to_json(const DensityProfile& p) {
  return {{"image_size", p.image_size},
          {"num_clusters", p.num_clusters},
          {"objects_per_cluster", {p.objects_per_cluster.first, p.objects_per_cluster.second}},
          {"cluster_radius", p.cluster_radius},
          {"background_fraction", p.background_fraction},
          {"class_count", p.class_count},
          {"scale_range", {p.scale_range.first, p.scale_range.second}},
          {"aspect_range", {p.aspect_range.first, p.aspect_range.second}},
          {"noise", p.noise},
          {"seed", p.seed}};
}

DensityProfile profile_from_json(const json& j) {
  reject_unknown(j,
                 {"image_size", "num_clusters", "objects_per_cluster", "cluster_radius", "background_fraction",
                  "class_count", "scale_range", "aspect_range", "noise", "seed"},
                 "profile");
  DensityProfile p;
  read(j, "image_size", p.image_size);
  read(j, "num_clusters", p.num_clusters);
  read(j, "objects_per_cluster", p.objects_per_cluster);
  read(j, "cluster_radius", p.cluster_radius);
  read(j, "background_fraction", p.background_fraction);
  read(j, "class_count", p.class_count);
  read(j, "scale_range", p.scale_range);
  read(j, "aspect_range", p.aspect_range);
  read(j, "noise", p.noise);
  read(j, "seed", p.seed);
  return p;
}

json to_json(const ExperimentConfig& c) {
  json data;
  if (!c.data.manifest.empty()) {
    data["manifest"] = c.data.manifest;
  } else {
    data["profile"] = to_json(c.data.profile);
    data["train_count"] = c.data.train_count;
    data["test_count"] = c.data.test_count;
    data["labeled_percent"] = c.data.labeled_percent;
  }
  return {{"data", data}, {"train", to_json(c.train)}};
}

ExperimentConfig experiment_from_json(const json& j, const std::string& base_dir) {
  reject_unknown(j, {"data", "train"}, "config");
  ExperimentConfig c;
  if (j.contains("data")) {
    const json& d = j["data"];
    reject_unknown(d, {"manifest", "profile", "train_count", "test_count", "labeled_percent"}, "data");
    read(d, "manifest", c.data.manifest);
    if (!c.data.manifest.empty() && !base_dir.empty() && std::filesystem::path(c.data.manifest).is_relative()) {
      c.data.manifest = (std::filesystem::path(base_dir) / c.data.manifest).string();
    }
    if (d.contains("profile")) c.data.profile = profile_from_json(d["profile"]);
    read(d, "train_count", c.data.train_count);
    read(d, "test_count", c.data.test_count);
    read(d, "labeled_percent", c.data.labeled_percent);
  }
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  if (c.data.manifest.empty()) {
    if (c.data.train_count <= 0) throw ConfigError("empty dataset");
    if (c.data.test_count < 0) throw ConfigError("test_count must be non-negative");
    if (!(c.data.labeled_percent >= 0.0 && c.data.labeled_percent <= 100.0)) {
      throw ConfigError("labeled_percent must lie in [0, 100]");
    }
    if (c.data.profile.class_count != c.train.detector.num_classes) {
      throw ConfigError("profile.class_count must equal train.detector.num_classes");
    }
  }
  return c;
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return experiment_from_json(j, std::filesystem::path(path).parent_path().string());
}

std::vector<SceneSample> generate_split(const DensityProfile& profile, const std::string& prefix, int count) {
  std::vector<SceneSample> out;
  out.reserve(static_cast<std::size_t>(std::max(0, count)));
  char id[64];
  for (int i = 0; i < count; ++i) {
    std::snprintf(id, sizeof(id), "%s_%04d", prefix.c_str(), i);
    out.push_back(generate_scene(profile, id));
  }
  return out;
}

ExperimentData load_experiment_data(const DatasetSpec& spec) {
  ExperimentData data;
  if (!spec.manifest.empty()) {
    const Manifest m = load_manifest(spec.manifest);
    data.train = load_split(m, spec.manifest, "train");
    data.test = load_split(m, spec.manifest, "test");
    data.class_names = m.classes;
  } else {
    data.train = generate_split(spec.profile, "train", spec.train_count);
    data.test = generate_split(spec.profile, "test", spec.test_count);
    split_labeled(data.train, spec.labeled_percent, spec.profile.seed);
    data.class_names = ClassTable::synthetic(spec.profile.class_count).names;
  }
  if (data.train.empty()) throw DatasetError("empty dataset");
  return data;
}

}  // namespace ddpls
