#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ddpls/geometry.hpp"
#include "ddpls/image.hpp"

namespace ddpls {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct SceneSample {
  std::string id;
  Image image;
  /// Ground truth. For unlabeled samples this is kept only for post-hoc
  /// analysis; training code reads it exclusively through labeled_boxes().
  std::vector<OrientedBox> boxes;
  bool is_labeled = true;

  const std::vector<OrientedBox>& labeled_boxes() const;
};

/// Parameters of the synthetic dense-scene generator.
struct DensityProfile {
  int image_size = 128;
  int num_clusters = 2;
  /// Inclusive range of objects per cluster.
  std::pair<int, int> objects_per_cluster{3, 12};
  /// Object centers fall within this radius of their cluster center
  /// (Gaussian with sigma = radius / 2, truncated). Must be >= the largest scale.
  double cluster_radius = 32.0;
  /// Share of each scene's objects scattered uniformly over the image instead
  /// of being placed in clusters (1.0 gives a uniform, COCO-like layout).
  double background_fraction = 0.15;
  int class_count = 3;
  /// Inclusive range of the long side, pixels.
  std::pair<double, double> scale_range{10.0, 30.0};
  /// Inclusive range of short/long side ratio.
  std::pair<double, double> aspect_range{0.5, 0.85};
  /// Standard deviation of the additive pixel noise.
  double noise = 0.04;
  std::uint64_t seed = 0;
};

/// Renders a deterministic scene for (profile, id). Throws DatasetError when
/// the profile cannot place its objects.
SceneSample generate_scene(const DensityProfile& profile, const std::string& id);

/// Names for class ids, in id order.
struct ClassTable {
  std::vector<std::string> names;

  /// -1 when unknown.
  int id_of(const std::string& name) const;
  static ClassTable synthetic(int class_count);
};

struct DotaRejection {
  std::size_t line = 0;
  std::string reason;
};

struct DotaParseResult {
  std::vector<OrientedBox> boxes;
  std::vector<DotaRejection> rejected;
};

/// Parses DOTA text ("x1 y1 ... x4 y4 category [difficulty]" per line).
/// Malformed lines throw ParseError; non-convex quadrilaterals and unknown
/// categories are rejected into the report.
DotaParseResult parse_dota_annotations(const std::string& text, const ClassTable& classes);
std::string serialize_dota_annotations(const std::vector<OrientedBox>& boxes, const ClassTable& classes);

struct TileSpec {
  int tile_size = 128;
  int overlap = 25;
  /// Throws DatasetError unless 0 <= overlap < tile_size.
  void validate() const;
};

/// Offsets along one axis; the last offset is clamped to max(0, dim - tile).
std::vector<int> tile_offsets_1d(int image_dim, const TileSpec& spec);
/// Cartesian product (x, y), y-major.
std::vector<std::pair<int, int>> tile_offsets(int image_w, int image_h, const TileSpec& spec);

/// Objects-per-tile statistics; a box is counted in every tile whose closed
/// extent contains its center.
struct DensityHistogram {
  std::vector<std::size_t> counts;  // counts[n] = tiles holding n objects
  std::size_t tiles = 0;
  double mean = 0.0;
  std::size_t max = 0;
  double empty_fraction = 0.0;
};

DensityHistogram density_histogram(const std::vector<SceneSample>& samples, const TileSpec& spec);

/// Seeded partition: exactly round(fraction_percent / 100 * n) samples become labeled.
void split_labeled(std::vector<SceneSample>& samples, double fraction_percent, std::uint64_t seed);

/// Labeled-fraction presets accepted by dataset generation.
bool is_fraction_preset(int fraction_percent);

struct ManifestEntry {
  std::string id;
  std::string image;
  std::string annotation;
  bool is_labeled = true;
  std::string split = "train";
};

struct Manifest {
  std::vector<std::string> classes;
  int image_size = 128;
  std::vector<ManifestEntry> samples;
};

void save_manifest(const Manifest& manifest, const std::string& path);
Manifest load_manifest(const std::string& path);

/// Loads images and annotations referenced by a manifest (paths relative to
/// the manifest's directory). Images are padded to the manifest image size.
std::vector<SceneSample> load_split(const Manifest& manifest, const std::string& manifest_path,
                                    const std::string& split);

}  // namespace ddpls
