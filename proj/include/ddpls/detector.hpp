#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "ddpls/geometry.hpp"
#include "ddpls/image.hpp"
#include "ddpls/nn.hpp"

namespace ddpls {

inline constexpr int kNumLevels = 3;
inline constexpr int kRegChannels = 5;
inline constexpr std::array<int, kNumLevels> kStrides{4, 8, 16};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DetectorConfig {
  int num_classes = 3;
  int stem_channels = 8;
  std::array<int, 3> stage_channels{16, 32, 64};
  int fpn_channels = 16;
  /// Level l receives boxes with bounds[l-1] <= max(w, h) < bounds[l].
  std::array<double, kNumLevels - 1> scale_bounds{16.0, 24.0};
  double cls_prior = 0.01;
};

/// Dense output of one pyramid level. Pixel index p = row * width + col and
/// maps to image location ((col + 0.5) * stride, (row + 0.5) * stride).
struct LevelMap {
  int stride = 1;
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<double> cls;  // [class][row][col], post-sigmoid
  std::vector<double> reg;  // [channel][row][col]: dx, dy, dw, dh, theta

  LevelMap() = default;
  LevelMap(int stride_, int height_, int width_, int num_classes_);

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  double& cls_at(int c, std::size_t p) { return cls[c * pixels() + p]; }
  double cls_at(int c, std::size_t p) const { return cls[c * pixels() + p]; }
  double& reg_at(int k, std::size_t p) { return reg[k * pixels() + p]; }
  double reg_at(int k, std::size_t p) const { return reg[k * pixels() + p]; }
  Point location(std::size_t p) const {
    return {(static_cast<double>(p % width) + 0.5) * stride, (static_cast<double>(p / width) + 0.5) * stride};
  }
};

struct DenseScoreMaps {
  int num_classes = 0;
  std::vector<LevelMap> levels;

  /// N: the pixel count over all levels.
  std::size_t total_pixels() const;
  /// Throws ShapeError / NumericError on inconsistent shapes or cls outside [0, 1].
  void validate() const;
  bool same_shape(const DenseScoreMaps& other) const;
};

/// Zero-filled maps for the given image size.
DenseScoreMaps make_maps(int image_height, int image_width, int num_classes);

/// Gradient of a scalar loss with respect to the cls logits and the decoded
/// reg values of a DenseScoreMaps (same layout).
struct MapGradients {
  std::vector<std::vector<double>> cls;
  std::vector<std::vector<double>> reg;

  static MapGradients zeros_like(const DenseScoreMaps& maps);
};

/// Intermediate activations kept for the backward pass.
struct ForwardTape {
  FeatureMap input;
  std::array<ConvTape, 4> backbone_tapes;
  std::array<FeatureMap, 4> backbone_out;
  std::array<ConvTape, kNumLevels> lateral_tapes;
  std::array<std::array<ConvTape, 4>, kNumLevels> head_tapes;
  std::array<std::array<FeatureMap, 2>, kNumLevels> head_out;
  DenseScoreMaps maps;
};

class Detector {
 public:
  explicit Detector(DetectorConfig config = {});

  const DetectorConfig& config() const { return config_; }
  ParameterSet init_params(std::uint64_t seed) const;

  /// Deterministic forward pass. Image sides must be multiples of 16.
  DenseScoreMaps forward(const Image& image, const ParameterSet& params, ForwardTape* tape = nullptr) const;

  /// Accumulates d(loss)/d(params) into `grads`.
  void backward(const ForwardTape& tape, const ParameterSet& params, const MapGradients& grad,
                ParameterSet& grads) const;

 private:
  DetectorConfig config_;
  std::array<ConvShape, 4> backbone_;
  std::array<ConvShape, kNumLevels> lateral_;
  std::array<ConvShape, 4> head_;
};

struct LevelAssignment {
  std::vector<int> target_class;   // -1 background
  std::vector<int> target_index;   // index into the box list, -1 background
  std::vector<double> target_reg;  // [channel][pixel]
  std::vector<std::uint8_t> positive;
};

struct AssignmentResult {
  std::vector<LevelAssignment> levels;
  std::size_t num_positive() const;
};

/// Pyramid level for a box by its long side.
int level_for_box(const OrientedBox& box, const DetectorConfig& config);

/// Regression encoding of a (normalized) box relative to a pixel location.
std::array<double, kRegChannels> encode_box(const OrientedBox& box, Point location, int stride);
OrientedBox decode_box(std::span<const double, kRegChannels> reg, Point location, int stride);

/// Positive iff the pixel location is inside the box and the box belongs to
/// the level; smallest area wins, then lowest index.
AssignmentResult assign_targets(std::span<const OrientedBox> boxes, const DenseScoreMaps& shape,
                                const DetectorConfig& config);

struct LossReport {
  double cls = 0.0;
  double reg = 0.0;
  double total() const { return cls + reg; }
};

struct LossOptions {
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double smooth_l1_beta = 1.0 / 9.0;
  double reg_weight = 1.0;
};

double sigmoid_focal_term(double p, bool positive, double alpha, double gamma);
double smooth_l1(double residual, double beta);

/// Focal loss over every pixel and class plus smooth-L1 over positives, both
/// divided by max(1, #positives). When `grad` is given, adds
/// grad_scale * d(cls + reg) to it.
LossReport supervised_loss(const DenseScoreMaps& preds, const AssignmentResult& targets,
                           const LossOptions& options = {}, MapGradients* grad = nullptr,
                           double grad_scale = 1.0);

struct DecodeOptions {
  double score_thresh = 0.05;
  double nms_iou = 0.1;
  std::size_t pre_nms_top_k = 400;
  std::size_t max_detections = 200;
};

/// Class-aware greedy NMS; input order breaks score ties. Returns kept boxes by descending score.
std::vector<OrientedBox> rotated_nms(std::vector<OrientedBox> boxes, double iou_thresh);

std::vector<OrientedBox> decode_predictions(const DenseScoreMaps& maps, const DecodeOptions& options = {});

}  // namespace ddpls
