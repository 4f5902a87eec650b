#include "ddpls/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace ddpls {

namespace {

constexpr std::array<const char*, 4> kBackboneNames{"backbone.stem", "backbone.stage1", "backbone.stage2",
                                                    "backbone.stage3"};
constexpr std::array<const char*, kNumLevels> kLateralNames{"fpn.lateral1", "fpn.lateral2", "fpn.lateral3"};
constexpr std::array<const char*, 4> kHeadNames{"head.conv1", "head.conv2", "head.cls", "head.reg"};

std::string weight_name(const char* layer) { return std::string(layer) + ".weight"; }
std::string bias_name(const char* layer) { return std::string(layer) + ".bias"; }

FeatureMap run_conv(const FeatureMap& in, const ConvShape& shape, const ParameterSet& params, const char* layer,
                    ConvTape* tape) {
  return conv2d_forward(in, shape, params.get(weight_name(layer)).values, params.get(bias_name(layer)).values, tape);
}

void back_conv(const FeatureMap& grad_out, const ConvShape& shape, const ConvTape& tape, const ParameterSet& params,
               ParameterSet& grads, const char* layer, FeatureMap* grad_in) {
  conv2d_backward(grad_out, shape, tape, params.get(weight_name(layer)).values,
                  grads.get(weight_name(layer)).values, grads.get(bias_name(layer)).values, grad_in);
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// coefficient * log(x) with 0 * log(0) = 0.
double xlog(double coefficient, double x) { return coefficient == 0.0 ? 0.0 : coefficient * std::log(x); }

}  // namespace

LevelMap::LevelMap(int stride_, int height_, int width_, int num_classes_)
    : stride(stride_),
      height(height_),
      width(width_),
      num_classes(num_classes_),
      cls(static_cast<std::size_t>(num_classes_) * height_ * width_, 0.0),
      reg(static_cast<std::size_t>(kRegChannels) * height_ * width_, 0.0) {}

std::size_t DenseScoreMaps::total_pixels() const {
  std::size_t n = 0;
  for (const auto& l : levels) n += l.pixels();
  return n;
}

void DenseScoreMaps::validate() const {
  for (const auto& l : levels) {
    if (l.num_classes != num_classes || l.cls.size() != l.pixels() * num_classes ||
        l.reg.size() != l.pixels() * kRegChannels) {
      throw ShapeError("dense score map level has inconsistent shape");
    }
    for (double v : l.cls) {
      if (!(v >= 0.0 && v <= 1.0)) throw NumericError("cls probability outside [0, 1]");
    }
  }
}

bool DenseScoreMaps::same_shape(const DenseScoreMaps& other) const {
  if (num_classes != other.num_classes || levels.size() != other.levels.size()) return false;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const auto& a = levels[l];
    const auto& b = other.levels[l];
    if (a.height != b.height || a.width != b.width || a.stride != b.stride) return false;
  }
  return true;
}

DenseScoreMaps make_maps(int image_height, int image_width, int num_classes) {
  DenseScoreMaps maps;
  maps.num_classes = num_classes;
  for (int s : kStrides) {
    maps.levels.emplace_back(s, (image_height + s - 1) / s, (image_width + s - 1) / s, num_classes);
  }
  return maps;
}

MapGradients MapGradients::zeros_like(const DenseScoreMaps& maps) {
  MapGradients g;
  for (const auto& l : maps.levels) {
    g.cls.emplace_back(l.cls.size(), 0.0);
    g.reg.emplace_back(l.reg.size(), 0.0);
  }
  return g;
}

Detector::Detector(DetectorConfig config) : config_(config) {
  const auto& sc = config_.stage_channels;
  backbone_ = {ConvShape{3, config_.stem_channels, 3, 2}, ConvShape{config_.stem_channels, sc[0], 3, 2},
               ConvShape{sc[0], sc[1], 3, 2}, ConvShape{sc[1], sc[2], 3, 2}};
  const int f = config_.fpn_channels;
  lateral_ = {ConvShape{sc[0], f, 1, 1}, ConvShape{sc[1], f, 1, 1}, ConvShape{sc[2], f, 1, 1}};
  head_ = {ConvShape{f, f, 3, 1}, ConvShape{f, f, 3, 1}, ConvShape{f, config_.num_classes, 3, 1},
           ConvShape{f, kRegChannels, 3, 1}};
}

ParameterSet Detector::init_params(std::uint64_t seed) const {
  ParameterSet params;
  std::mt19937_64 rng(seed);
  auto add_conv = [&](const char* layer, const ConvShape& s, double stddev, double bias) {
    auto& w = params.add(weight_name(layer), {s.out_channels, s.in_channels, s.kernel, s.kernel});
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : w.values) v = dist(rng);
    params.add(bias_name(layer), {s.out_channels}, bias);
  };
  for (std::size_t i = 0; i < backbone_.size(); ++i) {
    const auto& s = backbone_[i];
    add_conv(kBackboneNames[i], s, std::sqrt(2.0 / (s.in_channels * s.kernel * s.kernel)), 0.0);
  }
  for (std::size_t i = 0; i < lateral_.size(); ++i) {
    add_conv(kLateralNames[i], lateral_[i], std::sqrt(1.0 / lateral_[i].in_channels), 0.0);
  }
  for (int i = 0; i < 2; ++i) {
    const auto& s = head_[i];
    add_conv(kHeadNames[i], s, std::sqrt(2.0 / (s.in_channels * s.kernel * s.kernel)), 0.0);
  }
  const double prior_bias = -std::log((1.0 - config_.cls_prior) / config_.cls_prior);
  add_conv(kHeadNames[2], head_[2], 0.01, prior_bias);
  add_conv(kHeadNames[3], head_[3], 0.01, 0.0);
  return params;
}

DenseScoreMaps Detector::forward(const Image& image, const ParameterSet& params, ForwardTape* tape) const {
  if (image.channels != 3) throw ShapeError("detector expects 3-channel images");
  const int largest = kStrides.back();
  if (image.width % largest != 0 || image.height % largest != 0) {
    throw ShapeError("image sides must be multiples of " + std::to_string(largest) + ", got " +
                     std::to_string(image.width) + "x" + std::to_string(image.height));
  }
  ForwardTape local;
  ForwardTape& t = tape ? *tape : local;

  t.input = FeatureMap(3, image.height, image.width);
  std::copy(image.data.begin(), image.data.end(), t.input.data.begin());

  const FeatureMap* prev = &t.input;
  for (std::size_t i = 0; i < backbone_.size(); ++i) {
    t.backbone_out[i] = run_conv(*prev, backbone_[i], params, kBackboneNames[i], &t.backbone_tapes[i]);
    relu_inplace(t.backbone_out[i]);
    prev = &t.backbone_out[i];
  }

  // Top-down pathway: P3 = L3(C3), P2 = L2(C2) + up(P3), P1 = L1(C1) + up(P2).
  std::array<FeatureMap, kNumLevels> pyramid;
  for (int l = kNumLevels - 1; l >= 0; --l) {
    pyramid[l] = run_conv(t.backbone_out[l + 1], lateral_[l], params, kLateralNames[l], &t.lateral_tapes[l]);
    if (l + 1 < kNumLevels) {
      add_inplace(pyramid[l], upsample_nearest2x(pyramid[l + 1], pyramid[l].height, pyramid[l].width));
    }
  }

  DenseScoreMaps maps;
  maps.num_classes = config_.num_classes;
  for (int l = 0; l < kNumLevels; ++l) {
    auto& ht = t.head_tapes[l];
    auto& ho = t.head_out[l];
    ho[0] = run_conv(pyramid[l], head_[0], params, kHeadNames[0], &ht[0]);
    relu_inplace(ho[0]);
    ho[1] = run_conv(ho[0], head_[1], params, kHeadNames[1], &ht[1]);
    relu_inplace(ho[1]);
    FeatureMap logits = run_conv(ho[1], head_[2], params, kHeadNames[2], tape ? &ht[2] : nullptr);
    FeatureMap reg = run_conv(ho[1], head_[3], params, kHeadNames[3], tape ? &ht[3] : nullptr);

    LevelMap level(kStrides[l], logits.height, logits.width, config_.num_classes);
    for (std::size_t i = 0; i < logits.data.size(); ++i) level.cls[i] = sigmoid(logits.data[i]);
    const std::size_t p = level.pixels();
    std::copy(reg.data.begin(), reg.data.end(), level.reg.begin());
    for (std::size_t i = 0; i < p; ++i) {
      double& a = level.reg[4 * p + i];
      a = kHalfPi * std::tanh(a);
    }
    maps.levels.push_back(std::move(level));
  }
  if (tape) t.maps = maps;
  return maps;
}

void Detector::backward(const ForwardTape& t, const ParameterSet& params, const MapGradients& grad,
                        ParameterSet& grads) const {
  if (grad.cls.size() != static_cast<std::size_t>(kNumLevels)) throw ShapeError("gradient level count mismatch");
  std::array<FeatureMap, kNumLevels> grad_pyramid;
  for (int l = 0; l < kNumLevels; ++l) {
    const LevelMap& level = t.maps.levels[l];
    const std::size_t p = level.pixels();
    FeatureMap g_logits(config_.num_classes, level.height, level.width);
    if (grad.cls[l].size() != g_logits.data.size()) throw ShapeError("cls gradient shape mismatch");
    std::copy(grad.cls[l].begin(), grad.cls[l].end(), g_logits.data.begin());
    FeatureMap g_reg(kRegChannels, level.height, level.width);
    std::copy(grad.reg[l].begin(), grad.reg[l].end(), g_reg.data.begin());
    for (std::size_t i = 0; i < p; ++i) {
      const double u = level.reg[4 * p + i] / kHalfPi;
      g_reg.data[4 * p + i] *= kHalfPi * (1.0 - u * u);
    }

    const auto& ht = t.head_tapes[l];
    const auto& ho = t.head_out[l];
    FeatureMap g_h2;
    FeatureMap g_tmp;
    back_conv(g_logits, head_[2], ht[2], params, grads, kHeadNames[2], &g_h2);
    back_conv(g_reg, head_[3], ht[3], params, grads, kHeadNames[3], &g_tmp);
    add_inplace(g_h2, g_tmp);
    relu_backward_inplace(g_h2, ho[1]);
    FeatureMap g_h1;
    back_conv(g_h2, head_[1], ht[1], params, grads, kHeadNames[1], &g_h1);
    relu_backward_inplace(g_h1, ho[0]);
    back_conv(g_h1, head_[0], ht[0], params, grads, kHeadNames[0], &grad_pyramid[l]);
  }

  for (int l = 0; l + 1 < kNumLevels; ++l) {
    FeatureMap& coarse = grad_pyramid[l + 1];
    add_inplace(coarse, upsample_nearest2x_backward(grad_pyramid[l], coarse.height, coarse.width));
  }

  std::array<FeatureMap, 4> g_backbone;
  for (int l = 0; l < kNumLevels; ++l) {
    back_conv(grad_pyramid[l], lateral_[l], t.lateral_tapes[l], params, grads, kLateralNames[l], &g_backbone[l + 1]);
  }
  for (int i = static_cast<int>(backbone_.size()) - 1; i >= 0; --i) {
    FeatureMap& g = g_backbone[i];
    if (g.data.empty()) g = FeatureMap(t.backbone_out[i].channels, t.backbone_out[i].height, t.backbone_out[i].width);
    relu_backward_inplace(g, t.backbone_out[i]);
    FeatureMap g_in;
    back_conv(g, backbone_[i], t.backbone_tapes[i], params, grads, kBackboneNames[i], i > 0 ? &g_in : nullptr);
    if (i > 0) {
      if (g_backbone[i - 1].data.empty()) {
        g_backbone[i - 1] = std::move(g_in);
      } else {
        add_inplace(g_backbone[i - 1], g_in);
      }
    }
  }
}

std::size_t AssignmentResult::num_positive() const {
  std::size_t n = 0;
  for (const auto& l : levels) n += static_cast<std::size_t>(std::count(l.positive.begin(), l.positive.end(), 1));
  return n;
}

int level_for_box(const OrientedBox& box, const DetectorConfig& config) {
  const double side = std::max(box.w, box.h);
  int level = 0;
  while (level < kNumLevels - 1 && side >= config.scale_bounds[level]) ++level;
  return level;
}

std::array<double, kRegChannels> encode_box(const OrientedBox& box, Point location, int stride) {
  const OrientedBox b = normalized(box);
  const double s = stride;
  return {(b.cx - location.x) / s, (b.cy - location.y) / s, std::log(b.w / s), std::log(b.h / s), b.theta};
}

OrientedBox decode_box(std::span<const double, kRegChannels> reg, Point location, int stride) {
  const double s = stride;
  OrientedBox b;
  b.cx = location.x + reg[0] * s;
  b.cy = location.y + reg[1] * s;
  b.w = s * std::exp(std::clamp(reg[2], -6.0, 6.0));
  b.h = s * std::exp(std::clamp(reg[3], -6.0, 6.0));
  b.theta = reg[4];
  return normalized(b);
}

AssignmentResult assign_targets(std::span<const OrientedBox> boxes, const DenseScoreMaps& shape,
                                const DetectorConfig& config) {
  AssignmentResult result;
  std::vector<OrientedBox> norm;
  std::vector<int> box_level;
  for (const auto& b : boxes) {
    validate(b);
    norm.push_back(normalized(b));
    box_level.push_back(level_for_box(norm.back(), config));
  }
  for (std::size_t l = 0; l < shape.levels.size(); ++l) {
    const LevelMap& level = shape.levels[l];
    const std::size_t p = level.pixels();
    LevelAssignment la;
    la.target_class.assign(p, -1);
    la.target_index.assign(p, -1);
    la.target_reg.assign(p * kRegChannels, 0.0);
    la.positive.assign(p, 0);
    for (std::size_t i = 0; i < p; ++i) {
      const Point loc = level.location(i);
      int best = -1;
      double best_area = 0.0;
      for (std::size_t b = 0; b < norm.size(); ++b) {
        if (box_level[b] != static_cast<int>(l)) continue;
        if (!point_in_box(loc, norm[b])) continue;
        const double area = norm[b].w * norm[b].h;
        if (best < 0 || area < best_area) {
          best = static_cast<int>(b);
          best_area = area;
        }
      }
      if (best < 0) continue;
      la.target_class[i] = norm[best].class_id;
      la.target_index[i] = best;
      la.positive[i] = 1;
      const auto enc = encode_box(norm[best], loc, level.stride);
      for (int k = 0; k < kRegChannels; ++k) la.target_reg[k * p + i] = enc[k];
    }
    result.levels.push_back(std::move(la));
  }
  return result;
}

double sigmoid_focal_term(double p, bool positive, double alpha, double gamma) {
  if (positive) return -alpha * xlog(std::pow(1.0 - p, gamma), p);
  return -(1.0 - alpha) * xlog(std::pow(p, gamma), 1.0 - p);
}

double smooth_l1(double residual, double beta) {
  const double a = std::abs(residual);
  return a < beta ? 0.5 * a * a / beta : a - 0.5 * beta;
}

namespace {

double smooth_l1_grad(double residual, double beta) {
  const double a = std::abs(residual);
  if (a < beta) return residual / beta;
  return residual > 0 ? 1.0 : -1.0;
}

void require_finite(const DenseScoreMaps& maps) {
  for (const auto& l : maps.levels) {
    for (double v : l.cls) {
      if (std::isnan(v)) throw NumericError("NaN in cls predictions");
    }
    for (double v : l.reg) {
      if (!std::isfinite(v)) throw NumericError("non-finite regression prediction");
    }
  }
}

}  // namespace

LossReport supervised_loss(const DenseScoreMaps& preds, const AssignmentResult& targets, const LossOptions& options,
                           MapGradients* grad, double grad_scale) {
  require_finite(preds);
  if (targets.levels.size() != preds.levels.size()) throw ShapeError("assignment/prediction level mismatch");
  const double norm = std::max<double>(1.0, static_cast<double>(targets.num_positive()));
  const double a = options.focal_alpha;
  const double g = options.focal_gamma;
  LossReport report;
  for (std::size_t l = 0; l < preds.levels.size(); ++l) {
    const LevelMap& level = preds.levels[l];
    const LevelAssignment& la = targets.levels[l];
    const std::size_t p = level.pixels();
    if (la.positive.size() != p) throw ShapeError("assignment/prediction pixel mismatch");
    for (int c = 0; c < preds.num_classes; ++c) {
      for (std::size_t i = 0; i < p; ++i) {
        const double prob = level.cls_at(c, i);
        const bool pos = la.target_class[i] == c;
        report.cls += sigmoid_focal_term(prob, pos, a, g);
        if (grad) {
          // d/dz of the focal term, expressed through p = sigmoid(z).
          double dz;
          if (pos) {
            dz = a * std::pow(1.0 - prob, g) * (g * xlog(prob, prob) - (1.0 - prob));
          } else {
            dz = (1.0 - a) * std::pow(prob, g) * (prob - g * xlog(1.0 - prob, 1.0 - prob));
          }
          grad->cls[l][c * p + i] += grad_scale * dz / norm;
        }
      }
    }
    for (std::size_t i = 0; i < p; ++i) {
      if (!la.positive[i]) continue;
      for (int k = 0; k < kRegChannels; ++k) {
        const double r = level.reg_at(k, i) - la.target_reg[k * p + i];
        report.reg += options.reg_weight * smooth_l1(r, options.smooth_l1_beta);
        if (grad) {
          grad->reg[l][k * p + i] += grad_scale * options.reg_weight * smooth_l1_grad(r, options.smooth_l1_beta) / norm;
        }
      }
    }
  }
  report.cls /= norm;
  report.reg /= norm;
  return report;
}

std::vector<OrientedBox> rotated_nms(std::vector<OrientedBox> boxes, double iou_thresh) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return boxes[x].score > boxes[y].score; });
  std::vector<OrientedBox> kept;
  for (std::size_t idx : order) {
    const OrientedBox& cand = boxes[idx];
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == cand.class_id && rotated_iou(k, cand) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

std::vector<OrientedBox> decode_predictions(const DenseScoreMaps& maps, const DecodeOptions& options) {
  std::vector<OrientedBox> candidates;
  for (const auto& level : maps.levels) {
    const std::size_t p = level.pixels();
    for (std::size_t i = 0; i < p; ++i) {
      int best_c = 0;
      double best = level.cls_at(0, i);
      for (int c = 1; c < maps.num_classes; ++c) {
        if (level.cls_at(c, i) > best) {
          best = level.cls_at(c, i);
          best_c = c;
        }
      }
      if (best < options.score_thresh) continue;
      std::array<double, kRegChannels> reg{};
      for (int k = 0; k < kRegChannels; ++k) reg[k] = level.reg_at(k, i);
      OrientedBox b = decode_box(reg, level.location(i), level.stride);
      if (!(b.w > kDegenerateTol && b.h > kDegenerateTol)) continue;
      b.class_id = best_c;
      b.score = best;
      candidates.push_back(b);
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const OrientedBox& x, const OrientedBox& y) { return x.score > y.score; });
  if (candidates.size() > options.pre_nms_top_k) candidates.resize(options.pre_nms_top_k);
  auto kept = rotated_nms(std::move(candidates), options.nms_iou);
  if (kept.size() > options.max_detections) kept.resize(options.max_detections);
  return kept;
}

}  // namespace ddpls
