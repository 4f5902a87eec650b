#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddpls {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Planar (CHW) double activations for a single image.
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  double& at(int c, int y, int x) { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  double at(int c, int y, int x) const {
    return data[c * plane() + static_cast<std::size_t>(y) * width + x];
  }
};

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
};

/// Ordered collection of named parameter arrays. Order is insertion order and
/// is part of the checkpoint format.
class ParameterSet {
 public:
  NamedArray& add(std::string name, std::vector<int> shape, double fill = 0.0);

  NamedArray& get(const std::string& name);
  const NamedArray& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<NamedArray>& arrays() { return arrays_; }
  const std::vector<NamedArray>& arrays() const { return arrays_; }
  std::size_t total_size() const;

  /// Same names, same shapes, zero values.
  ParameterSet zeros_like() const;
  /// Throws ShapeError unless names, order and shapes agree.
  void require_same_layout(const ParameterSet& other) const;

  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t content_hash() const;

  friend bool operator==(const ParameterSet& a, const ParameterSet& b);

 private:
  std::vector<NamedArray> arrays_;
  std::map<std::string, std::size_t> index_;
};

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t seed = 0xcbf29ce484222325ull);
std::uint64_t fnv1a(const std::string& text, std::uint64_t seed = 0xcbf29ce484222325ull);

/// Square-kernel convolution with symmetric zero padding k/2.
struct ConvShape {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;

  int out_size(int in) const { return (in + 2 * (kernel / 2) - kernel) / stride + 1; }
};

/// Scratch kept between forward and backward of one convolution.
struct ConvTape {
  std::vector<double> columns;  // (Cin*k*k) x (Hout*Wout), row-major
  int in_height = 0;
  int in_width = 0;
};

FeatureMap conv2d_forward(const FeatureMap& input, const ConvShape& shape, std::span<const double> weight,
                          std::span<const double> bias, ConvTape* tape);

/// Accumulates into grad_weight / grad_bias; writes grad_input when non-null.
void conv2d_backward(const FeatureMap& grad_output, const ConvShape& shape, const ConvTape& tape,
                     std::span<const double> weight, std::span<double> grad_weight,
                     std::span<double> grad_bias, FeatureMap* grad_input);

void relu_inplace(FeatureMap& x);
/// grad *= (activation > 0), where activation is the ReLU output.
void relu_backward_inplace(FeatureMap& grad, const FeatureMap& activation);

FeatureMap upsample_nearest2x(const FeatureMap& x, int out_height, int out_width);
/// Adjoint of upsample_nearest2x: sums 2x2 blocks (clipped to `grad`).
FeatureMap upsample_nearest2x_backward(const FeatureMap& grad, int in_height, int in_width);

void add_inplace(FeatureMap& dst, const FeatureMap& src);

}  // namespace ddpls
