#include "ddpls/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cstring>

namespace ddpls {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void im2col(const FeatureMap& in, const ConvShape& s, int oh, int ow, std::vector<double>& cols) {
  const int k = s.kernel;
  const int pad = k / 2;
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  cols.assign(static_cast<std::size_t>(in.channels) * k * k * p, 0.0);
  std::size_t row = 0;
  for (int c = 0; c < in.channels; ++c) {
    const double* src = in.data.data() + c * in.plane();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++row) {
        double* dst = cols.data() + row * p;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride + ky - pad;
          if (iy < 0 || iy >= in.height) continue;
          const double* srow = src + static_cast<std::size_t>(iy) * in.width;
          double* drow = dst + static_cast<std::size_t>(oy) * ow;
          if (s.stride == 1) {
            const int x0 = std::max(0, pad - kx);
            const int x1 = std::min(ow, in.width + pad - kx);
            for (int ox = x0; ox < x1; ++ox) drow[ox] = srow[ox + kx - pad];
          } else {
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * s.stride + kx - pad;
              if (ix >= 0 && ix < in.width) drow[ox] = srow[ix];
            }
          }
        }
      }
    }
  }
}

void col2im(const std::vector<double>& cols, const ConvShape& s, int oh, int ow, FeatureMap& out) {
  const int k = s.kernel;
  const int pad = k / 2;
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  std::fill(out.data.begin(), out.data.end(), 0.0);
  std::size_t row = 0;
  for (int c = 0; c < out.channels; ++c) {
    double* dst = out.data.data() + c * out.plane();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++row) {
        const double* src = cols.data() + row * p;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride + ky - pad;
          if (iy < 0 || iy >= out.height) continue;
          double* drow = dst + static_cast<std::size_t>(iy) * out.width;
          const double* srow = src + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride + kx - pad;
            if (ix >= 0 && ix < out.width) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace

NamedArray& ParameterSet::add(std::string name, std::vector<int> shape, double fill) {
  if (index_.count(name)) throw ShapeError("duplicate parameter name: " + name);
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  index_[name] = arrays_.size();
  arrays_.push_back(NamedArray{std::move(name), std::move(shape), std::vector<double>(n, fill)});
  return arrays_.back();
}

NamedArray& ParameterSet::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("unknown parameter: " + name);
  return arrays_[it->second];
}

const NamedArray& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("unknown parameter: " + name);
  return arrays_[it->second];
}

std::size_t ParameterSet::total_size() const {
  std::size_t n = 0;
  for (const auto& a : arrays_) n += a.values.size();
  return n;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet out;
  for (const auto& a : arrays_) out.add(a.name, a.shape, 0.0);
  return out;
}

void ParameterSet::require_same_layout(const ParameterSet& other) const {
  if (arrays_.size() != other.arrays_.size()) {
    throw ShapeError("parameter sets differ in array count");
  }
  for (std::size_t i = 0; i < arrays_.size(); ++i) {
    if (arrays_[i].name != other.arrays_[i].name || arrays_[i].shape != other.arrays_[i].shape) {
      throw ShapeError("parameter layout mismatch at " + arrays_[i].name);
    }
  }
}

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t fnv1a(const std::string& text, std::uint64_t seed) {
  return fnv1a(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()),
               seed);
}

std::uint64_t ParameterSet::content_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& a : arrays_) {
    h = fnv1a(a.name, h);
    h = fnv1a(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(a.shape.data()),
                                             a.shape.size() * sizeof(int)),
              h);
    h = fnv1a(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(a.values.data()),
                                             a.values.size() * sizeof(double)),
              h);
  }
  return h;
}

bool operator==(const ParameterSet& a, const ParameterSet& b) {
  if (a.arrays_.size() != b.arrays_.size()) return false;
  for (std::size_t i = 0; i < a.arrays_.size(); ++i) {
    const auto& x = a.arrays_[i];
    const auto& y = b.arrays_[i];
    if (x.name != y.name || x.shape != y.shape || x.values.size() != y.values.size()) return false;
    if (std::memcmp(x.values.data(), y.values.data(), x.values.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

FeatureMap conv2d_forward(const FeatureMap& input, const ConvShape& shape, std::span<const double> weight,
                          std::span<const double> bias, ConvTape* tape) {
  if (input.channels != shape.in_channels) {
    throw ShapeError("conv2d: expected " + std::to_string(shape.in_channels) + " input channels, got " +
                     std::to_string(input.channels));
  }
  const std::size_t k_rows = static_cast<std::size_t>(shape.in_channels) * shape.kernel * shape.kernel;
  if (weight.size() != k_rows * shape.out_channels || bias.size() != static_cast<std::size_t>(shape.out_channels)) {
    throw ShapeError("conv2d: weight/bias size mismatch");
  }
  const int oh = shape.out_size(input.height);
  const int ow = shape.out_size(input.width);
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  FeatureMap out(shape.out_channels, oh, ow);

  ConstMapMat w(weight.data(), shape.out_channels, static_cast<Eigen::Index>(k_rows));
  MapMat o(out.data.data(), shape.out_channels, static_cast<Eigen::Index>(p));

  const bool pointwise = shape.kernel == 1 && shape.stride == 1;
  std::vector<double> local;
  std::vector<double>& cols = tape ? tape->columns : local;
  if (pointwise) {
    ConstMapMat x(input.data.data(), shape.in_channels, static_cast<Eigen::Index>(p));
    o.noalias() = w * x;
    if (tape) cols = input.data;
  } else {
    im2col(input, shape, oh, ow, cols);
    ConstMapMat x(cols.data(), static_cast<Eigen::Index>(k_rows), static_cast<Eigen::Index>(p));
    o.noalias() = w * x;
  }
  for (int c = 0; c < shape.out_channels; ++c) o.row(c).array() += bias[c];
  if (tape) {
    tape->in_height = input.height;
    tape->in_width = input.width;
  }
  return out;
}

void conv2d_backward(const FeatureMap& grad_output, const ConvShape& shape, const ConvTape& tape,
                     std::span<const double> weight, std::span<double> grad_weight, std::span<double> grad_bias,
                     FeatureMap* grad_input) {
  const std::size_t k_rows = static_cast<std::size_t>(shape.in_channels) * shape.kernel * shape.kernel;
  const int oh = grad_output.height;
  const int ow = grad_output.width;
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  if (tape.columns.size() != k_rows * p) throw ShapeError("conv2d_backward: tape does not match gradient");

  ConstMapMat go(grad_output.data.data(), shape.out_channels, static_cast<Eigen::Index>(p));
  ConstMapMat cols(tape.columns.data(), static_cast<Eigen::Index>(k_rows), static_cast<Eigen::Index>(p));
  MapMat gw(grad_weight.data(), shape.out_channels, static_cast<Eigen::Index>(k_rows));
  gw.noalias() += go * cols.transpose();
  // Plain loop: Eigen's reductions peel by pointer alignment, which would make
  // the summation order depend on where the buffer was allocated.
  for (int c = 0; c < shape.out_channels; ++c) {
    const double* row = grad_output.data.data() + static_cast<std::size_t>(c) * p;
    double s = 0.0;
    for (std::size_t i = 0; i < p; ++i) s += row[i];
    grad_bias[c] += s;
  }

  if (!grad_input) return;
  ConstMapMat w(weight.data(), shape.out_channels, static_cast<Eigen::Index>(k_rows));
  *grad_input = FeatureMap(shape.in_channels, tape.in_height, tape.in_width);
  if (shape.kernel == 1 && shape.stride == 1) {
    MapMat gi(grad_input->data.data(), shape.in_channels, static_cast<Eigen::Index>(p));
    gi.noalias() = w.transpose() * go;
    return;
  }
  std::vector<double> gcols(k_rows * p);
  MapMat gc(gcols.data(), static_cast<Eigen::Index>(k_rows), static_cast<Eigen::Index>(p));
  gc.noalias() = w.transpose() * go;
  col2im(gcols, shape, oh, ow, *grad_input);
}

void relu_inplace(FeatureMap& x) {
  for (double& v : x.data) v = v > 0.0 ? v : 0.0;
}

void relu_backward_inplace(FeatureMap& grad, const FeatureMap& activation) {
  for (std::size_t i = 0; i < grad.data.size(); ++i) {
    if (!(activation.data[i] > 0.0)) grad.data[i] = 0.0;
  }
}

FeatureMap upsample_nearest2x(const FeatureMap& x, int out_height, int out_width) {
  FeatureMap out(x.channels, out_height, out_width);
  for (int c = 0; c < x.channels; ++c) {
    for (int y = 0; y < out_height; ++y) {
      const int sy = std::min(y / 2, x.height - 1);
      for (int xx = 0; xx < out_width; ++xx) {
        out.at(c, y, xx) = x.at(c, sy, std::min(xx / 2, x.width - 1));
      }
    }
  }
  return out;
}

FeatureMap upsample_nearest2x_backward(const FeatureMap& grad, int in_height, int in_width) {
  FeatureMap out(grad.channels, in_height, in_width);
  for (int c = 0; c < grad.channels; ++c) {
    for (int y = 0; y < grad.height; ++y) {
      const int sy = std::min(y / 2, in_height - 1);
      for (int x = 0; x < grad.width; ++x) {
        out.at(c, sy, std::min(x / 2, in_width - 1)) += grad.at(c, y, x);
      }
    }
  }
  return out;
}

void add_inplace(FeatureMap& dst, const FeatureMap& src) {
  if (dst.data.size() != src.data.size()) throw ShapeError("add: size mismatch");
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace ddpls
