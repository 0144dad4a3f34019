#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smoothnet/error.hpp"
#include "smoothnet/io.hpp"
#include "smoothnet/sdv.hpp"

namespace smoothnet::net {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class LayerKind : std::uint32_t { Conv3d = 0, BatchNorm = 1, Relu = 2, Dropout = 3, L2Norm = 4 };

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  double rate = 0.0;  // dropout only

  static LayerSpec conv(int in, int out, int k, int stride = 1, int pad = 0) {
    return {LayerKind::Conv3d, in, out, k, stride, pad, 0.0};
  }
  static LayerSpec batchnorm(int channels) { return {LayerKind::BatchNorm, channels, channels, 1, 1, 0, 0.0}; }
  static LayerSpec relu() { return {LayerKind::Relu}; }
  static LayerSpec dropout(double rate) { return {LayerKind::Dropout, 0, 0, 1, 1, 0, rate}; }
  static LayerSpec l2norm() { return {LayerKind::L2Norm}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// A layer chain plus the input resolution it was laid out for.
struct Architecture {
  int input_voxels = 16;
  std::vector<LayerSpec> layers;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Output spatial extent of each layer; throws BadArchitecture if the chain
/// is inconsistent or does not end at 1x1x1.
inline std::vector<int> layer_extents(const Architecture& arch) {
  if (arch.input_voxels < 1) fail(ErrorCode::BadArchitecture, "input resolution must be >= 1");
  if (arch.layers.empty()) fail(ErrorCode::BadArchitecture, "empty layer chain");
  std::vector<int> extents;
  int s = arch.input_voxels;
  int channels = 1;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto& l = arch.layers[i];
    const auto where = " (layer " + std::to_string(i) + ")";
    switch (l.kind) {
      case LayerKind::Conv3d:
        if (l.in_channels != channels) fail(ErrorCode::BadArchitecture, "conv input channels do not match" + where);
        if (l.out_channels < 1 || l.kernel < 1 || l.padding < 0) fail(ErrorCode::BadArchitecture, "bad conv shape" + where);
        if (l.stride != 1 && l.stride != 2) fail(ErrorCode::BadArchitecture, "stride must be 1 or 2" + where);
        if (s + 2 * l.padding < l.kernel) fail(ErrorCode::BadArchitecture, "kernel larger than padded input" + where);
        s = (s + 2 * l.padding - l.kernel) / l.stride + 1;
        channels = l.out_channels;
        break;
      case LayerKind::BatchNorm:
        if (l.in_channels != channels) fail(ErrorCode::BadArchitecture, "batchnorm channels do not match" + where);
        break;
      case LayerKind::Dropout:
        if (!(l.rate >= 0.0 && l.rate < 1.0)) fail(ErrorCode::BadArchitecture, "dropout rate must be in [0, 1)" + where);
        break;
      case LayerKind::Relu:
      case LayerKind::L2Norm: break;
      default: fail(ErrorCode::BadArchitecture, "unknown layer kind" + where);
    }
    extents.push_back(s);
  }
  if (s != 1) fail(ErrorCode::BadArchitecture, "chain ends at spatial extent " + std::to_string(s) + ", expected 1");
  return extents;
}

inline int output_dim(const Architecture& arch) {
  int channels = 1;
  for (const auto& l : arch.layers) {
    if (l.kind == LayerKind::Conv3d) channels = l.out_channels;
  }
  return channels;
}

/// Builds a chain from a comma-separated description:
///   conv:OUT:K:STRIDE:PAD   OUT may be "D" (descriptor dim), K may be "final"
///                           (the remaining spatial extent)
///   bn | relu | dropout:RATE | l2norm
/// or one of the presets "default" / "compact".
inline Architecture parse_architecture(std::string_view text, int input_voxels, int descriptor_dim) {
  if (text == "default") {
    text =
        "conv:32:3:1:1,bn,relu,conv:32:3:1:1,bn,relu,conv:64:3:2:1,bn,relu,conv:64:3:1:1,bn,relu,"
        "conv:128:3:2:1,bn,relu,conv:128:3:1:1,bn,relu,dropout:0.3,conv:D:final:1:0,bn,l2norm";
  } else if (text == "compact") {
    text =
        "conv:4:3:2:1,bn,relu,conv:8:3:1:1,bn,relu,conv:16:3:2:1,bn,relu,conv:16:3:1:1,bn,relu,"
        "dropout:0.3,conv:D:final:1:0,bn,l2norm";
  }
  Architecture arch;
  arch.input_voxels = input_voxels;
  int channels = 1;
  int extent = input_voxels;
  auto parse_int = [&](std::string_view s) {
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      fail(ErrorCode::BadArchitecture, "bad integer '" + std::string(s) + "' in architecture");
    }
    return v;
  };
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto comma = text.find(',', pos);
    if (comma == std::string_view::npos) comma = text.size();
    const auto token = text.substr(pos, comma - pos);
    pos = comma + 1;
    std::vector<std::string_view> parts;
    std::size_t p = 0;
    while (p <= token.size()) {
      auto colon = token.find(':', p);
      if (colon == std::string_view::npos) colon = token.size();
      parts.push_back(token.substr(p, colon - p));
      p = colon + 1;
    }
    if (parts[0] == "conv") {
      if (parts.size() != 5) fail(ErrorCode::BadArchitecture, "conv needs conv:OUT:K:STRIDE:PAD");
      const int out = parts[1] == "D" ? descriptor_dim : parse_int(parts[1]);
      const int pad = parse_int(parts[4]);
      const int k = parts[2] == "final" ? extent + 2 * pad : parse_int(parts[2]);
      const int stride = parse_int(parts[3]);
      arch.layers.push_back(LayerSpec::conv(channels, out, k, stride, pad));
      if (stride < 1 || k < 1 || extent + 2 * pad < k) fail(ErrorCode::BadArchitecture, "bad conv '" + std::string(token) + "'");
      extent = (extent + 2 * pad - k) / stride + 1;
      channels = out;
    } else if (parts[0] == "bn" && parts.size() == 1) {
      arch.layers.push_back(LayerSpec::batchnorm(channels));
    } else if (parts[0] == "relu" && parts.size() == 1) {
      arch.layers.push_back(LayerSpec::relu());
    } else if (parts[0] == "l2norm" && parts.size() == 1) {
      arch.layers.push_back(LayerSpec::l2norm());
    } else if (parts[0] == "dropout" && parts.size() == 2) {
      double rate = 0;
      auto [q, ec] = std::from_chars(parts[1].data(), parts[1].data() + parts[1].size(), rate);
      if (ec != std::errc()) fail(ErrorCode::BadArchitecture, "bad dropout rate");
      arch.layers.push_back(LayerSpec::dropout(rate));
    } else {
      fail(ErrorCode::BadArchitecture, "unknown layer token '" + std::string(token) + "'");
    }
  }
  layer_extents(arch);
  return arch;
}

/// Per-layer parameters. Conv layers use weight (out x in*k^3, row-major)
/// and bias; batchnorm layers use the running statistics. The batchnorm
/// affine transform is fixed to identity and has no storage.
struct LayerParams {
  std::vector<double> weight;
  std::vector<double> bias;
  std::vector<double> running_mean;
  std::vector<double> running_var;

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct NetworkParams {
  Architecture arch;
  std::vector<LayerParams> layers;
  /// Bumped on every in-place update so caches from older forwards are detected.
  std::uint64_t generation = 0;

  bool same_values(const NetworkParams& o) const { return arch == o.arch && layers == o.layers; }
};

/// Gradients for the trainable tensors (conv weights and biases).
struct Gradients {
  std::vector<std::vector<double>> weight;
  std::vector<std::vector<double>> bias;
};

inline Gradients zero_gradients(const NetworkParams& params) {
  Gradients g;
  for (const auto& l : params.layers) {
    g.weight.emplace_back(l.weight.size(), 0.0);
    g.bias.emplace_back(l.bias.size(), 0.0);
  }
  return g;
}

struct InitOptions {
  double gain = 0.6;
  double bias = 0.01;
};

/// Orthogonal weights scaled by `gain`, constant biases, unit running
/// variance. Deterministic in `seed`.
inline NetworkParams init_params(const Architecture& arch, std::uint64_t seed, InitOptions opt = {}) {
  layer_extents(arch);
  NetworkParams params;
  params.arch = arch;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (const auto& spec : arch.layers) {
    LayerParams lp;
    if (spec.kind == LayerKind::Conv3d) {
      const int fan_in = spec.in_channels * spec.kernel * spec.kernel * spec.kernel;
      const int out = spec.out_channels;
      const int rows = std::max(out, fan_in);
      const int cols = std::min(out, fan_in);
      Eigen::MatrixXd a(rows, cols);
      for (int c = 0; c < cols; ++c) {
        for (int r = 0; r < rows; ++r) a(r, c) = gauss(rng);
      }
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
      Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
      const Eigen::MatrixXd r = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
      for (int c = 0; c < cols; ++c) {
        if (r(c, c) < 0) q.col(c) *= -1.0;
      }
      RowMatrix w = out <= fan_in ? RowMatrix(q.transpose()) : RowMatrix(q);
      w *= opt.gain;
      lp.weight.assign(w.data(), w.data() + w.size());
      lp.bias.assign(static_cast<std::size_t>(out), opt.bias);
    } else if (spec.kind == LayerKind::BatchNorm) {
      lp.running_mean.assign(static_cast<std::size_t>(spec.in_channels), 0.0);
      lp.running_var.assign(static_cast<std::size_t>(spec.in_channels), 1.0);
    }
    params.layers.push_back(std::move(lp));
  }
  return params;
}

/// Batch of cubic multi-channel volumes, laid out [n][channel][z][y][x].
struct Tensor {
  int n = 0, channels = 0, extent = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int n_, int c_, int s_)
      : n(n_), channels(c_), extent(s_), data(static_cast<std::size_t>(n_) * c_ * s_ * s_ * s_, 0.0) {}

  std::size_t volume() const { return static_cast<std::size_t>(extent) * extent * extent; }
  std::size_t sample_size() const { return static_cast<std::size_t>(channels) * volume(); }
  double* sample(int b) { return data.data() + static_cast<std::size_t>(b) * sample_size(); }
  const double* sample(int b) const { return data.data() + static_cast<std::size_t>(b) * sample_size(); }
};

inline Tensor grids_to_tensor(std::span<const SdvGrid> grids, int voxels) {
  Tensor t(static_cast<int>(grids.size()), 1, voxels);
  for (std::size_t b = 0; b < grids.size(); ++b) {
    if (grids[b].voxels != voxels) {
      fail(ErrorCode::ShapeMismatch, "grid " + std::to_string(b) + " has " + std::to_string(grids[b].voxels) +
                                         " voxels per axis, network expects " + std::to_string(voxels));
    }
    std::copy(grids[b].values.begin(), grids[b].values.end(), t.sample(static_cast<int>(b)));
  }
  return t;
}

enum class Mode { Train, Infer };

struct LayerCache {
  Tensor input;
  std::vector<double> aux;       // bn: inverse std per channel; dropout: mask scale; l2norm: norms
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // unbiased, for running-stat updates
};

/// Activations retained by a training forward pass.
struct ForwardCache {
  Mode mode = Mode::Infer;
  std::uint64_t generation = 0;
  std::vector<LayerCache> layers;
  Tensor output;
};

struct ForwardResult {
  RowMatrix descriptors;  // n x D, unit rows
  ForwardCache cache;
};

namespace detail {

struct ConvGeometry {
  int in_c, out_c, k, stride, pad, in_s, out_s;
  int patch() const { return in_c * k * k * k; }
  int out_vol() const { return out_s * out_s * out_s; }
};

inline ConvGeometry geometry(const LayerSpec& l, int in_extent) {
  const int out_s = (in_extent + 2 * l.padding - l.kernel) / l.stride + 1;
  return {l.in_channels, l.out_channels, l.kernel, l.stride, l.padding, in_extent, out_s};
}

// col(r, o): r = ((ci*k + kz)*k + ky)*k + kx, o = (oz*out_s + oy)*out_s + ox.
inline void im2col(const double* x, const ConvGeometry& g, RowMatrix& col) {
  col.setZero(g.patch(), g.out_vol());
  const int s = g.in_s;
  for (int ci = 0; ci < g.in_c; ++ci) {
    for (int kz = 0; kz < g.k; ++kz) {
      for (int ky = 0; ky < g.k; ++ky) {
        for (int kx = 0; kx < g.k; ++kx) {
          const int r = ((ci * g.k + kz) * g.k + ky) * g.k + kx;
          double* row = col.row(r).data();
          for (int oz = 0; oz < g.out_s; ++oz) {
            const int iz = oz * g.stride - g.pad + kz;
            if (iz < 0 || iz >= s) continue;
            for (int oy = 0; oy < g.out_s; ++oy) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= s) continue;
              const double* src = x + ((static_cast<std::size_t>(ci) * s + iz) * s + iy) * s;
              double* dst = row + (static_cast<std::size_t>(oz) * g.out_s + oy) * g.out_s;
              for (int ox = 0; ox < g.out_s; ++ox) {
                const int ix = ox * g.stride - g.pad + kx;
                if (ix >= 0 && ix < s) dst[ox] = src[ix];
              }
            }
          }
        }
      }
    }
  }
}

inline void col2im(const RowMatrix& col, const ConvGeometry& g, double* dx) {
  const int s = g.in_s;
  for (int ci = 0; ci < g.in_c; ++ci) {
    for (int kz = 0; kz < g.k; ++kz) {
      for (int ky = 0; ky < g.k; ++ky) {
        for (int kx = 0; kx < g.k; ++kx) {
          const int r = ((ci * g.k + kz) * g.k + ky) * g.k + kx;
          const double* row = col.row(r).data();
          for (int oz = 0; oz < g.out_s; ++oz) {
            const int iz = oz * g.stride - g.pad + kz;
            if (iz < 0 || iz >= s) continue;
            for (int oy = 0; oy < g.out_s; ++oy) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= s) continue;
              double* dst = dx + ((static_cast<std::size_t>(ci) * s + iz) * s + iy) * s;
              const double* src = row + (static_cast<std::size_t>(oz) * g.out_s + oy) * g.out_s;
              for (int ox = 0; ox < g.out_s; ++ox) {
                const int ix = ox * g.stride - g.pad + kx;
                if (ix >= 0 && ix < s) dst[ix] += src[ox];
              }
            }
          }
        }
      }
    }
  }
}

inline Tensor conv_forward(const Tensor& x, const LayerSpec& spec, const LayerParams& p) {
  const auto g = geometry(spec, x.extent);
  Tensor y(x.n, g.out_c, g.out_s);
  Eigen::Map<const RowMatrix> w(p.weight.data(), g.out_c, g.patch());
  Eigen::Map<const Eigen::VectorXd> bias(p.bias.data(), g.out_c);
  RowMatrix col;
  for (int b = 0; b < x.n; ++b) {
    im2col(x.sample(b), g, col);
    Eigen::Map<RowMatrix> out(y.sample(b), g.out_c, g.out_vol());
    out.noalias() = w * col;
    out.colwise() += bias;
  }
  return y;
}

// Hash-free deterministic uniform in [0, 1) from a 64-bit engine.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace detail

struct ForwardOptions {
  double bn_epsilon = 1e-5;
};

/// Runs the network on a batch. Train mode uses batch statistics and
/// inverted dropout (masks drawn from `dropout_seed`); infer mode uses the
/// running statistics and no dropout.
inline ForwardResult forward(const NetworkParams& params, const Tensor& input, Mode mode, std::uint64_t dropout_seed = 0,
                             ForwardOptions opt = {}) {
  const auto& arch = params.arch;
  if (params.layers.size() != arch.layers.size()) fail(ErrorCode::ShapeMismatch, "params do not match architecture");
  if (input.channels != 1 || input.extent != arch.input_voxels) {
    fail(ErrorCode::ShapeMismatch, "input is " + std::to_string(input.channels) + "x" + std::to_string(input.extent) +
                                       "^3, network expects 1x" + std::to_string(arch.input_voxels) + "^3");
  }
  if (input.n < 1) fail(ErrorCode::ShapeMismatch, "empty batch");

  ForwardResult result;
  result.cache.mode = mode;
  result.cache.generation = params.generation;
  Tensor x = input;
  for (std::size_t li = 0; li < arch.layers.size(); ++li) {
    const auto& spec = arch.layers[li];
    const auto& p = params.layers[li];
    LayerCache lc;
    const bool keep = mode == Mode::Train;
    switch (spec.kind) {
      case LayerKind::Conv3d: {
        Tensor y = detail::conv_forward(x, spec, p);
        if (keep) lc.input = std::move(x);
        x = std::move(y);
        break;
      }
      case LayerKind::BatchNorm: {
        const int c = x.channels;
        const std::size_t vol = x.volume();
        const double count = static_cast<double>(x.n) * static_cast<double>(vol);
        std::vector<double> mean(static_cast<std::size_t>(c), 0.0), var(static_cast<std::size_t>(c), 0.0);
        if (mode == Mode::Train) {
          for (int b = 0; b < x.n; ++b) {
            for (int ch = 0; ch < c; ++ch) {
              const double* v = x.sample(b) + ch * vol;
              for (std::size_t i = 0; i < vol; ++i) mean[ch] += v[i];
            }
          }
          for (auto& m : mean) m /= count;
          for (int b = 0; b < x.n; ++b) {
            for (int ch = 0; ch < c; ++ch) {
              const double* v = x.sample(b) + ch * vol;
              for (std::size_t i = 0; i < vol; ++i) var[ch] += (v[i] - mean[ch]) * (v[i] - mean[ch]);
            }
          }
          lc.batch_mean = mean;
          lc.batch_var.resize(var.size());
          for (std::size_t ch = 0; ch < var.size(); ++ch) {
            lc.batch_var[ch] = count > 1 ? var[ch] / (count - 1) : 0.0;
            var[ch] /= count;
          }
        } else {
          mean = p.running_mean;
          var = p.running_var;
        }
        std::vector<double> inv_std(static_cast<std::size_t>(c));
        for (int ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + opt.bn_epsilon);
        for (int b = 0; b < x.n; ++b) {
          for (int ch = 0; ch < c; ++ch) {
            double* v = x.sample(b) + ch * vol;
            for (std::size_t i = 0; i < vol; ++i) v[i] = (v[i] - mean[ch]) * inv_std[ch];
          }
        }
        if (keep) {
          lc.aux = std::move(inv_std);
          lc.input = x;  // normalized output
        }
        break;
      }
      case LayerKind::Relu: {
        for (double& v : x.data) v = v > 0.0 ? v : 0.0;
        if (keep) lc.input = x;  // output; its sign pattern is the mask
        break;
      }
      case LayerKind::Dropout: {
        if (mode == Mode::Train && spec.rate > 0.0) {
          std::mt19937_64 rng(dropout_seed * 0x9E3779B97F4A7C15ULL + li);
          const double scale = 1.0 / (1.0 - spec.rate);
          lc.aux.resize(x.data.size());
          for (std::size_t i = 0; i < x.data.size(); ++i) {
            lc.aux[i] = detail::uniform01(rng) < spec.rate ? 0.0 : scale;
            x.data[i] *= lc.aux[i];
          }
        }
        break;
      }
      case LayerKind::L2Norm: {
        const std::size_t ss = x.sample_size();
        std::vector<double> norms(static_cast<std::size_t>(x.n));
        for (int b = 0; b < x.n; ++b) {
          double* v = x.sample(b);
          double sq = 0;
          for (std::size_t i = 0; i < ss; ++i) sq += v[i] * v[i];
          norms[b] = std::sqrt(sq + 1e-12);
          for (std::size_t i = 0; i < ss; ++i) v[i] /= norms[b];
        }
        if (keep) {
          lc.aux = std::move(norms);
          lc.input = x;  // output
        }
        break;
      }
    }
    if (keep) result.cache.layers.push_back(std::move(lc));
  }
  const int dim = static_cast<int>(x.sample_size());
  result.descriptors.resize(x.n, dim);
  for (int b = 0; b < x.n; ++b) {
    for (int d = 0; d < dim; ++d) result.descriptors(b, d) = x.sample(b)[d];
  }
  if (mode == Mode::Train) result.cache.output = std::move(x);
  return result;
}

inline ForwardResult forward(const NetworkParams& params, std::span<const SdvGrid> grids, Mode mode,
                             std::uint64_t dropout_seed = 0, ForwardOptions opt = {}) {
  return forward(params, grids_to_tensor(grids, params.arch.input_voxels), mode, dropout_seed, opt);
}

/// Exact gradients of sum(upstream .* descriptors) with respect to the conv
/// weights and biases, through a train-mode cache.
inline Gradients backward(const NetworkParams& params, const ForwardCache& cache, const RowMatrix& upstream) {
  if (cache.mode != Mode::Train || cache.generation != params.generation ||
      cache.layers.size() != params.arch.layers.size()) {
    fail(ErrorCode::StaleCache, "backward needs the cache of a train-mode forward with the current parameters");
  }
  const int n = cache.output.n;
  const int dim = static_cast<int>(cache.output.sample_size());
  if (upstream.rows() != n || upstream.cols() != dim) fail(ErrorCode::ShapeMismatch, "upstream gradient shape");

  Gradients grads = zero_gradients(params);
  Tensor dy(n, cache.output.channels, cache.output.extent);
  for (int b = 0; b < n; ++b) {
    for (int d = 0; d < dim; ++d) dy.sample(b)[d] = upstream(b, d);
  }

  for (std::size_t li = params.arch.layers.size(); li-- > 0;) {
    const auto& spec = params.arch.layers[li];
    const auto& lc = cache.layers[li];
    switch (spec.kind) {
      case LayerKind::L2Norm: {
        // y = x / r, r = sqrt(|x|^2 + eps): dx = (dy - y <y, dy>) / r
        const std::size_t ss = dy.sample_size();
        for (int b = 0; b < n; ++b) {
          const double* y = lc.input.sample(b);
          double* g = dy.sample(b);
          double dot = 0;
          for (std::size_t i = 0; i < ss; ++i) dot += y[i] * g[i];
          for (std::size_t i = 0; i < ss; ++i) g[i] = (g[i] - y[i] * dot) / lc.aux[b];
        }
        break;
      }
      case LayerKind::Dropout: {
        if (!lc.aux.empty()) {
          for (std::size_t i = 0; i < dy.data.size(); ++i) dy.data[i] *= lc.aux[i];
        }
        break;
      }
      case LayerKind::Relu: {
        for (std::size_t i = 0; i < dy.data.size(); ++i) {
          if (!(lc.input.data[i] > 0.0)) dy.data[i] = 0.0;
        }
        break;
      }
      case LayerKind::BatchNorm: {
        // dx = inv_std * (dy - mean(dy) - xhat * mean(dy * xhat)), per channel.
        const int c = dy.channels;
        const std::size_t vol = dy.volume();
        const double count = static_cast<double>(n) * static_cast<double>(vol);
        for (int ch = 0; ch < c; ++ch) {
          double mean_dy = 0, mean_dy_xhat = 0;
          for (int b = 0; b < n; ++b) {
            const double* g = dy.sample(b) + ch * vol;
            const double* xh = lc.input.sample(b) + ch * vol;
            for (std::size_t i = 0; i < vol; ++i) {
              mean_dy += g[i];
              mean_dy_xhat += g[i] * xh[i];
            }
          }
          mean_dy /= count;
          mean_dy_xhat /= count;
          for (int b = 0; b < n; ++b) {
            double* g = dy.sample(b) + ch * vol;
            const double* xh = lc.input.sample(b) + ch * vol;
            for (std::size_t i = 0; i < vol; ++i) g[i] = lc.aux[ch] * (g[i] - mean_dy - xh[i] * mean_dy_xhat);
          }
        }
        break;
      }
      case LayerKind::Conv3d: {
        const auto& x = lc.input;
        const auto g = detail::geometry(spec, x.extent);
        const auto& p = params.layers[li];
        Eigen::Map<const RowMatrix> w(p.weight.data(), g.out_c, g.patch());
        Eigen::Map<RowMatrix> dw(grads.weight[li].data(), g.out_c, g.patch());
        Eigen::Map<Eigen::VectorXd> db(grads.bias[li].data(), g.out_c);
        const bool need_dx = li > 0;
        Tensor dx;
        if (need_dx) dx = Tensor(n, g.in_c, g.in_s);
        RowMatrix col, dcol;
        for (int b = 0; b < n; ++b) {
          Eigen::Map<const RowMatrix> gy(dy.sample(b), g.out_c, g.out_vol());
          detail::im2col(x.sample(b), g, col);
          dw.noalias() += gy * col.transpose();
          db += gy.rowwise().sum();
          if (need_dx) {
            dcol.noalias() = w.transpose() * gy;
            detail::col2im(dcol, g, dx.sample(b));
          }
        }
        if (!need_dx) return grads;
        dy = std::move(dx);
        break;
      }
    }
  }
  return grads;
}

/// Folds the batch statistics of a training forward into the running
/// estimates: running = momentum * running + (1 - momentum) * batch.
inline void update_running_stats(NetworkParams& params, const ForwardCache& cache, double momentum) {
  if (cache.mode != Mode::Train || cache.layers.size() != params.layers.size()) {
    fail(ErrorCode::StaleCache, "running statistics need a train-mode cache");
  }
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    if (params.arch.layers[li].kind != LayerKind::BatchNorm) continue;
    auto& p = params.layers[li];
    const auto& lc = cache.layers[li];
    for (std::size_t ch = 0; ch < p.running_mean.size(); ++ch) {
      p.running_mean[ch] = momentum * p.running_mean[ch] + (1 - momentum) * lc.batch_mean[ch];
      p.running_var[ch] = momentum * p.running_var[ch] + (1 - momentum) * lc.batch_var[ch];
    }
  }
  ++params.generation;
}

// ---------------------------------------------------------------------------
// Weight files: "SDVW", u32 version, u32 input voxels, u32 layer count, then
// per layer a shape header and little-endian f32 payload.

inline constexpr std::uint32_t kWeightsVersion = 1;

inline std::string format_params(const NetworkParams& params) {
  io::ByteWriter w;
  w.put_bytes("SDVW");
  w.put(kWeightsVersion);
  w.put(static_cast<std::uint32_t>(params.arch.input_voxels));
  w.put(static_cast<std::uint32_t>(params.arch.layers.size()));
  for (std::size_t li = 0; li < params.arch.layers.size(); ++li) {
    const auto& s = params.arch.layers[li];
    const auto& p = params.layers[li];
    w.put(static_cast<std::uint32_t>(s.kind));
    w.put(static_cast<std::uint32_t>(s.in_channels));
    w.put(static_cast<std::uint32_t>(s.out_channels));
    w.put(static_cast<std::uint32_t>(s.kernel));
    w.put(static_cast<std::uint32_t>(s.stride));
    w.put(static_cast<std::uint32_t>(s.padding));
    w.put(static_cast<float>(s.rate));
    for (const auto* tensor : {&p.weight, &p.bias, &p.running_mean, &p.running_var}) {
      w.put(static_cast<std::uint32_t>(tensor->size()));
      for (double v : *tensor) w.put(static_cast<float>(v));
    }
  }
  return w.bytes();
}

inline NetworkParams parse_params(std::string_view data) {
  io::ByteReader r(data);
  if (r.remaining() < 4 || r.get_bytes(4, "magic") != "SDVW") fail(ErrorCode::BadMagic, "weight file lacks 'SDVW' magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kWeightsVersion) fail(ErrorCode::VersionMismatch, "weight file version " + std::to_string(version));
  NetworkParams params;
  params.arch.input_voxels = static_cast<int>(r.get<std::uint32_t>("input voxels"));
  const auto count = r.get<std::uint32_t>("layer count");
  if (count > r.remaining() / 28) fail(ErrorCode::TruncatedPayload, "layer count exceeds file size");
  for (std::uint32_t li = 0; li < count; ++li) {
    LayerSpec s;
    const auto kind = r.get<std::uint32_t>("layer kind");
    if (kind > static_cast<std::uint32_t>(LayerKind::L2Norm)) {
      fail(ErrorCode::ShapeMismatch, "unknown layer kind " + std::to_string(kind) + " at byte offset " + std::to_string(r.position() - 4));
    }
    s.kind = static_cast<LayerKind>(kind);
    s.in_channels = static_cast<int>(r.get<std::uint32_t>("in channels"));
    s.out_channels = static_cast<int>(r.get<std::uint32_t>("out channels"));
    s.kernel = static_cast<int>(r.get<std::uint32_t>("kernel"));
    s.stride = static_cast<int>(r.get<std::uint32_t>("stride"));
    s.padding = static_cast<int>(r.get<std::uint32_t>("padding"));
    s.rate = static_cast<double>(r.get<float>("rate"));
    LayerParams p;
    for (auto* tensor : {&p.weight, &p.bias, &p.running_mean, &p.running_var}) {
      const auto len = r.get<std::uint32_t>("tensor length");
      if (len > r.remaining() / 4) {
        fail(ErrorCode::TruncatedPayload, "tensor of " + std::to_string(len) + " floats truncated at byte offset " +
                                              std::to_string(r.position()));
      }
      tensor->resize(len);
      for (auto& v : *tensor) v = static_cast<double>(r.get<float>("tensor value"));
    }
    params.arch.layers.push_back(s);
    params.layers.push_back(std::move(p));
  }
  if (r.remaining() != 0) fail(ErrorCode::ShapeMismatch, "trailing bytes after last layer");
  try {
    layer_extents(params.arch);
  } catch (const Error& e) {
    fail(ErrorCode::ShapeMismatch, std::string("stored architecture is invalid: ") + e.what());
  }
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    const auto& s = params.arch.layers[li];
    const auto& p = params.layers[li];
    std::size_t w = 0, b = 0, m = 0;
    if (s.kind == LayerKind::Conv3d) {
      w = static_cast<std::size_t>(s.out_channels) * s.in_channels * s.kernel * s.kernel * s.kernel;
      b = static_cast<std::size_t>(s.out_channels);
    } else if (s.kind == LayerKind::BatchNorm) {
      m = static_cast<std::size_t>(s.in_channels);
    }
    if (p.weight.size() != w || p.bias.size() != b || p.running_mean.size() != m || p.running_var.size() != m) {
      fail(ErrorCode::ShapeMismatch, "tensor sizes of layer " + std::to_string(li) + " do not match its shape header");
    }
  }
  return params;
}

inline void save_params(const std::filesystem::path& path, const NetworkParams& params) {
  io::write_file_atomic(path, format_params(params));
}

inline NetworkParams load_params(const std::filesystem::path& path) { return parse_params(io::read_file(path)); }

/// Loads and checks that the stored chain equals `expected`.
inline NetworkParams load_params(const std::filesystem::path& path, const Architecture& expected) {
  auto params = load_params(path);
  if (params.arch.input_voxels != expected.input_voxels || params.arch.layers.size() != expected.layers.size()) {
    fail(ErrorCode::ShapeMismatch, "weight file architecture differs from the requested one");
  }
  for (std::size_t i = 0; i < expected.layers.size(); ++i) {
    auto a = params.arch.layers[i];
    auto b = expected.layers[i];
    // Rates travel as f32.
    a.rate = static_cast<float>(a.rate);
    b.rate = static_cast<float>(b.rate);
    if (!(a == b)) fail(ErrorCode::ShapeMismatch, "layer " + std::to_string(i) + " differs from the requested architecture");
  }
  params.arch = expected;
  return params;
}

}  // namespace smoothnet::net
