#pragma once

#include <cmath>
#include <numbers>
#include <ostream>
#include <span>
#include <vector>

#include "smoothnet/config.hpp"
#include "smoothnet/core.hpp"
#include "smoothnet/lrf.hpp"
#include "smoothnet/spatial_index.hpp"

namespace smoothnet {

struct GridConfig {
  double width = 0.3;   // W: edge of the cube, meters
  int voxels = 16;      // c: voxels per axis
  double kernel = 1.75 * (0.3 / 16) / 2;  // h: Gaussian bandwidth, meters
  bool occupancy = false;                 // binary occupancy instead of smoothed density

  static GridConfig from(const RunConfig& cfg) {
    return {cfg.grid_width, cfg.grid_voxels, cfg.kernel_width, cfg.occupancy_grid};
  }

  double voxel_edge() const { return width / voxels; }
  double support_radius() const { return std::sqrt(3.0) / 2.0 * width; }
  std::size_t cells() const { return static_cast<std::size_t>(voxels) * voxels * voxels; }

  /// Centroid coordinate of voxel index `i` along any axis.
  double centroid(int i) const { return -width / 2 + (i + 0.5) * voxel_edge(); }

  void validate() const {
    if (!(width > 0)) fail(ErrorCode::InvariantViolation, "grid width must be > 0");
    if (voxels < 2) fail(ErrorCode::InvariantViolation, "grid needs >= 2 voxels per axis");
    if (!(kernel > 0)) fail(ErrorCode::InvariantViolation, "kernel width must be > 0");
    if (3 * kernel > width) fail(ErrorCode::InvariantViolation, "3 * kernel width must not exceed grid width");
  }
};

/// c x c x c grid of non-negative values summing to 1 (or all zero).
/// Flat index j + c * (k + c * l): x fastest, then y, then z.
struct SdvGrid {
  int voxels = 0;
  std::vector<double> values;

  SdvGrid() = default;
  explicit SdvGrid(int c) : voxels(c), values(static_cast<std::size_t>(c) * c * c, 0.0) {}

  std::size_t index(int j, int k, int l) const {
    return static_cast<std::size_t>(j) + static_cast<std::size_t>(voxels) * (k + static_cast<std::size_t>(voxels) * l);
  }
  double operator()(int j, int k, int l) const { return values[index(j, k, l)]; }
  double sum() const {
    double s = 0;
    for (double v : values) s += v;
    return s;
  }
  bool is_zero() const {
    for (double v : values) {
      if (v != 0.0) return false;
    }
    return true;
  }

  /// Whitespace-separated dump of all c^3 values in flat order.
  void dump(std::ostream& out) const {
    out.precision(17);
    for (std::size_t i = 0; i < values.size(); ++i) out << values[i] << (i + 1 == values.size() ? '\n' : ' ');
  }
};

/// Coordinates of `points` in the frame: R (p - origin) with R rows = axes.
inline std::vector<Vec3> canonicalize(std::span<const Vec3> points, const Lrf& lrf) {
  const Mat3 r = lrf.rotation();
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(r * (p - lrf.origin));
  return out;
}

/// Smoothed density voxelization of canonical points. Every voxel averages the
/// truncated Gaussian response of the points strictly within 3h of its
/// centroid; the grid is then scaled to unit sum.
inline SdvGrid compute_sdv(std::span<const Vec3> points, const GridConfig& cfg) {
  cfg.validate();
  const int c = cfg.voxels;
  const double w = cfg.voxel_edge();
  const double h = cfg.kernel;
  const double cutoff = 3 * h;
  const double norm = 1.0 / (std::sqrt(2 * std::numbers::pi) * h);
  const double inv_two_h2 = 1.0 / (2 * h * h);

  SdvGrid grid(c);
  std::vector<double> sums(grid.values.size(), 0.0);
  std::vector<std::uint32_t> counts(grid.values.size(), 0);

  // Voxel index range whose centroid may lie within the cutoff of coordinate x.
  auto range = [&](double x, int& lo, int& hi) {
    lo = std::max(0, static_cast<int>(std::floor((x - cutoff + cfg.width / 2) / w - 0.5)));
    hi = std::min(c - 1, static_cast<int>(std::ceil((x + cutoff + cfg.width / 2) / w - 0.5)));
  };

  for (const auto& p : points) {
    int j0, j1, k0, k1, l0, l1;
    range(p.x(), j0, j1);
    range(p.y(), k0, k1);
    range(p.z(), l0, l1);
    for (int l = l0; l <= l1; ++l) {
      const double dz = cfg.centroid(l) - p.z();
      for (int k = k0; k <= k1; ++k) {
        const double dy = cfg.centroid(k) - p.y();
        for (int j = j0; j <= j1; ++j) {
          const double dx = cfg.centroid(j) - p.x();
          const double d2 = dx * dx + dy * dy + dz * dz;
          if (std::sqrt(d2) < cutoff) {
            const auto idx = grid.index(j, k, l);
            sums[idx] += norm * std::exp(-d2 * inv_two_h2);
            ++counts[idx];
          }
        }
      }
    }
  }

  double total = 0.0;
  for (std::size_t i = 0; i < sums.size(); ++i) {
    if (counts[i] == 0) continue;
    grid.values[i] = cfg.occupancy ? 1.0 : sums[i] / counts[i];
    total += grid.values[i];
  }
  if (total > 0.0) {
    for (double& v : grid.values) v /= total;
  }
  return grid;
}

/// Full patch pipeline for one keypoint: LRF from the r_LRF support, crop to
/// the grid's circumscribed sphere, canonicalize and voxelize.
inline SdvGrid extract_patch(const PointCloud& cloud, const KdTree& index, const Vec3& keypoint, double lrf_radius,
                             const GridConfig& cfg) {
  const Lrf lrf = estimate_lrf(cloud, index, keypoint, lrf_radius);
  const auto ids = index.radius_query(keypoint, cfg.support_radius());
  std::vector<Vec3> support;
  support.reserve(ids.size());
  for (auto i : ids) support.push_back(cloud[i]);
  return compute_sdv(canonicalize(support, lrf), cfg);
}

inline SdvGrid extract_patch(const PointCloud& cloud, const KdTree& index, std::size_t keypoint_index,
                             const RunConfig& cfg) {
  return extract_patch(cloud, index, cloud.at(keypoint_index), cfg.lrf_radius, GridConfig::from(cfg));
}

}  // namespace smoothnet
