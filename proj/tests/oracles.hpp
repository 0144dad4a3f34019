#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "smoothnet/net.hpp"
#include "smoothnet/sdv.hpp"

namespace smoothnet::testing {

// Straight transcription of the density formula: every voxel against every point.
inline SdvGrid naive_sdv(const std::vector<Vec3>& pts, const GridConfig& cfg) {
  const int c = cfg.voxels;
  SdvGrid g(c);
  double total = 0;
  for (int l = 0; l < c; ++l) {
    for (int k = 0; k < c; ++k) {
      for (int j = 0; j < c; ++j) {
        const Vec3 centroid(cfg.centroid(j), cfg.centroid(k), cfg.centroid(l));
        double s = 0;
        int n = 0;
        for (const auto& p : pts) {
          const double d = (centroid - p).norm();
          if (d < 3 * cfg.kernel) {
            s += 1.0 / (std::sqrt(2 * std::numbers::pi) * cfg.kernel) * std::exp(-d * d / (2 * cfg.kernel * cfg.kernel));
            ++n;
          }
        }
        const double v = n == 0 ? 0.0 : (cfg.occupancy ? 1.0 : s / n);
        g.values[g.index(j, k, l)] = v;
        total += v;
      }
    }
  }
  if (total > 0) {
    for (auto& v : g.values) v /= total;
  }
  return g;
}

// O(n^2) transcription of the batch-hard soft-margin loss.
inline double brute_loss(const net::RowMatrix& a, const net::RowMatrix& p, std::vector<std::size_t>* hardest) {
  const auto n = a.rows();
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = 1e300;
    Eigen::Index arg = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = (a.row(i) - p.row(j)).norm();
      if (d < best) best = d, arg = j;
    }
    if (hardest) hardest->push_back(static_cast<std::size_t>(arg));
    total += std::log(1 + std::exp((a.row(i) - p.row(i)).norm() - best));
  }
  return total / static_cast<double>(n);
}

}  // namespace smoothnet::testing
