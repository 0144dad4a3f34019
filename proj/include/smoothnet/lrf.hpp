#pragma once

#include <span>
#include <vector>

#include "smoothnet/core.hpp"
#include "smoothnet/spatial_index.hpp"

namespace smoothnet {

/// Local reference frame anchored at an interest point. y = x cross z, as
/// the frame is defined; the axes are orthonormal.
struct Lrf {
  Vec3 origin = Vec3::Zero();
  Vec3 x_axis = Vec3::UnitX();
  Vec3 y_axis = Vec3::UnitY();
  Vec3 z_axis = Vec3::UnitZ();

  /// Rows are the axes, so rotation() * (p - origin) gives canonical coordinates.
  Mat3 rotation() const {
    Mat3 r;
    r.row(0) = x_axis.transpose();
    r.row(1) = y_axis.transpose();
    r.row(2) = z_axis.transpose();
    return r;
  }
};

namespace lrf_detail {

inline constexpr std::size_t kMinSupport = 4;
inline constexpr double kEigenTieTolerance = 1e-8;
inline constexpr double kMinAxisNorm = 1e-12;

}  // namespace lrf_detail

/// (1/|S|) sum (p_i - p)(p_i - p)^T, centred on the interest point.
inline Mat3 support_covariance(std::span<const Vec3> support, const Vec3& p) {
  Mat3 cov = Mat3::Zero();
  for (const auto& q : support) {
    const Vec3 d = q - p;
    cov.noalias() += d * d.transpose();
  }
  if (!support.empty()) cov /= static_cast<double>(support.size());
  return cov;
}

/// Normal of the support (eigenvector of the smallest eigenvalue of the
/// covariance about p), oriented so that sum <n, p - p_i> >= 0.
inline Vec3 oriented_normal(std::span<const Vec3> support, const Vec3& p) {
  if (support.size() < lrf_detail::kMinSupport) {
    fail(ErrorCode::DegenerateSupport, "support has " + std::to_string(support.size()) + " points, need 4");
  }
  const Mat3 cov = support_covariance(support, p);
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  if (eig.info() != Eigen::Success) fail(ErrorCode::DegenerateSupport, "eigendecomposition failed");
  const Vec3 values = eig.eigenvalues();  // ascending
  const double largest = values[2];
  if (!(largest > 0.0) || values[1] - values[0] < lrf_detail::kEigenTieTolerance * largest) {
    fail(ErrorCode::DegenerateSupport, "smallest covariance eigenvalue is not simple");
  }
  Vec3 normal = eig.eigenvectors().col(0).normalized();
  double side = 0.0;
  for (const auto& q : support) side += normal.dot(p - q);
  return side >= 0.0 ? normal : Vec3(-normal);
}

/// Frame from an explicit support set. The support normally contains every
/// cloud point within `radius` of `p`, and `radius` enters the x-axis weights.
inline Lrf estimate_lrf_from_support(std::span<const Vec3> support, const Vec3& p, double radius) {
  const Vec3 z = oriented_normal(support, p);
  Vec3 acc = Vec3::Zero();
  for (const auto& q : support) {
    const Vec3 d = q - p;
    const double height = d.dot(z);
    const double alpha = (radius - d.norm()) * (radius - d.norm());
    const double beta = height * height;
    acc += alpha * beta * (d - height * z);
  }
  const double norm = acc.norm();
  if (!(norm >= lrf_detail::kMinAxisNorm)) fail(ErrorCode::DegenerateSupport, "x-axis accumulator vanishes");
  Lrf lrf;
  lrf.origin = p;
  lrf.z_axis = z;
  lrf.x_axis = acc / norm;
  // Remove the rounding-level component along z so the frame is orthonormal to 1e-15.
  lrf.x_axis = (lrf.x_axis - lrf.x_axis.dot(z) * z).normalized();
  lrf.y_axis = lrf.x_axis.cross(lrf.z_axis);
  return lrf;
}

/// Frame of interest point `p` from its spherical support of radius
/// `lrf_radius` in `cloud`. Throws DegenerateSupport when the frame is not
/// uniquely defined.
inline Lrf estimate_lrf(const PointCloud& cloud, const KdTree& index, const Vec3& p, double lrf_radius) {
  const auto ids = index.radius_query(p, lrf_radius);
  std::vector<Vec3> support;
  support.reserve(ids.size());
  for (auto i : ids) support.push_back(cloud[i]);
  return estimate_lrf_from_support(support, p, lrf_radius);
}

}  // namespace smoothnet
