#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "smoothnet/core.hpp"
#include "smoothnet/io.hpp"
#include "smoothnet/spatial_index.hpp"

namespace smoothnet {

struct Correspondence {
  std::size_t p = 0;  // row in the P descriptor / keypoint set
  std::size_t q = 0;  // row in the Q descriptor / keypoint set
  double distance = 0.0;  // feature-space l2 distance

  friend bool operator==(const Correspondence&, const Correspondence&) = default;
};

using CorrespondenceSet = std::vector<Correspondence>;

namespace match_detail {

inline double feature_distance2(std::span<const float> a, std::span<const float> b) {
  double s = 0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    const double diff = static_cast<double>(a[d]) - static_cast<double>(b[d]);
    s += diff * diff;
  }
  return s;
}

// Exact nearest neighbour in `to` for every row of `from`; ties to the smallest index.
inline std::vector<std::size_t> nearest_rows(const io::DescriptorSet& from, const io::DescriptorSet& to,
                                             std::vector<double>* best_d2 = nullptr) {
  std::vector<std::size_t> nn(from.count());
  if (best_d2) best_d2->assign(from.count(), 0.0);
  for (std::size_t i = 0; i < from.count(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < to.count(); ++j) {
      const double d2 = feature_distance2(from.row(i), to.row(j));
      if (d2 < best) {
        best = d2;
        arg = j;
      }
    }
    nn[i] = arg;
    if (best_d2) (*best_d2)[i] = best;
  }
  return nn;
}

}  // namespace match_detail

/// Pairs (i, j) where j is the feature-space nearest neighbour of i in Q and
/// i is the nearest neighbour of j in P. Sorted by i.
inline CorrespondenceSet mutual_correspondences(const io::DescriptorSet& desc_p, const io::DescriptorSet& desc_q) {
  if (desc_p.dim != desc_q.dim) {
    fail(ErrorCode::DimMismatch, "descriptor dims " + std::to_string(desc_p.dim) + " and " + std::to_string(desc_q.dim));
  }
  CorrespondenceSet out;
  if (desc_p.count() == 0 || desc_q.count() == 0) return out;
  std::vector<double> d2;
  const auto p_to_q = match_detail::nearest_rows(desc_p, desc_q, &d2);
  const auto q_to_p = match_detail::nearest_rows(desc_q, desc_p);
  for (std::size_t i = 0; i < p_to_q.size(); ++i) {
    if (q_to_p[p_to_q[i]] == i) out.push_back({i, p_to_q[i], std::sqrt(d2[i])});
  }
  return out;
}

/// Least-squares rigid motion taking src onto dst (SVD-based Procrustes with
/// the reflection case folded back into SO(3)).
inline RigidTransform estimate_rigid(std::span<const Vec3> src, std::span<const Vec3> dst) {
  if (src.size() != dst.size()) fail(ErrorCode::DimMismatch, "point set sizes differ");
  if (src.size() < 3) fail(ErrorCode::DegenerateConfiguration, "need at least 3 point pairs");
  Vec3 src_mean = Vec3::Zero(), dst_mean = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    src_mean += src[i];
    dst_mean += dst[i];
  }
  src_mean /= static_cast<double>(src.size());
  dst_mean /= static_cast<double>(src.size());
  Mat3 h = Mat3::Zero(), src_spread = Mat3::Zero(), dst_spread = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Vec3 a = src[i] - src_mean;
    const Vec3 b = dst[i] - dst_mean;
    h.noalias() += a * b.transpose();
    src_spread.noalias() += a * a.transpose();
    dst_spread.noalias() += b * b.transpose();
  }
  // Collinear or coincident samples leave a rotation about the line free.
  for (const Mat3* spread : {&src_spread, &dst_spread}) {
    Eigen::SelfAdjointEigenSolver<Mat3> eig(*spread, Eigen::EigenvaluesOnly);
    const Vec3 ev = eig.eigenvalues();
    if (!(ev[2] > 0.0) || ev[1] <= 1e-12 * ev[2]) {
      fail(ErrorCode::DegenerateConfiguration, "points are collinear or coincident");
    }
  }
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  Mat3 fix = Mat3::Identity();
  fix(2, 2) = (v * u.transpose()).determinant() < 0 ? -1.0 : 1.0;
  RigidTransform t;
  t.rotation = v * fix * u.transpose();
  t.translation = dst_mean - t.rotation * src_mean;
  return t;
}

struct RansacParams {
  int max_iterations = 55000;
  double inlier_distance = 0.1;
  int sample_size = 3;
  double confidence = 0.999;
  std::uint64_t seed = 0;
};

struct RansacResult {
  RigidTransform transform;              // maps Q keypoints onto P keypoints
  std::vector<std::size_t> inliers;      // indices into the correspondence set
  int iterations = 0;
};

/// Iterations needed to draw an all-inlier sample of size n with probability p
/// when a fraction `inlier_ratio` of correspondences are inliers:
/// floor(log(1 - p) / log(1 - ratio^n)), at least 1.
inline long long ransac_iterations(double inlier_ratio, int n, double p) {
  if (!(inlier_ratio > 0.0 && inlier_ratio < 1.0)) fail(ErrorCode::DomainError, "inlier ratio must be in (0, 1)");
  if (n < 1) fail(ErrorCode::DomainError, "sample size must be >= 1");
  if (!(p > 0.0 && p < 1.0)) fail(ErrorCode::DomainError, "success probability must be in (0, 1)");
  const double k = std::log1p(-p) / std::log1p(-std::pow(inlier_ratio, n));
  if (!std::isfinite(k)) return std::numeric_limits<long long>::max();
  return std::max<long long>(1, static_cast<long long>(std::floor(k)));
}

/// RANSAC over correspondences (p in kp_p, q in kp_q). Hypotheses come from
/// minimal samples; the best by inlier count (then lower RMSE) is refit on its
/// inliers. The iteration budget shrinks with the best inlier ratio so far.
inline RansacResult ransac_register(std::span<const Vec3> kp_p, std::span<const Vec3> kp_q, const CorrespondenceSet& corrs,
                                    const RansacParams& params) {
  if (params.sample_size < 3) fail(ErrorCode::DomainError, "sample size must be >= 3");
  if (!(params.confidence > 0 && params.confidence < 1)) fail(ErrorCode::DomainError, "confidence must be in (0, 1)");
  const std::size_t n = corrs.size();
  if (n < static_cast<std::size_t>(params.sample_size)) {
    fail(ErrorCode::TooFewCorrespondences, std::to_string(n) + " correspondences, need at least " +
                                               std::to_string(params.sample_size));
  }
  for (const auto& c : corrs) {
    if (c.p >= kp_p.size() || c.q >= kp_q.size()) fail(ErrorCode::DimMismatch, "correspondence index out of range");
  }

  auto score = [&](const RigidTransform& t, std::vector<std::size_t>& inliers) {
    inliers.clear();
    double sq = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = (t(kp_q[corrs[i].q]) - kp_p[corrs[i].p]).norm();
      if (d < params.inlier_distance) {
        inliers.push_back(i);
        sq += d * d;
      }
    }
    return inliers.empty() ? std::numeric_limits<double>::infinity() : std::sqrt(sq / static_cast<double>(inliers.size()));
  };

  std::mt19937_64 rng(params.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  const auto sample_size = static_cast<std::size_t>(params.sample_size);
  std::vector<std::size_t> sample;
  std::vector<Vec3> src, dst;
  std::vector<std::size_t> inliers, best_inliers;
  RigidTransform best;
  double best_rmse = std::numeric_limits<double>::infinity();
  long long budget = params.max_iterations;
  int it = 0;
  for (; it < budget; ++it) {
    sample.clear();
    while (sample.size() < sample_size) {
      const auto s = pick(rng);
      if (std::find(sample.begin(), sample.end(), s) == sample.end()) sample.push_back(s);
    }
    src.clear();
    dst.clear();
    for (auto s : sample) {
      src.push_back(kp_q[corrs[s].q]);
      dst.push_back(kp_p[corrs[s].p]);
    }
    RigidTransform hypothesis;
    try {
      hypothesis = estimate_rigid(src, dst);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DegenerateConfiguration) throw;
      continue;
    }
    const double rmse = score(hypothesis, inliers);
    if (inliers.size() > best_inliers.size() || (inliers.size() == best_inliers.size() && rmse < best_rmse)) {
      best = hypothesis;
      best_rmse = rmse;
      best_inliers = inliers;
      const double ratio = static_cast<double>(best_inliers.size()) / static_cast<double>(n);
      long long k = params.max_iterations;
      if (ratio >= 1.0) {
        k = 1;
      } else if (ratio > 0.0) {
        k = ransac_iterations(ratio, params.sample_size, params.confidence);
      }
      budget = std::min<long long>(params.max_iterations, k);
    }
  }
  if (best_inliers.size() < sample_size) {
    fail(ErrorCode::NoModelFound, "no hypothesis reached " + std::to_string(sample_size) + " inliers");
  }

  src.clear();
  dst.clear();
  for (auto i : best_inliers) {
    src.push_back(kp_q[corrs[i].q]);
    dst.push_back(kp_p[corrs[i].p]);
  }
  RansacResult result;
  result.iterations = it;
  try {
    result.transform = estimate_rigid(src, dst);
    score(result.transform, result.inliers);
    if (result.inliers.size() < sample_size) {
      result.transform = best;
      result.inliers = best_inliers;
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DegenerateConfiguration) throw;
    result.transform = best;
    result.inliers = best_inliers;
  }
  return result;
}

/// Fraction of points of P that have a point of T(Q) closer than tau.
inline double overlap(const PointCloud& cloud_p, const PointCloud& cloud_q, const RigidTransform& t, double tau) {
  if (cloud_p.empty() || cloud_q.empty()) fail(ErrorCode::EmptyCloud, "overlap needs two non-empty clouds");
  if (!(tau > 0)) fail(ErrorCode::DomainError, "overlap threshold must be > 0");
  const KdTree tree(apply_transform(cloud_q, t));
  std::size_t hits = 0;
  for (const auto& p : cloud_p) {
    if (tree.nearest(p)->distance < tau) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(cloud_p.size());
}

}  // namespace smoothnet
