#include <gtest/gtest.h>

#include <random>
#include <set>

#include "smoothnet/match.hpp"
#include "test_util.hpp"

using namespace smoothnet;
using smoothnet::testing::random_transform;

namespace {

io::DescriptorSet random_descriptors(std::mt19937_64& rng, std::size_t n, std::size_t dim) {
  std::normal_distribution<float> g;
  io::DescriptorSet d(dim);
  d.values.resize(n * dim);
  for (auto& v : d.values) v = g(rng);
  return d;
}

std::set<std::pair<std::size_t, std::size_t>> brute_mutual(const io::DescriptorSet& p, const io::DescriptorSet& q) {
  auto dist = [&](std::size_t i, std::size_t j) {
    double s = 0;
    for (std::size_t d = 0; d < p.dim; ++d) {
      const double diff = double(p.row(i)[d]) - double(q.row(j)[d]);
      s += diff * diff;
    }
    return s;
  };
  std::set<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < p.count(); ++i) {
    std::size_t bj = 0;
    for (std::size_t j = 1; j < q.count(); ++j) {
      if (dist(i, j) < dist(i, bj)) bj = j;
    }
    std::size_t bi = 0;
    for (std::size_t k = 1; k < p.count(); ++k) {
      if (dist(k, bj) < dist(bi, bj)) bi = k;
    }
    if (bi == i) out.emplace(i, bj);
  }
  return out;
}

std::vector<Vec3> random_points(std::mt19937_64& rng, std::size_t n, double half) {
  std::uniform_real_distribution<double> u(-half, half);
  std::vector<Vec3> out(n);
  for (auto& p : out) p = Vec3(u(rng), u(rng), u(rng));
  return out;
}

}  // namespace

// --- mutual nearest neighbours -------------------------------------------------

TEST(Mutual, IdenticalSetsPairIdentically) {
  std::mt19937_64 rng(1);
  const auto d = random_descriptors(rng, 50, 16);
  const auto c = mutual_correspondences(d, d);
  ASSERT_EQ(c.size(), 50u);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(c[i].p, i);
    EXPECT_EQ(c[i].q, i);
    EXPECT_EQ(c[i].distance, 0.0);
  }
}

TEST(Mutual, SingleDescriptorAtMostOnePair) {
  std::mt19937_64 rng(2);
  const auto p = random_descriptors(rng, 1, 8), q = random_descriptors(rng, 3, 8);
  EXPECT_LE(mutual_correspondences(p, q).size(), 1u);
}

TEST(Mutual, MatchesBruteForce) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_descriptors(rng, 200, 8), q = random_descriptors(rng, 200, 8);
    const auto c = mutual_correspondences(p, q);
    std::set<std::pair<std::size_t, std::size_t>> got;
    for (const auto& x : c) got.emplace(x.p, x.q);
    EXPECT_EQ(got.size(), c.size());
    EXPECT_EQ(got, brute_mutual(p, q));
  }
}

TEST(Mutual, SymmetricUnderSwap) {
  std::mt19937_64 rng(4);
  const auto p = random_descriptors(rng, 80, 4), q = random_descriptors(rng, 120, 4);
  std::set<std::pair<std::size_t, std::size_t>> a, b;
  for (const auto& x : mutual_correspondences(p, q)) a.emplace(x.p, x.q);
  for (const auto& x : mutual_correspondences(q, p)) b.emplace(x.q, x.p);
  EXPECT_EQ(a, b);
}

TEST(Mutual, TiesToSmallestIndex) {
  io::DescriptorSet p(1), q(1);
  p.push_back(std::vector<float>{0});
  q.push_back(std::vector<float>{1});
  q.push_back(std::vector<float>{-1});
  const auto c = mutual_correspondences(p, q);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].q, 0u);
}

TEST(Mutual, DimMismatch) {
  EXPECT_THROW(mutual_correspondences(io::DescriptorSet(3), io::DescriptorSet(4)), Error);
}

// --- rigid estimation ------------------------------------------------------

TEST(Rigid, IdentityWhenSetsCoincide) {
  std::mt19937_64 rng(5);
  const auto pts = random_points(rng, 10, 1.0);
  const auto t = estimate_rigid(pts, pts);
  EXPECT_LT((t.rotation - Mat3::Identity()).norm(), 1e-12);
  EXPECT_LT(t.translation.norm(), 1e-12);
}

TEST(Rigid, RecoversKnownMotion) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const auto src = random_points(rng, 3 + trial, 1.0);
    const auto gt = random_transform(rng, 5.0);
    std::vector<Vec3> dst;
    for (const auto& p : src) dst.push_back(gt(p));
    const auto t = estimate_rigid(src, dst);
    EXPECT_LT((t.rotation - gt.rotation).norm(), 1e-10);
    EXPECT_LT((t.translation - gt.translation).norm(), 1e-10);
    EXPECT_TRUE(t.is_valid());
  }
}

TEST(Rigid, ReflectionIsFolded) {
  // Mirror images: best proper rotation, never a reflection.
  std::mt19937_64 rng(7);
  const auto src = random_points(rng, 20, 1.0);
  std::vector<Vec3> dst;
  for (const auto& p : src) dst.emplace_back(p.x(), p.y(), -p.z());
  const auto t = estimate_rigid(src, dst);
  EXPECT_NEAR(t.rotation.determinant(), 1.0, 1e-12);
}

TEST(Rigid, CovariantUnderMotionOfTarget) {
  std::mt19937_64 rng(8);
  const auto src = random_points(rng, 15, 1.0);
  auto dst = src;
  std::normal_distribution<double> n(0, 0.01);
  for (auto& p : dst) p += Vec3(n(rng), n(rng), n(rng));
  const auto g = random_transform(rng, 2.0);
  std::vector<Vec3> moved;
  for (const auto& p : dst) moved.push_back(g(p));
  const auto t = estimate_rigid(src, dst), u = estimate_rigid(src, moved);
  const auto expect = compose(g, t);
  EXPECT_LT((u.rotation - expect.rotation).norm(), 1e-10);
  EXPECT_LT((u.translation - expect.translation).norm(), 1e-10);
}

TEST(Rigid, DegenerateSamples) {
  const std::vector<Vec3> line{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0)};
  try {
    estimate_rigid(line, line);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateConfiguration);
  }
  const std::vector<Vec3> two{Vec3(0, 0, 0), Vec3(1, 0, 0)};
  EXPECT_THROW(estimate_rigid(two, two), Error);
}

// --- RANSAC ------------------------------------------------------------------

TEST(RansacIterations, KnownValues) {
  EXPECT_EQ(ransac_iterations(0.05, 3, 0.999), 55258);
  EXPECT_EQ(ransac_iterations(0.2, 3, 0.999), 860);
  EXPECT_EQ(ransac_iterations(1.0 - 1e-12, 1, 0.5), 1);
}

TEST(RansacIterations, Monotone) {
  long long prev = std::numeric_limits<long long>::max();
  for (double r = 0.05; r < 0.95; r += 0.05) {
    const auto k = ransac_iterations(r, 3, 0.99);
    EXPECT_LE(k, prev);
    prev = k;
    EXPECT_LE(ransac_iterations(r, 3, 0.99), ransac_iterations(r, 4, 0.99));
    EXPECT_LE(ransac_iterations(r, 3, 0.9), ransac_iterations(r, 3, 0.999));
  }
}

TEST(RansacIterations, DomainErrors) {
  EXPECT_THROW(ransac_iterations(0.0, 3, 0.9), Error);
  EXPECT_THROW(ransac_iterations(1.0, 3, 0.9), Error);
  EXPECT_THROW(ransac_iterations(0.5, 0, 0.9), Error);
  EXPECT_THROW(ransac_iterations(0.5, 3, 1.0), Error);
}

TEST(Ransac, ExactCorrespondencesRecovered) {
  std::mt19937_64 rng(9);
  const auto q = random_points(rng, 50, 1.0);
  const auto gt = random_transform(rng, 1.0);
  std::vector<Vec3> p;
  CorrespondenceSet corrs;
  for (std::size_t i = 0; i < q.size(); ++i) {
    p.push_back(gt(q[i]));
    corrs.push_back({i, i, 0.0});
  }
  const auto r = ransac_register(p, q, corrs, {});
  EXPECT_EQ(r.inliers.size(), corrs.size());
  EXPECT_LT((r.transform.rotation - gt.rotation).norm(), 1e-9);
  EXPECT_LT((r.transform.translation - gt.translation).norm(), 1e-9);
  EXPECT_EQ(r.iterations, 1);  // all-inlier sample ends the search
}

TEST(Ransac, OutliersRejected) {
  std::mt19937_64 rng(10);
  int good = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = random_points(rng, 200, 1.0);
    const auto gt = random_transform(rng, 1.0);
    std::vector<Vec3> p;
    CorrespondenceSet corrs;
    std::uniform_real_distribution<double> u(-2, 2);
    for (std::size_t i = 0; i < q.size(); ++i) {
      p.push_back(i < 140 ? gt(q[i]) : Vec3(u(rng), u(rng), u(rng)));
      corrs.push_back({i, i, 0.0});
    }
    RansacParams params;
    params.seed = static_cast<std::uint64_t>(trial);
    const auto r = ransac_register(p, q, corrs, params);
    EXPECT_TRUE(r.transform.is_valid());
    const double angle = rotation_angle_between(r.transform.rotation, gt.rotation) * 180 / std::numbers::pi;
    good += angle < 0.5 && (r.transform.translation - gt.translation).norm() < 0.01;
  }
  EXPECT_EQ(good, 20);
}

TEST(Ransac, DeterministicGivenSeed) {
  std::mt19937_64 rng(11);
  const auto q = random_points(rng, 60, 1.0);
  std::vector<Vec3> p = random_points(rng, 60, 1.0);
  const auto gt = random_transform(rng, 1.0);
  for (std::size_t i = 0; i < 20; ++i) p[i] = gt(q[i]);
  CorrespondenceSet corrs;
  for (std::size_t i = 0; i < q.size(); ++i) corrs.push_back({i, i, 0.0});
  RansacParams params;
  params.max_iterations = 300;
  params.seed = 4;
  const auto a = ransac_register(p, q, corrs, params), b = ransac_register(p, q, corrs, params);
  EXPECT_EQ(a.inliers, b.inliers);
  EXPECT_EQ(a.transform.rotation, b.transform.rotation);
  EXPECT_EQ(a.iterations, b.iterations);
}

TEST(Ransac, Errors) {
  std::vector<Vec3> p{Vec3(0, 0, 0), Vec3(1, 0, 0)};
  CorrespondenceSet two{{0, 0, 0}, {1, 1, 0}};
  try {
    ransac_register(p, p, two, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooFewCorrespondences);
  }
  // Every sample is collinear: nothing ever reaches 3 inliers.
  std::vector<Vec3> line{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0), Vec3(3, 0, 0)};
  CorrespondenceSet four{{0, 0, 0}, {1, 1, 0}, {2, 2, 0}, {3, 3, 0}};
  RansacParams params;
  params.max_iterations = 50;
  try {
    ransac_register(line, line, four, params);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoModelFound);
  }
}

// --- overlap -----------------------------------------------------------------

TEST(Overlap, IdenticalAndSeparated) {
  std::mt19937_64 rng(12);
  const PointCloud c(random_points(rng, 300, 1.0));
  EXPECT_EQ(overlap(c, c, RigidTransform::identity(), 1e-6), 1.0);
  RigidTransform far;
  far.translation = Vec3(100, 0, 0);
  EXPECT_EQ(overlap(c, c, far, 0.06), 0.0);
}

TEST(Overlap, HalfShiftedLattice) {
  std::vector<Vec3> a, b;
  for (int i = 0; i < 10; ++i) {
    for (int j = 0; j < 10; ++j) {
      a.emplace_back(0.1 * i, 0.1 * j, 0);
      b.emplace_back(0.1 * i + 0.5, 0.1 * j, 0);
    }
  }
  const PointCloud pa(a), pb(b);
  const double psi = overlap(pa, pb, RigidTransform::identity(), 0.06);
  std::size_t brute = 0;
  for (const auto& p : a) {
    double best = 1e300;
    for (const auto& q : b) best = std::min(best, (p - q).norm());
    brute += best < 0.06;
  }
  EXPECT_DOUBLE_EQ(psi, static_cast<double>(brute) / 100.0);
  EXPECT_DOUBLE_EQ(psi, 0.5);
}

TEST(Overlap, MonotoneInThreshold) {
  std::mt19937_64 rng(13);
  const PointCloud a(random_points(rng, 200, 1.0)), b(random_points(rng, 200, 1.0));
  double prev = 0;
  for (double tau = 0.01; tau < 1.0; tau += 0.05) {
    const double v = overlap(a, b, RigidTransform::identity(), tau);
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(Overlap, Errors) {
  const PointCloud a({Vec3::Zero()});
  EXPECT_THROW(overlap(a, PointCloud{}, RigidTransform::identity(), 0.1), Error);
  EXPECT_THROW(overlap(a, a, RigidTransform::identity(), 0.0), Error);
}
