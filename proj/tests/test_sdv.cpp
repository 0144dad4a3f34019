#include <gtest/gtest.h>

#include <numbers>
#include <random>
#include <sstream>

#include "smoothnet/sdv.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace smoothnet;
using smoothnet::testing::naive_sdv;

namespace {

std::vector<Vec3> random_patch(std::mt19937_64& rng, std::size_t n, double half) {
  std::uniform_real_distribution<double> u(-half, half);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = Vec3(u(rng), u(rng), 0.3 * u(rng));
  return pts;
}

}  // namespace

TEST(Canonicalize, OriginAndIdentity) {
  Lrf f;
  f.origin = Vec3(1, 2, 3);
  const std::vector<Vec3> pts{Vec3(1, 2, 3)};
  EXPECT_EQ(canonicalize(pts, f)[0], Vec3::Zero());
  const std::vector<Vec3> other{Vec3(0.5, -1, 2)};
  EXPECT_EQ(canonicalize(other, Lrf{})[0], other[0]);
}

TEST(Canonicalize, PreservesDistances) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto t = smoothnet::testing::random_transform(rng, 1.0);
    Lrf f;
    f.origin = t.translation;
    f.x_axis = t.rotation.col(0);
    f.y_axis = t.rotation.col(1);
    f.z_axis = t.rotation.col(2);
    const auto pts = random_patch(rng, 30, 1.0);
    const auto c = canonicalize(pts, f);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      for (std::size_t j = 0; j < pts.size(); ++j) EXPECT_NEAR((pts[i] - pts[j]).norm(), (c[i] - c[j]).norm(), 1e-12);
    }
  }
}

TEST(Sdv, EmptyInputGivesZeroGrid) {
  const auto g = compute_sdv(std::vector<Vec3>{}, GridConfig{});
  EXPECT_TRUE(g.is_zero());
  EXPECT_EQ(g.values.size(), 16u * 16u * 16u);
}

TEST(Sdv, SinglePointAtCentroid) {
  const GridConfig cfg;
  const Vec3 p(cfg.centroid(7), cfg.centroid(8), cfg.centroid(9));
  const auto g = compute_sdv(std::vector<Vec3>{p}, cfg);
  // Closed form: each voxel within 3h holds the kernel at its centroid distance.
  double total = 0;
  std::vector<double> raw(g.values.size(), 0.0);
  const double h = cfg.kernel;
  for (int l = 0; l < 16; ++l) {
    for (int k = 0; k < 16; ++k) {
      for (int j = 0; j < 16; ++j) {
        const double w = cfg.voxel_edge();
        const double d = w * std::sqrt((j - 7.0) * (j - 7.0) + (k - 8.0) * (k - 8.0) + (l - 9.0) * (l - 9.0));
        if (d < 3 * h) {
          raw[g.index(j, k, l)] = std::exp(-d * d / (2 * h * h)) / (std::sqrt(2 * std::numbers::pi) * h);
          total += raw[g.index(j, k, l)];
        }
      }
    }
  }
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_NEAR(g.values[i], raw[i] / total, 1e-14);
  EXPECT_NEAR(g.sum(), 1.0, 1e-12);
  // h = 0.875 w, so 3h = 2.625 w: centroid offsets up to (2,1,0) are inside, (2,2,0) is not.
  EXPECT_GT(g(9, 9, 9), 0.0);
  EXPECT_EQ(g(9, 10, 9), 0.0);
  // The peak sits on the point's own voxel.
  EXPECT_EQ(std::max_element(g.values.begin(), g.values.end()) - g.values.begin(),
            static_cast<std::ptrdiff_t>(g.index(7, 8, 9)));
}

TEST(Sdv, MatchesNaiveOracle) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> un(0, 400);
  for (int trial = 0; trial < 30; ++trial) {
    GridConfig cfg;
    if (trial % 3 == 1) cfg = {0.3, 8, 0.02, false};
    if (trial % 3 == 2) cfg.occupancy = true;
    const auto pts = random_patch(rng, static_cast<std::size_t>(un(rng)), 0.2);
    const auto fast = compute_sdv(pts, cfg);
    const auto slow = naive_sdv(pts, cfg);
    for (std::size_t i = 0; i < fast.values.size(); ++i) ASSERT_NEAR(fast.values[i], slow.values[i], 1e-12);
  }
}

TEST(Sdv, UnitSumOrZero) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto pts = random_patch(rng, 1 + rng() % 300, 0.3);
    const auto g = compute_sdv(pts, GridConfig{});
    if (!g.is_zero()) {
      EXPECT_NEAR(g.sum(), 1.0, 1e-9);
    }
    for (double v : g.values) EXPECT_GE(v, 0.0);
  }
  // A point far outside the grid reaches no centroid.
  EXPECT_TRUE(compute_sdv(std::vector<Vec3>{Vec3(1, 1, 1)}, GridConfig{}).is_zero());
}

TEST(Sdv, DuplicationInvariant) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto pts = random_patch(rng, 200, 0.15);
    const auto once = compute_sdv(pts, GridConfig{});
    const auto copy = pts;
    pts.insert(pts.end(), copy.begin(), copy.end());
    const auto twice = compute_sdv(pts, GridConfig{});
    for (std::size_t i = 0; i < once.values.size(); ++i) EXPECT_NEAR(once.values[i], twice.values[i], 1e-15);
  }
}

TEST(Sdv, SmoothingReducesSparsity) {
  // Zero-radius occupancy: a voxel is set only if it contains a point.
  std::mt19937_64 rng(5);
  const GridConfig cfg;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Vec3> pts;
    std::uniform_real_distribution<double> u(-0.15, 0.15);
    for (int i = 0; i < 300; ++i) {
      const double x = u(rng), y = u(rng);
      pts.emplace_back(x, y, 0.1 * std::sin(8 * x) * std::cos(5 * y));
    }
    std::vector<bool> occupied(cfg.cells(), false);
    const SdvGrid probe(cfg.voxels);
    for (const auto& p : pts) {
      auto idx = [&](double v) { return std::clamp(static_cast<int>(std::floor((v + 0.15) / cfg.voxel_edge())), 0, 15); };
      occupied[probe.index(idx(p.x()), idx(p.y()), idx(p.z()))] = true;
    }
    const auto g = compute_sdv(pts, cfg);
    const auto zeros_sdv = std::count(g.values.begin(), g.values.end(), 0.0);
    const auto zeros_occ = std::count(occupied.begin(), occupied.end(), false);
    EXPECT_LT(zeros_sdv, zeros_occ);
  }
}

TEST(Sdv, GridConfigValidation) {
  EXPECT_THROW(compute_sdv({}, GridConfig{0.3, 1, 0.01, false}), Error);
  EXPECT_THROW(compute_sdv({}, GridConfig{0.3, 16, 0.2, false}), Error);
  EXPECT_THROW(compute_sdv({}, GridConfig{-1, 16, 0.01, false}), Error);
  const GridConfig cfg;
  EXPECT_DOUBLE_EQ(cfg.centroid(0), -0.15 + 0.3 / 32);
  EXPECT_DOUBLE_EQ(cfg.centroid(15), 0.15 - 0.3 / 32);
  EXPECT_DOUBLE_EQ(cfg.support_radius(), std::sqrt(3.0) / 2 * 0.3);
}

TEST(Sdv, LayoutIsXFastest) {
  const SdvGrid g(4);
  EXPECT_EQ(g.index(1, 0, 0), 1u);
  EXPECT_EQ(g.index(0, 1, 0), 4u);
  EXPECT_EQ(g.index(0, 0, 1), 16u);
  // A point at the +x end lands in high j.
  const GridConfig cfg{0.4, 4, 0.03, false};
  const auto s = compute_sdv(std::vector<Vec3>{Vec3(cfg.centroid(3), cfg.centroid(0), cfg.centroid(0))}, cfg);
  EXPECT_DOUBLE_EQ(s(3, 0, 0), 1.0);
}

TEST(Sdv, DumpWritesAllValues) {
  SdvGrid g(2);
  g.values[3] = 0.25;
  std::ostringstream out;
  g.dump(out);
  std::istringstream in(out.str());
  std::vector<double> back{std::istream_iterator<double>(in), std::istream_iterator<double>()};
  EXPECT_EQ(back, g.values);
}

TEST(Patch, RotationInvariant) {
  std::mt19937_64 rng(6);
  const GridConfig cfg;
  int checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto pts = smoothnet::testing::random_support(rng, 400, 0.4);
    const PointCloud cloud(pts);
    const auto t = smoothnet::testing::random_transform(rng, 1.0);
    const auto moved = apply_transform(cloud, t);
    const KdTree a(cloud), b(moved);
    const Vec3 kp = cloud[0];
    const auto g1 = extract_patch(cloud, a, kp, std::sqrt(3.0) * 0.3, cfg);
    const auto g2 = extract_patch(moved, b, t(kp), std::sqrt(3.0) * 0.3, cfg);
    for (std::size_t i = 0; i < g1.values.size(); ++i) ASSERT_NEAR(g1.values[i], g2.values[i], 1e-6);
    if (!g1.is_zero()) {
      EXPECT_NEAR(g1.sum(), 1.0, 1e-9);
    }
    ++checked;
  }
  EXPECT_EQ(checked, 20);
}

TEST(Patch, EmptyCircumsphereGivesZeroGrid) {
  // LRF support (radius 0.52) holds points, the grid's circumsphere (0.26) does not.
  std::mt19937_64 rng(7);
  auto pts = smoothnet::testing::random_support(rng, 200, 0.5);
  std::vector<Vec3> ring;
  for (const auto& p : pts) {
    if (p.norm() > 0.3) ring.push_back(p);
  }
  ASSERT_GT(ring.size(), 10u);
  const PointCloud cloud(ring);
  const KdTree tree(cloud);
  const auto g = extract_patch(cloud, tree, Vec3::Zero(), std::sqrt(3.0) * 0.3, GridConfig{});
  EXPECT_TRUE(g.is_zero());
}

TEST(Patch, DegenerateKeypointPropagates) {
  const PointCloud cloud({Vec3(0, 0, 0), Vec3(0.01, 0, 0)});
  const KdTree tree(cloud);
  try {
    extract_patch(cloud, tree, std::size_t{0}, RunConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateSupport);
  }
}
