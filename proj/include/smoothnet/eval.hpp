#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smoothnet/core.hpp"
#include "smoothnet/match.hpp"
#include "smoothnet/spatial_index.hpp"

namespace smoothnet {

// ---------------------------------------------------------------------------
// Correspondence quality and recall

/// Fraction of correspondences whose points land within tau1 of each other
/// once Q is brought into P's frame with the ground truth.
inline double inlier_ratio(const CorrespondenceSet& corrs, std::span<const Vec3> kp_p, std::span<const Vec3> kp_q,
                           const RigidTransform& t_gt, double tau1, std::size_t* inlier_count = nullptr) {
  if (corrs.empty()) fail(ErrorCode::EmptyCorrespondences, "inlier ratio of an empty correspondence set");
  std::size_t hits = 0;
  for (const auto& c : corrs) {
    if ((kp_p[c.p] - t_gt(kp_q[c.q])).norm() < tau1) ++hits;
  }
  if (inlier_count) *inlier_count = hits;
  return static_cast<double>(hits) / static_cast<double>(corrs.size());
}

struct PairResult {
  std::string scene;
  std::string frag_a;
  std::string frag_b;
  std::size_t n_corr = 0;
  std::size_t n_inlier = 0;
  double ratio = 0.0;
  bool pass = false;

  friend bool operator==(const PairResult&, const PairResult&) = default;
};

/// Scores one fragment pair. An empty correspondence set is a failing pair
/// with ratio 0.
inline PairResult evaluate_pair(const CorrespondenceSet& corrs, std::span<const Vec3> kp_p, std::span<const Vec3> kp_q,
                                const RigidTransform& t_gt, double tau1, double tau2) {
  PairResult r;
  r.n_corr = corrs.size();
  if (!corrs.empty()) r.ratio = inlier_ratio(corrs, kp_p, kp_q, t_gt, tau1, &r.n_inlier);
  r.pass = r.ratio > tau2;
  return r;
}

struct SceneReport {
  std::string scene;
  std::vector<PairResult> pairs;
  double recall = 0.0;
  double tau1 = 0.1;
  double tau2 = 0.05;

  double mean_inlier_ratio() const {
    double s = 0;
    for (const auto& p : pairs) s += p.ratio;
    return pairs.empty() ? 0.0 : s / static_cast<double>(pairs.size());
  }
};

/// Share of pairs whose inlier ratio is strictly above tau2.
inline SceneReport scene_recall(std::vector<PairResult> pairs, double tau2, std::string scene = "", double tau1 = 0.1) {
  if (pairs.empty()) fail(ErrorCode::NoPairs, "scene recall needs at least one pair");
  SceneReport report;
  report.scene = std::move(scene);
  report.tau1 = tau1;
  report.tau2 = tau2;
  std::size_t passed = 0;
  for (auto& p : pairs) {
    p.pass = p.ratio > tau2;
    passed += p.pass ? 1 : 0;
  }
  report.recall = static_cast<double>(passed) / static_cast<double>(pairs.size());
  report.pairs = std::move(pairs);
  return report;
}

/// Recall at each threshold; the curve is non-increasing by construction.
inline std::vector<std::pair<double, double>> recall_sweep(const std::vector<PairResult>& pairs, std::span<const double> taus) {
  std::vector<std::pair<double, double>> curve;
  for (double tau : taus) {
    if (!(tau > 0.0 && tau <= 1.0)) fail(ErrorCode::DomainError, "sweep thresholds must lie in (0, 1]");
    curve.emplace_back(tau, scene_recall(pairs, tau).recall);
  }
  for (std::size_t i = 0; i < curve.size(); ++i) {
    for (std::size_t j = 0; j < curve.size(); ++j) {
      if (curve[i].first < curve[j].first && curve[i].second < curve[j].second) {
        fail(ErrorCode::InvariantViolation, "recall increased with the threshold");
      }
    }
  }
  return curve;
}

inline nlohmann::json to_json(const SceneReport& r) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : r.pairs) {
    pairs.push_back({{"frag_a", p.frag_a},
                     {"frag_b", p.frag_b},
                     {"n_corr", p.n_corr},
                     {"n_inlier", p.n_inlier},
                     {"ratio", p.ratio},
                     {"pass", p.pass}});
  }
  return {{"scene", r.scene},
          {"tau1", r.tau1},
          {"tau2", r.tau2},
          {"recall", r.recall},
          {"mean_inlier_ratio", r.mean_inlier_ratio()},
          {"pairs", pairs}};
}

inline std::string pairs_csv(const std::vector<SceneReport>& reports) {
  std::ostringstream out;
  out.precision(17);
  out << "scene,frag_a,frag_b,n_corr,n_inlier,ratio,pass\n";
  for (const auto& r : reports) {
    for (const auto& p : r.pairs) {
      out << r.scene << ',' << p.frag_a << ',' << p.frag_b << ',' << p.n_corr << ',' << p.n_inlier << ',' << p.ratio << ','
          << (p.pass ? 1 : 0) << '\n';
    }
  }
  return out.str();
}

/// Inverse of pairs_csv (rows only; the pass column is recomputed later).
inline std::vector<PairResult> parse_pairs_csv(std::string_view text) {
  std::vector<PairResult> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line_no == 1) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) fail(ErrorCode::InvariantViolation, "pairs CSV line " + std::to_string(line_no) + " needs 7 columns");
    PairResult p;
    p.scene = cells[0];
    p.frag_a = cells[1];
    p.frag_b = cells[2];
    try {
      p.n_corr = std::stoull(cells[3]);
      p.n_inlier = std::stoull(cells[4]);
      p.ratio = std::stod(cells[5]);
    } catch (const std::exception&) {
      fail(ErrorCode::InvariantViolation, "pairs CSV line " + std::to_string(line_no) + " has a bad number");
    }
    p.pass = cells[6] == "1";
    out.push_back(std::move(p));
  }
  return out;
}

inline std::string sweep_csv(const std::vector<std::pair<double, double>>& curve) {
  std::ostringstream out;
  out.precision(17);
  out << "tau2,recall\n";
  for (const auto& [tau, r] : curve) out << tau << ',' << r << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Keypoint sampling

/// Uniformly samples up to `count` cloud indices whose sphere of `radius`
/// holds more than `min_neighbors` other points. Result is sorted.
inline std::vector<std::size_t> select_keypoints(const PointCloud& cloud, const KdTree& index, std::size_t count, double radius,
                                                 int min_neighbors, std::uint64_t seed) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto n = index.radius_query(cloud[i], radius).size();
    if (n > 0 && n - 1 > static_cast<std::size_t>(std::max(min_neighbors, 0))) candidates.push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  if (candidates.size() > count) candidates.resize(count);
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class SurfaceKind { HeightField, Primitives };

struct SyntheticConfig {
  SurfaceKind surface = SurfaceKind::HeightField;
  double fragment_width = 2.0;   // extent of each fragment along x, meters
  double fragment_depth = 2.0;   // extent along y, meters
  double spacing = 0.02;         // sampling lattice pitch, meters
  double jitter = 0.3;           // lattice jitter as a fraction of spacing (per axis, +/-)
  double noise = 0.0;            // i.i.d. Gaussian sigma per coordinate, meters
  double overlap = 0.6;          // target fraction of each fragment shared with the other
  double keep_fraction = 1.0;    // random density reduction applied after sampling
  double max_translation = 1.0;  // ground-truth translation drawn in [-t, t]^3
  double feature_density = 6.0;  // bumps (height field) or 2x primitives per square meter

  void validate() const {
    auto require = [](bool ok, const char* what) {
      if (!ok) fail(ErrorCode::InvariantViolation, what);
    };
    require(fragment_width > 0 && fragment_depth > 0, "fragment extents must be > 0");
    require(spacing > 0, "spacing must be > 0");
    require(jitter >= 0 && jitter <= 0.5, "jitter must be in [0, 0.5]");
    require(noise >= 0, "noise must be >= 0");
    require(overlap > 0 && overlap <= 1, "overlap must be in (0, 1]");
    require(keep_fraction > 0 && keep_fraction <= 1, "keep_fraction must be in (0, 1]");
    require(max_translation >= 0, "max_translation must be >= 0");
    require(feature_density > 0, "feature_density must be > 0");
  }
};

struct SyntheticScene {
  PointCloud p;
  PointCloud q;          // expressed in its own frame
  RigidTransform t_gt;   // maps q into p's frame
  double overlap = 0.0;  // measured overlap of p with respect to q
};

/// Smooth 2.5D surface z = f(x, y) built from random bumps or primitives.
class SyntheticSurface {
 public:
  SyntheticSurface(SurfaceKind kind, double x_extent, double y_extent, double density, std::mt19937_64& rng) : kind_(kind) {
    std::uniform_real_distribution<double> ux(-0.3, x_extent + 0.3), uy(-0.3, y_extent + 0.3);
    const double area = (x_extent + 0.6) * (y_extent + 0.6);
    if (kind == SurfaceKind::HeightField) {
      const int count = static_cast<int>(std::ceil(area * density));
      std::uniform_real_distribution<double> amp(-0.12, 0.12), width(0.06, 0.22);
      for (int i = 0; i < count; ++i) features_.push_back({ux(rng), uy(rng), amp(rng), width(rng), 0.0});
      std::uniform_real_distribution<double> tilt(-0.1, 0.1);
      tilt_x_ = tilt(rng);
      tilt_y_ = tilt(rng);
    } else {
      const int count = static_cast<int>(std::ceil(area * density / 2));
      std::uniform_real_distribution<double> size(0.1, 0.25), height(0.04, 0.12), kind01(0.0, 1.0), yaw(0.0, std::numbers::pi);
      for (int i = 0; i < count; ++i) {
        // a: box half-size or cap radius, b: height, c: yaw (boxes) / -1 for caps.
        const bool cap = kind01(rng) < 0.5;
        features_.push_back({ux(rng), uy(rng), size(rng), height(rng), cap ? -1.0 : yaw(rng)});
      }
    }
  }

  double height(double x, double y) const {
    if (kind_ == SurfaceKind::HeightField) {
      double z = tilt_x_ * x + tilt_y_ * y;
      for (const auto& f : features_) {
        const double d2 = (x - f.x) * (x - f.x) + (y - f.y) * (y - f.y);
        z += f.a * std::exp(-d2 / (2 * f.b * f.b));
      }
      return z;
    }
    double z = 0.0;
    for (const auto& f : features_) {
      const double dx = x - f.x, dy = y - f.y;
      if (f.c < 0) {
        // Smooth dome of radius a and apex height b.
        const double r2 = (dx * dx + dy * dy) / (f.a * f.a);
        if (r2 < 1) z = std::max(z, f.b * (1 - r2) * (1 - r2));
      } else {
        // Rounded box, yawed by c, with softened edges.
        const double cs = std::cos(f.c), sn = std::sin(f.c);
        const double u = std::abs(cs * dx + sn * dy), v = std::abs(-sn * dx + cs * dy);
        const double edge = std::max(u, v * 1.6);
        const double t = std::clamp((f.a - edge) / 0.08, 0.0, 1.0);
        z = std::max(z, f.b * t * t * (3 - 2 * t));
      }
    }
    return z;
  }

 private:
  struct Feature {
    double x, y, a, b, c;
  };
  SurfaceKind kind_;
  std::vector<Feature> features_;
  double tilt_x_ = 0.0, tilt_y_ = 0.0;
};

inline Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  q.normalize();
  return q.toRotationMatrix();
}

namespace eval_detail {

inline std::vector<Vec3> sample_window(const SyntheticSurface& surface, double x0, const SyntheticConfig& cfg,
                                       std::mt19937_64& rng) {
  std::uniform_real_distribution<double> jit(-cfg.jitter, cfg.jitter);
  std::uniform_real_distribution<double> keep(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const int nx = static_cast<int>(std::floor(cfg.fragment_width / cfg.spacing + 1e-9));
  const int ny = static_cast<int>(std::floor(cfg.fragment_depth / cfg.spacing + 1e-9));
  std::vector<Vec3> pts;
  pts.reserve(static_cast<std::size_t>(nx) * ny);
  for (int iy = 0; iy < ny; ++iy) {
    for (int ix = 0; ix < nx; ++ix) {
      const double x = x0 + (ix + 0.5 + jit(rng)) * cfg.spacing;
      const double y = (iy + 0.5 + jit(rng)) * cfg.spacing;
      Vec3 p(x, y, surface.height(x, y));
      if (cfg.noise > 0) p += cfg.noise * Vec3(noise(rng), noise(rng), noise(rng));
      if (cfg.keep_fraction < 1.0 && keep(rng) >= cfg.keep_fraction) continue;
      pts.push_back(p);
    }
  }
  return pts;
}

}  // namespace eval_detail

/// Two partially overlapping samplings of one synthetic surface. P covers
/// x in [0, w]; Q covers x in [(1 - o) w, (2 - o) w], so each shares a
/// fraction o of its footprint with the other. Q is then moved by the
/// inverse of a random rigid motion, which is returned as the ground truth.
inline SyntheticScene make_synthetic_scene(std::uint64_t seed, const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const double shift = (1.0 - cfg.overlap) * cfg.fragment_width;
  const SyntheticSurface surface(cfg.surface, cfg.fragment_width + shift, cfg.fragment_depth, cfg.feature_density, rng);
  auto p_pts = eval_detail::sample_window(surface, 0.0, cfg, rng);
  auto q_world = eval_detail::sample_window(surface, shift, cfg, rng);

  SyntheticScene scene;
  scene.t_gt.rotation = random_rotation(rng);
  std::uniform_real_distribution<double> ut(-cfg.max_translation, cfg.max_translation);
  scene.t_gt.translation = Vec3(ut(rng), ut(rng), ut(rng));
  const RigidTransform to_q = invert(scene.t_gt);
  for (auto& q : q_world) q = to_q(q);
  scene.p = PointCloud(std::move(p_pts));
  scene.q = PointCloud(std::move(q_world));
  scene.overlap = overlap(scene.p, scene.q, scene.t_gt, 3 * cfg.spacing);
  return scene;
}

}  // namespace smoothnet
