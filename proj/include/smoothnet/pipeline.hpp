#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "smoothnet/config.hpp"
#include "smoothnet/core.hpp"
#include "smoothnet/eval.hpp"
#include "smoothnet/io.hpp"
#include "smoothnet/match.hpp"
#include "smoothnet/net.hpp"
#include "smoothnet/sdv.hpp"
#include "smoothnet/spatial_index.hpp"

namespace smoothnet {

// Runs fn(chunk) for chunk in [0, chunks) on up to `threads` workers. The
// first exception wins and is rethrown after all workers stop.
template <class Fn>
void parallel_chunks(std::size_t chunks, int threads, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(std::clamp<long long>(threads, 1, static_cast<long long>(std::max<std::size_t>(chunks, 1))));
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) fn(c);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const auto c = next.fetch_add(1);
        if (c >= chunks) return;
        try {
          fn(c);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = chunks;
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct DescribedFragment {
  std::vector<std::size_t> keypoints;  // cloud indices that produced a descriptor
  std::vector<Vec3> positions;         // their coordinates
  io::DescriptorSet descriptors;
  std::vector<std::size_t> skipped;    // cloud indices with a degenerate frame
};

/// Patches and network descriptors for the given keypoints. Work is split
/// into fixed chunks of keypoints, so results do not depend on `threads`.
inline DescribedFragment describe_keypoints(const PointCloud& cloud, const KdTree& index, std::span<const std::size_t> keypoints,
                                            const net::NetworkParams& params, const RunConfig& cfg, int threads = 1) {
  constexpr std::size_t chunk = 64;
  const auto grid = GridConfig::from(cfg);
  grid.validate();
  const auto dim = net::output_dim(params.arch);
  const std::size_t chunks = (keypoints.size() + chunk - 1) / chunk;
  std::vector<std::optional<std::vector<float>>> rows(keypoints.size());
  for (auto k : keypoints) cloud.at(k);

  parallel_chunks(chunks, threads, [&](std::size_t c) {
    const std::size_t begin = c * chunk, end = std::min(keypoints.size(), begin + chunk);
    std::vector<SdvGrid> grids;
    std::vector<std::size_t> slots;
    for (std::size_t i = begin; i < end; ++i) {
      try {
        grids.push_back(extract_patch(cloud, index, cloud[keypoints[i]], cfg.lrf_radius, grid));
        slots.push_back(i);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::DegenerateSupport) throw;
      }
    }
    if (grids.empty()) return;
    const auto out = net::forward(params, grids, net::Mode::Infer, 0, {cfg.bn_epsilon});
    for (std::size_t r = 0; r < slots.size(); ++r) {
      std::vector<float> row(static_cast<std::size_t>(dim));
      for (int d = 0; d < dim; ++d) row[static_cast<std::size_t>(d)] = static_cast<float>(out.descriptors(static_cast<Eigen::Index>(r), d));
      rows[slots[r]] = std::move(row);
    }
  });

  DescribedFragment f;
  f.descriptors.dim = static_cast<std::size_t>(dim);
  for (std::size_t i = 0; i < keypoints.size(); ++i) {
    if (rows[i]) {
      f.keypoints.push_back(keypoints[i]);
      f.positions.push_back(cloud[keypoints[i]]);
      f.descriptors.push_back(*rows[i]);
    } else {
      f.skipped.push_back(keypoints[i]);
    }
  }
  return f;
}

/// Coordinates as descriptors, mapped through `t` first. With t = T_gt for Q
/// and identity for P, matching is exact up to noise.
inline DescribedFragment oracle_descriptors(const PointCloud& cloud, std::span<const std::size_t> keypoints,
                                            const RigidTransform& t = RigidTransform::identity()) {
  DescribedFragment f;
  f.descriptors.dim = 3;
  for (auto k : keypoints) {
    const Vec3 p = cloud.at(k);
    const Vec3 m = t(p);
    f.keypoints.push_back(k);
    f.positions.push_back(p);
    f.descriptors.push_back(std::vector<float>{static_cast<float>(m.x()), static_cast<float>(m.y()), static_cast<float>(m.z())});
  }
  return f;
}

// ---------------------------------------------------------------------------
// Correspondence files: one `p q distance` line per pair

inline std::string format_correspondences(const CorrespondenceSet& corrs) {
  std::ostringstream out;
  out.precision(9);
  for (const auto& c : corrs) out << c.p << ' ' << c.q << ' ' << c.distance << '\n';
  return out.str();
}

inline CorrespondenceSet parse_correspondences(std::string_view text) {
  CorrespondenceSet out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (io::detail::split_ws(line).empty()) continue;
    std::istringstream row(line);
    Correspondence c;
    if (!(row >> c.p >> c.q >> c.distance)) {
      fail(ErrorCode::InvariantViolation, "bad correspondence on line " + std::to_string(line_no));
    }
    out.push_back(c);
  }
  return out;
}

/// Index list as one integer per line (same shape as the keypoint file).
inline std::string format_index_list(std::span<const std::size_t> ids) {
  std::string s;
  for (auto i : ids) s += std::to_string(i) + '\n';
  return s;
}

// ---------------------------------------------------------------------------
// Pair evaluation

struct PairEvaluation {
  PairResult result;
  DescribedFragment p;
  DescribedFragment q;
  CorrespondenceSet correspondences;
};

/// Samples keypoints on both fragments, describes them (with the network, or
/// with ground-truth coordinates when `params` is null), matches mutually
/// and scores the matches against T_gt.
inline PairEvaluation evaluate_fragments(const PointCloud& cloud_p, const PointCloud& cloud_q, const RigidTransform& t_gt,
                                         const net::NetworkParams* params, const RunConfig& cfg, std::size_t n_keypoints,
                                         std::uint64_t seed, int threads = 1) {
  const KdTree index_p(cloud_p), index_q(cloud_q);
  const auto kp_p = select_keypoints(cloud_p, index_p, n_keypoints, cfg.keypoint_radius, cfg.keypoint_min_neighbors, seed);
  const auto kp_q = select_keypoints(cloud_q, index_q, n_keypoints, cfg.keypoint_radius, cfg.keypoint_min_neighbors,
                                     seed ^ 0x5DEECE66DULL);
  PairEvaluation e;
  if (params) {
    e.p = describe_keypoints(cloud_p, index_p, kp_p, *params, cfg, threads);
    e.q = describe_keypoints(cloud_q, index_q, kp_q, *params, cfg, threads);
  } else {
    e.p = oracle_descriptors(cloud_p, kp_p);
    e.q = oracle_descriptors(cloud_q, kp_q, t_gt);
  }
  e.correspondences = mutual_correspondences(e.p.descriptors, e.q.descriptors);
  e.result = evaluate_pair(e.correspondences, e.p.positions, e.q.positions, t_gt, cfg.tau1, cfg.tau2);
  return e;
}

}  // namespace smoothnet
