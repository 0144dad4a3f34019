#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "smoothnet/core.hpp"

namespace smoothnet {

/// Static k-d tree over a point cloud. Holds a copy of the coordinates, so it
/// stays valid independently of the cloud it was built from. Queries are
/// const and may run concurrently.
class KdTree {
 public:
  struct Neighbor {
    std::size_t index = 0;
    double distance = 0.0;
  };

  KdTree() = default;
  explicit KdTree(const PointCloud& cloud) : points_(cloud.begin(), cloud.end()) {
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (!points_.empty()) root_ = build(0, points_.size());
  }

  std::size_t size() const noexcept { return points_.size(); }

  /// Indices of all points with |p - center| <= radius, in ascending index order.
  std::vector<std::size_t> radius_query(const Vec3& center, double radius) const {
    std::vector<std::size_t> out;
    if (root_ != kNone) radius_rec(root_, center, radius, radius * radius, out);
    std::sort(out.begin(), out.end());
    return out;
  }

  std::size_t radius_count(const Vec3& center, double radius) const {
    return radius_query(center, radius).size();
  }

  /// Exact nearest neighbour; ties resolve to the smallest index.
  std::optional<Neighbor> nearest(const Vec3& query) const {
    if (root_ == kNone) return std::nullopt;
    Best best;
    nearest_rec(root_, query, best);
    return Neighbor{best.index, std::sqrt(best.dist2)};
  }

 private:
  static constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
  static constexpr std::size_t kLeafSize = 8;

  struct Node {
    std::uint32_t begin = 0, end = 0;  // range in order_ (leaf) or split point
    std::uint32_t left = kNone, right = kNone;
    int axis = -1;  // -1 for leaves
    double split = 0.0;
    Eigen::AlignedBox3d box;
  };

  struct Best {
    std::size_t index = std::numeric_limits<std::size_t>::max();
    double dist2 = std::numeric_limits<double>::infinity();
  };

  std::uint32_t build(std::size_t begin, std::size_t end) {
    Node node;
    node.begin = static_cast<std::uint32_t>(begin);
    node.end = static_cast<std::uint32_t>(end);
    for (std::size_t i = begin; i < end; ++i) node.box.extend(points_[order_[i]]);
    const auto id = static_cast<std::uint32_t>(nodes_.size());
    nodes_.push_back(node);
    if (end - begin <= kLeafSize) return id;

    int axis = 0;
    node.box.sizes().maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                     order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
    const auto left = build(begin, mid);
    const auto right = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = points_[order_[mid]][axis];
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  static double box_dist2(const Eigen::AlignedBox3d& box, const Vec3& q) {
    return box.squaredExteriorDistance(q);
  }

  void radius_rec(std::uint32_t id, const Vec3& c, double r, double r2, std::vector<std::size_t>& out) const {
    const Node& n = nodes_[id];
    if (box_dist2(n.box, c) > r2 * (1.0 + 1e-12)) return;
    if (n.axis < 0) {
      for (std::uint32_t i = n.begin; i < n.end; ++i) {
        const auto idx = order_[i];
        // Compare on the norm itself so boundary points agree with a
        // brute-force |p - c| <= r scan.
        if ((points_[idx] - c).norm() <= r) out.push_back(idx);
      }
      return;
    }
    radius_rec(n.left, c, r, r2, out);
    radius_rec(n.right, c, r, r2, out);
  }

  void nearest_rec(std::uint32_t id, const Vec3& q, Best& best) const {
    const Node& n = nodes_[id];
    if (box_dist2(n.box, q) > best.dist2) return;
    if (n.axis < 0) {
      for (std::uint32_t i = n.begin; i < n.end; ++i) {
        const auto idx = order_[i];
        const double d2 = (points_[idx] - q).squaredNorm();
        if (d2 < best.dist2 || (d2 == best.dist2 && idx < best.index)) best = {idx, d2};
      }
      return;
    }
    const bool go_left = q[n.axis] < n.split;
    nearest_rec(go_left ? n.left : n.right, q, best);
    nearest_rec(go_left ? n.right : n.left, q, best);
  }

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
  std::uint32_t root_ = kNone;
};

}  // namespace smoothnet
