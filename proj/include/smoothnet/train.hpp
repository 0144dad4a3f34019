#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "smoothnet/config.hpp"
#include "smoothnet/core.hpp"
#include "smoothnet/io.hpp"
#include "smoothnet/match.hpp"
#include "smoothnet/net.hpp"
#include "smoothnet/sdv.hpp"
#include "smoothnet/spatial_index.hpp"

namespace smoothnet {

// ---------------------------------------------------------------------------
// Training pairs

struct TrainingPair {
  SdvGrid anchor;
  SdvGrid positive;
  std::size_t fragment_a = 0;
  std::size_t fragment_b = 0;
  std::size_t anchor_index = 0;    // into fragment a
  std::size_t positive_index = 0;  // into fragment b
};

/// Draws up to `n_anchors` anchors of frag_a whose nearest neighbour in
/// T(frag_b) lies within tau1; that neighbour is the positive. Anchors whose
/// anchor or positive frame is degenerate are skipped.
inline std::vector<TrainingPair> sample_training_pairs(const PointCloud& frag_a, const PointCloud& frag_b,
                                                       const RigidTransform& t_gt, std::size_t n_anchors, std::uint64_t seed,
                                                       const RunConfig& cfg, std::size_t id_a = 0, std::size_t id_b = 1) {
  if (frag_a.empty() || frag_b.empty()) fail(ErrorCode::InsufficientOverlap, "empty fragment");
  const double psi_ab = overlap(frag_a, frag_b, t_gt, cfg.tau_psi);
  const double psi_ba = overlap(frag_b, frag_a, invert(t_gt), cfg.tau_psi);
  if (!(psi_ab > cfg.min_overlap && psi_ba > cfg.min_overlap)) {
    fail(ErrorCode::InsufficientOverlap, "overlap " + std::to_string(psi_ab) + " / " + std::to_string(psi_ba) +
                                             " does not exceed " + std::to_string(cfg.min_overlap));
  }
  const KdTree aligned_b(apply_transform(frag_b, t_gt));
  std::vector<std::pair<std::size_t, std::size_t>> candidates;
  for (std::size_t i = 0; i < frag_a.size(); ++i) {
    const auto nn = aligned_b.nearest(frag_a[i]);
    if (nn->distance <= cfg.tau1) candidates.emplace_back(i, nn->index);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(candidates.begin(), candidates.end(), rng);

  const KdTree index_a(frag_a), index_b(frag_b);
  const auto grid = GridConfig::from(cfg);
  // Share of the frame support around `c` that has a counterpart in the other
  // fragment. Supports cut by a fragment border yield unrepeatable frames.
  const KdTree aligned_a(apply_transform(frag_a, invert(t_gt)));
  const auto coverage = [&](const PointCloud& src, const KdTree& src_index, const KdTree& other, const Vec3& c) {
    const auto support = src_index.radius_query(c, cfg.lrf_radius);
    std::size_t hit = 0;
    for (auto i : support) {
      const auto nn = other.nearest(src[i]);
      if (nn && nn->distance <= cfg.tau_psi) ++hit;
    }
    return support.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(support.size());
  };
  std::vector<TrainingPair> out;
  for (const auto& [ia, ib] : candidates) {
    if (out.size() >= n_anchors) break;
    if (cfg.min_support_coverage > 0 &&
        (coverage(frag_a, index_a, aligned_b, frag_a[ia]) < cfg.min_support_coverage ||
         coverage(frag_b, index_b, aligned_a, frag_b[ib]) < cfg.min_support_coverage)) {
      continue;
    }
    try {
      TrainingPair pair;
      pair.anchor = extract_patch(frag_a, index_a, frag_a[ia], cfg.lrf_radius, grid);
      pair.positive = extract_patch(frag_b, index_b, frag_b[ib], cfg.lrf_radius, grid);
      pair.fragment_a = id_a;
      pair.fragment_b = id_b;
      pair.anchor_index = ia;
      pair.positive_index = ib;
      out.push_back(std::move(pair));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DegenerateSupport) throw;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Soft-margin batch-hard loss

struct BatchHardResult {
  double loss = 0.0;
  net::RowMatrix grad_anchor;    // n x D
  net::RowMatrix grad_positive;  // n x D
  std::vector<std::size_t> hardest_negative;
  std::vector<double> terms;  // per-anchor loss terms
};

namespace train_detail {

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace train_detail

/// mean_i softplus(|a_i - p_i| - min_{j != i} |a_i - p_j|), with its exact
/// gradient. The hardest negative is the smallest index on ties, and the
/// gradient follows that choice.
inline BatchHardResult batch_hard_loss(const net::RowMatrix& anchors, const net::RowMatrix& positives) {
  const auto n = static_cast<std::size_t>(anchors.rows());
  if (n < 2) fail(ErrorCode::BatchTooSmall, "batch-hard loss needs at least 2 anchors");
  if (positives.rows() != anchors.rows() || positives.cols() != anchors.cols()) {
    fail(ErrorCode::ShapeMismatch, "anchor and positive batches differ in shape");
  }
  const auto dim = anchors.cols();
  BatchHardResult r;
  r.grad_anchor = net::RowMatrix::Zero(anchors.rows(), dim);
  r.grad_positive = net::RowMatrix::Zero(anchors.rows(), dim);
  r.hardest_negative.resize(n);
  r.terms.resize(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    const Eigen::RowVectorXd pos_diff = anchors.row(ii) - positives.row(ii);
    const double d_pos = pos_diff.norm();
    double d_neg = std::numeric_limits<double>::infinity();
    std::size_t neg = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = (anchors.row(ii) - positives.row(static_cast<Eigen::Index>(j))).norm();
      if (d < d_neg) {
        d_neg = d;
        neg = j;
      }
    }
    const double margin = d_pos - d_neg;
    r.terms[i] = train_detail::softplus(margin);
    r.loss += r.terms[i] * inv_n;
    r.hardest_negative[i] = neg;

    const double w = train_detail::sigmoid(margin) * inv_n;
    const auto nn = static_cast<Eigen::Index>(neg);
    if (d_pos > 0) {
      const Eigen::RowVectorXd u = pos_diff / d_pos;
      r.grad_anchor.row(ii) += w * u;
      r.grad_positive.row(ii) -= w * u;
    }
    const Eigen::RowVectorXd neg_diff = anchors.row(ii) - positives.row(nn);
    if (d_neg > 0) {
      const Eigen::RowVectorXd u = neg_diff / d_neg;
      r.grad_anchor.row(ii) -= w * u;
      r.grad_positive.row(nn) += w * u;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// ADAM with step-wise exponential learning-rate decay

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double decay = 0.95;
  int decay_steps = 5000;

  static AdamOptions from(const RunConfig& c) {
    return {c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_epsilon, c.lr_decay, c.lr_decay_steps};
  }
};

struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;

  /// Learning rate applied by the next update.
  double learning_rate() const {
    return options.learning_rate *
           std::pow(options.decay, static_cast<double>(step / static_cast<std::uint64_t>(options.decay_steps)));
  }
};

/// One ADAM update over a list of flat tensors. Moments are created on the
/// first call.
inline void adam_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
                      AdamState& state) {
  if (params.size() != grads.size()) fail(ErrorCode::ShapeMismatch, "parameter and gradient lists differ in length");
  if (state.first.empty() && state.step == 0) {
    for (const auto& p : params) {
      state.first.emplace_back(p.size(), 0.0);
      state.second.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first.size() != params.size()) fail(ErrorCode::ShapeMismatch, "optimizer state does not match parameters");
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (params[t].size() != grads[t].size() || state.first[t].size() != params[t].size()) {
      fail(ErrorCode::ShapeMismatch, "tensor " + std::to_string(t) + " shape mismatch");
    }
  }
  const auto& o = state.options;
  const double lr = state.learning_rate();
  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.first[k];
    auto& v = state.second[k];
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      const double g = grads[k][i];
      m[i] = o.beta1 * m[i] + (1 - o.beta1) * g;
      v[i] = o.beta2 * v[i] + (1 - o.beta2) * g * g;
      params[k][i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + o.epsilon);
    }
  }
  ++state.step;
}

inline void adam_step(net::NetworkParams& params, const net::Gradients& grads, AdamState& state) {
  if (grads.weight.size() != params.layers.size() || grads.bias.size() != params.layers.size()) {
    fail(ErrorCode::ShapeMismatch, "gradients do not match network");
  }
  std::vector<std::span<double>> p;
  std::vector<std::span<const double>> g;
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    if (params.arch.layers[li].kind != net::LayerKind::Conv3d) continue;
    p.emplace_back(params.layers[li].weight);
    g.emplace_back(grads.weight[li]);
    p.emplace_back(params.layers[li].bias);
    g.emplace_back(grads.bias[li]);
  }
  adam_step(p, g, state);
  ++params.generation;
}

// ---------------------------------------------------------------------------
// Training loop

struct LossRecord {
  int iteration = 0;
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
};

inline std::string loss_log_csv(const std::vector<LossRecord>& log) {
  std::ostringstream out;
  out.precision(17);
  out << "iteration,epoch,loss,lr\n";
  for (const auto& r : log) out << r.iteration << ',' << r.epoch << ',' << r.loss << ',' << r.lr << '\n';
  return out.str();
}

struct TrainResult {
  net::NetworkParams params;
  std::vector<LossRecord> log;
};

struct TrainHooks {
  /// Called after the last iteration of every epoch.
  std::function<void(int epoch, const net::NetworkParams&)> on_epoch;
  /// Called before NonFiniteLoss is raised, with the offending batch.
  std::function<void(int iteration, const net::NetworkParams&, std::span<const std::size_t> batch)> on_nonfinite;
};

/// Minimizes the batch-hard loss over training pairs grouped by fragment
/// pair. Mini-batches take one sample from each group in turn; each group
/// is visited in a seeded random order that is reshuffled when exhausted.
inline TrainResult train_network(const RunConfig& cfg, const std::vector<std::vector<TrainingPair>>& groups,
                                 std::uint64_t seed, const TrainHooks& hooks = {}) {
  cfg.validate();
  std::vector<const TrainingPair*> samples;
  std::vector<std::vector<std::size_t>> group_members;
  for (const auto& g : groups) {
    std::vector<std::size_t> members;
    for (const auto& p : g) {
      members.push_back(samples.size());
      samples.push_back(&p);
    }
    if (!members.empty()) group_members.push_back(std::move(members));
  }
  if (samples.size() < 2) fail(ErrorCode::BatchTooSmall, "need at least 2 training pairs");

  const auto arch = net::parse_architecture(cfg.architecture, cfg.grid_voxels, cfg.descriptor_dim);
  TrainResult result;
  result.params = net::init_params(arch, seed, {cfg.init_gain, cfg.init_bias});
  AdamState adam;
  adam.options = AdamOptions::from(cfg);

  const auto batch = static_cast<std::size_t>(std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), samples.size()));
  const int iters_per_epoch = static_cast<int>((samples.size() + batch - 1) / batch);
  const int total = cfg.max_iterations > 0 ? cfg.max_iterations : cfg.epochs * iters_per_epoch;

  std::mt19937_64 rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
  std::vector<std::size_t> cursor(group_members.size(), 0);
  for (auto& m : group_members) std::shuffle(m.begin(), m.end(), rng);
  std::size_t next_group = 0;

  const std::size_t cells = static_cast<std::size_t>(cfg.grid_voxels) * cfg.grid_voxels * cfg.grid_voxels;
  std::vector<std::size_t> chosen;
  for (int it = 1; it <= total; ++it) {
    chosen.clear();
    while (chosen.size() < batch) {
      const auto g = next_group;
      next_group = (next_group + 1) % group_members.size();
      if (cursor[g] == group_members[g].size()) {
        std::shuffle(group_members[g].begin(), group_members[g].end(), rng);
        cursor[g] = 0;
      }
      chosen.push_back(group_members[g][cursor[g]++]);
    }

    net::Tensor input(static_cast<int>(2 * batch), 1, cfg.grid_voxels);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto& pair = *samples[chosen[b]];
      std::copy_n(pair.anchor.values.begin(), cells, input.sample(static_cast<int>(b)));
      std::copy_n(pair.positive.values.begin(), cells, input.sample(static_cast<int>(batch + b)));
    }
    auto fwd = net::forward(result.params, input, net::Mode::Train, seed * 1000003ULL + static_cast<std::uint64_t>(it),
                            {cfg.bn_epsilon});
    const auto rows = static_cast<Eigen::Index>(batch);
    const net::RowMatrix anchors = fwd.descriptors.topRows(rows);
    const net::RowMatrix positives = fwd.descriptors.bottomRows(rows);
    const auto loss = batch_hard_loss(anchors, positives);
    if (!std::isfinite(loss.loss)) {
      if (hooks.on_nonfinite) hooks.on_nonfinite(it, result.params, chosen);
      fail(ErrorCode::NonFiniteLoss, "loss became non-finite at iteration " + std::to_string(it));
    }
    net::RowMatrix upstream(2 * rows, fwd.descriptors.cols());
    upstream.topRows(rows) = loss.grad_anchor;
    upstream.bottomRows(rows) = loss.grad_positive;
    const auto grads = net::backward(result.params, fwd.cache, upstream);

    const int epoch = static_cast<int>((static_cast<std::size_t>(it - 1) * batch) / samples.size());
    result.log.push_back({it, epoch, loss.loss, adam.learning_rate()});
    net::update_running_stats(result.params, fwd.cache, cfg.bn_momentum);
    adam_step(result.params, grads, adam);

    const int next_epoch = static_cast<int>((static_cast<std::size_t>(it) * batch) / samples.size());
    if (hooks.on_epoch && (next_epoch != epoch || it == total)) hooks.on_epoch(epoch, result.params);
  }
  return result;
}

// ---------------------------------------------------------------------------
// File-driven training

struct ManifestEntry {
  std::filesystem::path cloud_a;
  std::filesystem::path cloud_b;
  std::filesystem::path transform;
};

/// Lines `frag_a.ply frag_b.ply transform.txt`; relative paths resolve
/// against the manifest's directory. '#' starts a comment.
inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  const auto text = io::read_file(path);
  const auto base = path.parent_path();
  std::vector<ManifestEntry> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto tok = io::detail::split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != 3) fail(ErrorCode::InvariantViolation, "manifest line " + std::to_string(line_no) + " needs 3 paths");
    auto resolve = [&](std::string_view s) {
      std::filesystem::path p{std::string(s)};
      return p.is_absolute() ? p : base / p;
    };
    out.push_back({resolve(tok[0]), resolve(tok[1]), resolve(tok[2])});
  }
  return out;
}

inline PointCloud load_fragment(const std::filesystem::path& path, const RunConfig& cfg) {
  auto cloud = io::read_ply(path);
  if (cfg.downsample_cell > 0) cloud = voxel_downsample(cloud, cfg.downsample_cell);
  return cloud;
}

/// Trains from a manifest and writes `loss.csv`, one checkpoint per epoch
/// and `weights.sdvw` into `out_dir`.
inline TrainResult train_from_manifest(const RunConfig& cfg, const std::filesystem::path& manifest, std::uint64_t seed,
                                       const std::filesystem::path& out_dir) {
  cfg.validate();
  const auto entries = read_manifest(manifest);
  if (entries.empty()) fail(ErrorCode::EmptyManifest, "manifest '" + manifest.string() + "' lists no fragment pairs");
  std::filesystem::create_directories(out_dir);
  std::vector<std::vector<TrainingPair>> groups;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto a = load_fragment(entries[k].cloud_a, cfg);
    const auto b = load_fragment(entries[k].cloud_b, cfg);
    const auto t = io::read_transform(entries[k].transform);
    groups.push_back(sample_training_pairs(a, b, t, static_cast<std::size_t>(cfg.anchors_per_pair), seed + 7919 * (k + 1),
                                           cfg, 2 * k, 2 * k + 1));
  }
  TrainHooks hooks;
  hooks.on_epoch = [&](int epoch, const net::NetworkParams& p) {
    std::ostringstream name;
    name << "checkpoint_epoch_" << std::setw(3) << std::setfill('0') << epoch << ".sdvw";
    net::save_params(out_dir / name.str(), p);
  };
  hooks.on_nonfinite = [&](int iteration, const net::NetworkParams& p, std::span<const std::size_t> batch) {
    net::save_params(out_dir / "nonfinite_params.sdvw", p);
    std::ostringstream dump;
    dump << "iteration " << iteration << "\nbatch";
    for (auto i : batch) dump << ' ' << i;
    dump << '\n';
    io::write_file_atomic(out_dir / "nonfinite_batch.txt", dump.str());
  };
  auto result = train_network(cfg, groups, seed, hooks);
  io::write_file_atomic(out_dir / "loss.csv", loss_log_csv(result.log));
  net::save_params(out_dir / "weights.sdvw", result.params);
  return result;
}

}  // namespace smoothnet
