#pragma once

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "smoothnet/config.hpp"
#include "smoothnet/core.hpp"
#include "smoothnet/eval.hpp"
#include "smoothnet/io.hpp"
#include "smoothnet/match.hpp"
#include "smoothnet/net.hpp"
#include "smoothnet/pipeline.hpp"
#include "smoothnet/train.hpp"

namespace smoothnet {

namespace cli_detail {

namespace fs = std::filesystem;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  int threads = 1;
  std::uint64_t seed = 0;
};

inline void add_common(CLI::App& cmd, Common& c) {
  cmd.add_option("--config", c.config_path, "run configuration file (default: $SMOOTHNET_CONFIG)");
  cmd.add_option("--set", c.overrides, "override a config key: key=value (repeatable)");
  cmd.add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
  cmd.add_option("--seed", c.seed, "random seed (default 0)");
}

// Defaults, then the config file, then --set overrides; echoed to the log.
inline RunConfig resolve_config(const Common& c, std::ostream& log) {
  std::string text;
  std::string source = "defaults";
  if (!c.config_path.empty()) {
    text = io::read_file(c.config_path);
    source = c.config_path;
  } else if (const char* env = std::getenv("SMOOTHNET_CONFIG"); env && *env) {
    text = io::read_file(env);
    source = env;
  }
  for (const auto& o : c.overrides) {
    if (o.find('=') == std::string::npos) fail(ErrorCode::InvariantViolation, "--set expects key=value, got '" + o + "'");
    text += "\n" + o;
  }
  const auto cfg = parse_config(text);
  log << "# config source: " << source << '\n' << format_config(cfg);
  return cfg;
}

inline std::vector<std::size_t> kept_keypoints(const fs::path& keypoints, const std::string& skipped, std::size_t cloud_size) {
  auto ids = io::read_keypoints(keypoints, cloud_size);
  if (skipped.empty()) return ids;
  const auto drop = io::read_keypoints(skipped, cloud_size);
  const std::set<std::size_t> gone(drop.begin(), drop.end());
  std::erase_if(ids, [&](std::size_t i) { return gone.contains(i); });
  return ids;
}

inline std::vector<Vec3> positions(const PointCloud& cloud, std::span<const std::size_t> ids) {
  std::vector<Vec3> out;
  for (auto i : ids) out.push_back(cloud.at(i));
  return out;
}

inline std::vector<double> parse_taus(const std::string& text) {
  std::vector<double> taus;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      taus.push_back(std::stod(cell));
    } catch (const std::exception&) {
      fail(ErrorCode::DomainError, "bad threshold '" + cell + "'");
    }
  }
  return taus;
}

}  // namespace cli_detail

/// Entry point of the `smoothnet` tool. Exit codes: 0 success, 1 data or
/// validation error, 2 usage error.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& log = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"3D point cloud matching with smoothed density value descriptors", "smoothnet"};
  app.require_subcommand(1);
  std::function<void()> action;

  // downsample
  Common ds_c;
  std::string ds_cloud, ds_out;
  double ds_cell = 0;
  auto* ds = app.add_subcommand("downsample", "voxel-grid filter a cloud");
  add_common(*ds, ds_c);
  ds->add_option("--cloud", ds_cloud, "input PLY")->required();
  ds->add_option("--out", ds_out, "output PLY")->required();
  ds->add_option("--cell", ds_cell, "voxel edge in meters (default: downsample_cell)");
  ds->callback([&] {
    action = [&] {
      const auto cfg = resolve_config(ds_c, log);
      const double cell = ds_cell > 0 ? ds_cell : cfg.downsample_cell;
      const auto cloud = voxel_downsample(io::read_ply(ds_cloud), cell);
      io::write_ply(ds_out, cloud);
      out << cloud.size() << " points\n";
    };
  });

  // keypoints
  Common kp_c;
  std::string kp_cloud, kp_out;
  std::size_t kp_count = 5000;
  auto* kp = app.add_subcommand("keypoints", "sample keypoint indices");
  add_common(*kp, kp_c);
  kp->add_option("--cloud", kp_cloud, "input PLY")->required();
  kp->add_option("--out", kp_out, "keypoint index file")->required();
  kp->add_option("--count", kp_count, "number of keypoints (default 5000)");
  kp->callback([&] {
    action = [&] {
      const auto cfg = resolve_config(kp_c, log);
      const auto cloud = io::read_ply(kp_cloud);
      const KdTree index(cloud);
      const auto ids = select_keypoints(cloud, index, kp_count, cfg.keypoint_radius, cfg.keypoint_min_neighbors, kp_c.seed);
      io::write_keypoints(kp_out, ids);
      out << ids.size() << " keypoints\n";
    };
  });

  // describe
  Common de_c;
  std::string de_cloud, de_kp, de_weights, de_out;
  auto* de = app.add_subcommand("describe", "compute descriptors at keypoints");
  add_common(*de, de_c);
  de->add_option("--cloud", de_cloud, "input PLY")->required();
  de->add_option("--keypoints", de_kp, "keypoint index file")->required();
  de->add_option("--weights", de_weights, "network weights")->required();
  de->add_option("--out", de_out, "descriptor file; skipped keypoints go to <out>.skipped")->required();
  de->callback([&] {
    action = [&] {
      const auto cfg = resolve_config(de_c, log);
      const auto cloud = io::read_ply(de_cloud);
      const auto ids = io::read_keypoints(de_kp, cloud.size());
      const auto params = net::load_params(de_weights);
      const KdTree index(cloud);
      const auto d = describe_keypoints(cloud, index, ids, params, cfg, de_c.threads);
      io::write_descriptors(de_out, d.descriptors);
      io::write_file_atomic(de_out + ".skipped", format_index_list(d.skipped));
      out << d.descriptors.count() << " descriptors, " << d.skipped.size() << " skipped\n";
    };
  });

  // match
  Common ma_c;
  std::string ma_p, ma_q, ma_out;
  auto* ma = app.add_subcommand("match", "mutual nearest neighbours in feature space");
  add_common(*ma, ma_c);
  ma->add_option("--desc-p", ma_p, "descriptors of P")->required();
  ma->add_option("--desc-q", ma_q, "descriptors of Q")->required();
  ma->add_option("--out", ma_out, "correspondence file (p q distance per line)")->required();
  ma->callback([&] {
    action = [&] {
      resolve_config(ma_c, log);
      const auto corrs = mutual_correspondences(io::read_descriptors(ma_p), io::read_descriptors(ma_q));
      io::write_file_atomic(ma_out, format_correspondences(corrs));
      out << corrs.size() << " correspondences\n";
    };
  });

  // register
  Common re_c;
  std::string re_cp, re_cq, re_kp, re_kq, re_sp, re_sq, re_corr, re_out;
  auto* re = app.add_subcommand("register", "RANSAC rigid registration of Q onto P");
  add_common(*re, re_c);
  re->add_option("--cloud-p", re_cp, "P cloud")->required();
  re->add_option("--cloud-q", re_cq, "Q cloud")->required();
  re->add_option("--keypoints-p", re_kp, "P keypoint file")->required();
  re->add_option("--keypoints-q", re_kq, "Q keypoint file")->required();
  re->add_option("--skipped-p", re_sp, "indices skipped when describing P");
  re->add_option("--skipped-q", re_sq, "indices skipped when describing Q");
  re->add_option("--corr", re_corr, "correspondence file")->required();
  re->add_option("--out", re_out, "estimated transform (4x4)")->required();
  re->callback([&] {
    action = [&] {
      const auto cfg = resolve_config(re_c, log);
      const auto cp = io::read_ply(re_cp), cq = io::read_ply(re_cq);
      const auto pp = positions(cp, kept_keypoints(re_kp, re_sp, cp.size()));
      const auto pq = positions(cq, kept_keypoints(re_kq, re_sq, cq.size()));
      const auto corrs = parse_correspondences(io::read_file(re_corr));
      RansacParams rp{cfg.ransac_max_iterations, cfg.ransac_inlier_distance, cfg.ransac_sample_size, cfg.ransac_confidence,
                      re_c.seed};
      const auto r = ransac_register(pp, pq, corrs, rp);
      io::write_transform(re_out, r.transform);
      out << r.inliers.size() << " inliers after " << r.iterations << " iterations\n";
    };
  });

  // evaluate
  Common ev_c;
  std::string ev_manifest, ev_weights, ev_out, ev_scene = "synthetic";
  bool ev_oracle = false;
  std::size_t ev_count = 5000;
  auto* ev = app.add_subcommand("evaluate", "inlier ratios and recall over a manifest of fragment pairs");
  add_common(*ev, ev_c);
  ev->add_option("--manifest", ev_manifest, "lines: frag_a.ply frag_b.ply transform.txt")->required();
  auto* w_opt = ev->add_option("--weights", ev_weights, "network weights");
  auto* o_opt = ev->add_flag("--oracle", ev_oracle, "use ground-truth coordinates as descriptors");
  w_opt->excludes(o_opt);
  ev->add_option("--keypoints", ev_count, "keypoints per fragment (default 5000)");
  ev->add_option("--scene", ev_scene, "scene name in the report");
  ev->add_option("--out", ev_out, "report prefix: writes <out>.json and <out>.csv")->required();
  ev->callback([&] {
    if (!ev_oracle && ev_weights.empty()) throw CLI::RequiredError("--weights or --oracle");
    action = [&] {
      const auto cfg = resolve_config(ev_c, log);
      const auto entries = read_manifest(ev_manifest);
      if (entries.empty()) fail(ErrorCode::EmptyManifest, "manifest '" + ev_manifest + "' lists no fragment pairs");
      std::optional<net::NetworkParams> params;
      if (!ev_oracle) params = net::load_params(ev_weights);
      std::vector<PairResult> results(entries.size());
      parallel_chunks(entries.size(), ev_c.threads, [&](std::size_t k) {
        const auto a = load_fragment(entries[k].cloud_a, cfg);
        const auto b = load_fragment(entries[k].cloud_b, cfg);
        const auto t = io::read_transform(entries[k].transform);
        auto e = evaluate_fragments(a, b, t, params ? &*params : nullptr, cfg, ev_count, ev_c.seed + k);
        e.result.scene = ev_scene;
        e.result.frag_a = entries[k].cloud_a.filename().string();
        e.result.frag_b = entries[k].cloud_b.filename().string();
        results[k] = std::move(e.result);
      });
      const auto report = scene_recall(results, cfg.tau2, ev_scene, cfg.tau1);
      io::write_file_atomic(ev_out + ".json", to_json(report).dump(2) + "\n");
      io::write_file_atomic(ev_out + ".csv", pairs_csv({report}));
      out << std::setprecision(6) << "recall " << report.recall << ", mean inlier ratio " << report.mean_inlier_ratio() << '\n';
    };
  });

  // sweep
  Common sw_c;
  std::string sw_pairs, sw_out, sw_taus = "0.01,0.02,0.03,0.04,0.05,0.06,0.07,0.08,0.09,0.1,0.12,0.14,0.16,0.18,0.2";
  auto* sw = app.add_subcommand("sweep", "recall as a function of the inlier-ratio threshold");
  add_common(*sw, sw_c);
  sw->add_option("--pairs", sw_pairs, "per-pair CSV written by evaluate")->required();
  sw->add_option("--taus", sw_taus, "comma-separated thresholds in (0, 1]");
  sw->add_option("--out", sw_out, "sweep CSV")->required();
  sw->callback([&] {
    action = [&] {
      resolve_config(sw_c, log);
      const auto pairs = parse_pairs_csv(io::read_file(sw_pairs));
      const auto taus = parse_taus(sw_taus);
      io::write_file_atomic(sw_out, sweep_csv(recall_sweep(pairs, taus)));
      out << taus.size() << " thresholds\n";
    };
  });

  // train
  Common tr_c;
  std::string tr_manifest, tr_out;
  auto* tr = app.add_subcommand("train", "train the descriptor network");
  add_common(*tr, tr_c);
  tr->add_option("--manifest", tr_manifest, "lines: frag_a.ply frag_b.ply transform.txt")->required();
  tr->add_option("--out-dir", tr_out, "directory for weights, checkpoints and loss.csv")->required();
  tr->callback([&] {
    action = [&] {
      const auto cfg = resolve_config(tr_c, log);
      const auto r = train_from_manifest(cfg, tr_manifest, tr_c.seed, tr_out);
      out << r.log.size() << " iterations, final loss " << std::setprecision(6) << r.log.back().loss << '\n';
    };
  });

  // synth
  Common sy_c;
  std::string sy_out, sy_surface = "heightfield";
  int sy_pairs = 1;
  SyntheticConfig sy_cfg;
  auto* sy = app.add_subcommand("synth", "write synthetic fragment pairs and a manifest");
  add_common(*sy, sy_c);
  sy->add_option("--out-dir", sy_out, "output directory")->required();
  sy->add_option("--pairs", sy_pairs, "number of fragment pairs")->check(CLI::PositiveNumber);
  sy->add_option("--surface", sy_surface, "heightfield or primitives")->check(CLI::IsMember({"heightfield", "primitives"}));
  sy->add_option("--noise", sy_cfg.noise, "Gaussian noise sigma, meters");
  sy->add_option("--overlap", sy_cfg.overlap, "target overlap fraction");
  sy->add_option("--width", sy_cfg.fragment_width, "fragment extent along x, meters");
  sy->add_option("--depth", sy_cfg.fragment_depth, "fragment extent along y, meters");
  sy->add_option("--spacing", sy_cfg.spacing, "sampling pitch, meters");
  sy->add_option("--keep", sy_cfg.keep_fraction, "random density reduction factor");
  sy->callback([&] {
    action = [&] {
      resolve_config(sy_c, log);
      sy_cfg.surface = sy_surface == "primitives" ? SurfaceKind::Primitives : SurfaceKind::HeightField;
      const fs::path dir(sy_out);
      fs::create_directories(dir);
      std::string manifest;
      for (int k = 0; k < sy_pairs; ++k) {
        const auto scene = make_synthetic_scene(sy_c.seed + static_cast<std::uint64_t>(k), sy_cfg);
        std::ostringstream stem;
        stem << "pair_" << std::setw(3) << std::setfill('0') << k;
        io::write_ply(dir / (stem.str() + "_a.ply"), scene.p);
        io::write_ply(dir / (stem.str() + "_b.ply"), scene.q);
        io::write_transform(dir / (stem.str() + "_gt.txt"), scene.t_gt);
        manifest += stem.str() + "_a.ply " + stem.str() + "_b.ply " + stem.str() + "_gt.txt\n";
      }
      io::write_file_atomic(dir / "manifest.txt", manifest);
      out << sy_pairs << " pairs\n";
    };
  });

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    log << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }
  try {
    action();
    return 0;
  } catch (const Error& e) {
    log << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace smoothnet
