#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "smoothnet/error.hpp"
#include "smoothnet/io.hpp"

namespace smoothnet {

/// Every tunable of a run. Defaults reproduce the indoor (0.3 m grid) setup.
struct RunConfig {
  // Input parameterization
  double grid_width = 0.3;                      // W, meters
  int grid_voxels = 16;                         // c, voxels per axis
  double kernel_width = 1.75 * (0.3 / 16) / 2;  // h, meters
  double lrf_radius = std::sqrt(3.0) * 0.3;     // r_LRF, meters
  bool occupancy_grid = false;                  // binary occupancy instead of SDV
  double downsample_cell = 0.0;                 // 0 disables the voxel filter
  double keypoint_radius = 0.5;
  int keypoint_min_neighbors = 10;              // strictly more than this many

  // Network
  int descriptor_dim = 32;
  std::string architecture = "default";
  double init_gain = 0.6;
  double init_bias = 0.01;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.99;

  // Training
  int batch_size = 256;
  int epochs = 20;
  int max_iterations = 0;  // 0: derive from epochs
  int anchors_per_pair = 300;
  double learning_rate = 1e-3;
  double lr_decay = 0.95;
  int lr_decay_steps = 5000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  // Matching / registration / evaluation
  int ransac_max_iterations = 55000;
  double ransac_inlier_distance = 0.1;
  double ransac_confidence = 0.999;
  int ransac_sample_size = 3;
  double tau1 = 0.1;
  double tau2 = 0.05;
  double tau_psi = 0.06;
  double min_overlap = 0.3;
  double min_support_coverage = 0.0;  // training pairs; 0 disables the check

  double voxel_edge() const { return grid_width / grid_voxels; }
  double support_radius() const { return std::sqrt(3.0) / 2.0 * grid_width; }

  /// Throws InvariantViolation naming the first failing constraint.
  void validate() const {
    auto require = [](bool ok, const char* what) {
      if (!ok) fail(ErrorCode::InvariantViolation, what);
    };
    require(grid_width > 0, "grid_width > 0");
    require(grid_voxels >= 2, "grid_voxels >= 2");
    require(kernel_width > 0, "kernel_width > 0");
    require(3 * kernel_width <= grid_width, "3 * kernel_width <= grid_width");
    require(lrf_radius >= support_radius() * (1 - 1e-12), "lrf_radius >= sqrt(3)/2 * grid_width");
    require(descriptor_dim >= 1, "descriptor_dim >= 1");
    require(tau2 > 0 && tau2 <= 1, "0 < tau2 <= 1");
    require(tau1 > 0, "tau1 > 0");
    require(tau_psi > 0, "tau_psi > 0");
    require(min_overlap >= 0 && min_overlap < 1, "0 <= min_overlap < 1");
    require(min_support_coverage >= 0 && min_support_coverage <= 1, "0 <= min_support_coverage <= 1");
    require(downsample_cell >= 0, "downsample_cell >= 0");
    require(keypoint_radius > 0, "keypoint_radius > 0");
    require(keypoint_min_neighbors >= 0, "keypoint_min_neighbors >= 0");
    require(init_gain > 0, "init_gain > 0");
    require(bn_epsilon > 0, "bn_epsilon > 0");
    require(bn_momentum >= 0 && bn_momentum < 1, "0 <= bn_momentum < 1");
    require(batch_size >= 2, "batch_size >= 2");
    require(epochs >= 1, "epochs >= 1");
    require(max_iterations >= 0, "max_iterations >= 0");
    require(anchors_per_pair >= 1, "anchors_per_pair >= 1");
    require(learning_rate > 0, "learning_rate > 0");
    require(lr_decay > 0 && lr_decay <= 1, "0 < lr_decay <= 1");
    require(lr_decay_steps >= 1, "lr_decay_steps >= 1");
    require(adam_beta1 >= 0 && adam_beta1 < 1, "0 <= adam_beta1 < 1");
    require(adam_beta2 >= 0 && adam_beta2 < 1, "0 <= adam_beta2 < 1");
    require(adam_epsilon > 0, "adam_epsilon > 0");
    require(ransac_max_iterations >= 1, "ransac_max_iterations >= 1");
    require(ransac_inlier_distance > 0, "ransac_inlier_distance > 0");
    require(ransac_confidence > 0 && ransac_confidence < 1, "0 < ransac_confidence < 1");
    require(ransac_sample_size >= 3, "ransac_sample_size >= 3");
  }

  /// Outdoor profile: 1 m grid on clouds voxel-filtered at 2 cm.
  static RunConfig outdoor() {
    RunConfig c;
    c.grid_width = 1.0;
    c.kernel_width = 1.75 * (1.0 / 16) / 2;
    c.lrf_radius = std::sqrt(3.0) * 1.0;
    c.downsample_cell = 0.02;
    return c;
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace config_detail {

// One entry per key: how to print it and how to parse it into a config.
struct ConfigField {
  std::function<std::string(const RunConfig&)> get;
  std::function<bool(RunConfig&, std::string_view)> set;
};

inline std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

template <typename T>
ConfigField make_field(T RunConfig::*member) {
  ConfigField f;
  f.get = [member](const RunConfig& c) {
    if constexpr (std::is_same_v<T, double>) {
      return format_double(c.*member);
    } else if constexpr (std::is_same_v<T, bool>) {
      return std::string(c.*member ? "true" : "false");
    } else if constexpr (std::is_same_v<T, std::string>) {
      return c.*member;
    } else {
      return std::to_string(c.*member);
    }
  };
  f.set = [member](RunConfig& c, std::string_view v) {
    if constexpr (std::is_same_v<T, double>) {
      double out = 0;
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
      if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) return false;
      c.*member = out;
      return true;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (v == "true" || v == "1") {
        c.*member = true;
      } else if (v == "false" || v == "0") {
        c.*member = false;
      } else {
        return false;
      }
      return true;
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (v.empty()) return false;
      c.*member = std::string(v);
      return true;
    } else {
      T out{};
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
      if (ec != std::errc() || p != v.data() + v.size()) return false;
      c.*member = out;
      return true;
    }
  };
  return f;
}

inline const std::vector<std::pair<std::string, ConfigField>>& config_fields() {
  static const std::vector<std::pair<std::string, ConfigField>> fields = {
      {"grid_width", make_field(&RunConfig::grid_width)},
      {"grid_voxels", make_field(&RunConfig::grid_voxels)},
      {"kernel_width", make_field(&RunConfig::kernel_width)},
      {"lrf_radius", make_field(&RunConfig::lrf_radius)},
      {"occupancy_grid", make_field(&RunConfig::occupancy_grid)},
      {"downsample_cell", make_field(&RunConfig::downsample_cell)},
      {"keypoint_radius", make_field(&RunConfig::keypoint_radius)},
      {"keypoint_min_neighbors", make_field(&RunConfig::keypoint_min_neighbors)},
      {"descriptor_dim", make_field(&RunConfig::descriptor_dim)},
      {"architecture", make_field(&RunConfig::architecture)},
      {"init_gain", make_field(&RunConfig::init_gain)},
      {"init_bias", make_field(&RunConfig::init_bias)},
      {"bn_epsilon", make_field(&RunConfig::bn_epsilon)},
      {"bn_momentum", make_field(&RunConfig::bn_momentum)},
      {"batch_size", make_field(&RunConfig::batch_size)},
      {"epochs", make_field(&RunConfig::epochs)},
      {"max_iterations", make_field(&RunConfig::max_iterations)},
      {"anchors_per_pair", make_field(&RunConfig::anchors_per_pair)},
      {"learning_rate", make_field(&RunConfig::learning_rate)},
      {"lr_decay", make_field(&RunConfig::lr_decay)},
      {"lr_decay_steps", make_field(&RunConfig::lr_decay_steps)},
      {"adam_beta1", make_field(&RunConfig::adam_beta1)},
      {"adam_beta2", make_field(&RunConfig::adam_beta2)},
      {"adam_epsilon", make_field(&RunConfig::adam_epsilon)},
      {"ransac_max_iterations", make_field(&RunConfig::ransac_max_iterations)},
      {"ransac_inlier_distance", make_field(&RunConfig::ransac_inlier_distance)},
      {"ransac_confidence", make_field(&RunConfig::ransac_confidence)},
      {"ransac_sample_size", make_field(&RunConfig::ransac_sample_size)},
      {"tau1", make_field(&RunConfig::tau1)},
      {"tau2", make_field(&RunConfig::tau2)},
      {"tau_psi", make_field(&RunConfig::tau_psi)},
      {"min_overlap", make_field(&RunConfig::min_overlap)},
      {"min_support_coverage", make_field(&RunConfig::min_support_coverage)},
  };
  return fields;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace config_detail

/// Applies one `key = value` override. Unknown keys raise UnknownKey.
inline void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& [name, field] : config_detail::config_fields()) {
    if (name == key) {
      if (!field.set(cfg, value)) {
        fail(ErrorCode::InvariantViolation, "cannot parse value '" + std::string(value) + "' for key '" + name + "'");
      }
      return;
    }
  }
  fail(ErrorCode::UnknownKey, "unknown config key '" + std::string(key) + "'");
}

/// Parses `key = value` lines ('#' starts a comment). Keys not present keep
/// their defaults, except that kernel_width and lrf_radius follow
/// grid_width/grid_voxels when left unset.
inline RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      fail(ErrorCode::InvariantViolation, "config line " + std::to_string(line_no) + " lacks '='");
    }
    const auto key = config_detail::trim(line.substr(0, eq));
    const auto value = config_detail::trim(line.substr(eq + 1));
    set_config_value(cfg, key, value);
    seen.insert(std::string(key));
  }
  if (!seen.contains("kernel_width")) cfg.kernel_width = 1.75 * cfg.voxel_edge() / 2;
  if (!seen.contains("lrf_radius")) cfg.lrf_radius = std::sqrt(3.0) * cfg.grid_width;
  cfg.validate();
  return cfg;
}

inline std::string format_config(const RunConfig& cfg) {
  std::string out = "# smoothnet run configuration\n";
  for (const auto& [name, field] : config_detail::config_fields()) out += name + " = " + field.get(cfg) + "\n";
  return out;
}

inline RunConfig load_config(const std::filesystem::path& path) { return parse_config(io::read_file(path)); }

inline void save_config(const std::filesystem::path& path, const RunConfig& cfg) {
  cfg.validate();
  io::write_file_atomic(path, format_config(cfg));
}

}  // namespace smoothnet
