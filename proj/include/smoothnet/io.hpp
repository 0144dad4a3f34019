#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <unistd.h>

#include "smoothnet/core.hpp"

namespace smoothnet::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

// ---------------------------------------------------------------------------
// Raw file helpers

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::FileError, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::FileError, "cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::FileError, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    fail(ErrorCode::FileError, "cannot rename onto '" + path.string() + "'");
  }
}

class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&value);
    buf_.append(p, sizeof(T));
  }
  void put_bytes(std::string_view s) { buf_.append(s); }
  const std::string& bytes() const noexcept { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data, std::size_t start = 0) : data_(data), pos_(start) {}

  template <typename T>
  T get(std::string_view what) {
    static_assert(std::is_trivially_copyable_v<T>);
    if (data_.size() - pos_ < sizeof(T)) {
      fail(ErrorCode::TruncatedPayload, "need " + std::to_string(sizeof(T)) + " bytes for " + std::string(what) +
                                            " at byte offset " + std::to_string(pos_) + ", file has " +
                                            std::to_string(data_.size()));
    }
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string_view get_bytes(std::size_t n, std::string_view what) {
    if (data_.size() - pos_ < n) {
      fail(ErrorCode::TruncatedPayload,
           std::string(what) + " truncated at byte offset " + std::to_string(pos_));
    }
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  std::string_view data_;
  std::size_t pos_;
};

// ---------------------------------------------------------------------------
// PLY

enum class PlyEncoding { Ascii, BinaryLittleEndian };

namespace detail {

enum class PlyType { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

inline std::optional<PlyType> parse_ply_type(std::string_view s) {
  if (s == "char" || s == "int8") return PlyType::Int8;
  if (s == "uchar" || s == "uint8") return PlyType::UInt8;
  if (s == "short" || s == "int16") return PlyType::Int16;
  if (s == "ushort" || s == "uint16") return PlyType::UInt16;
  if (s == "int" || s == "int32") return PlyType::Int32;
  if (s == "uint" || s == "uint32") return PlyType::UInt32;
  if (s == "float" || s == "float32") return PlyType::Float32;
  if (s == "double" || s == "float64") return PlyType::Float64;
  return std::nullopt;
}

inline std::size_t ply_type_size(PlyType t) {
  switch (t) {
    case PlyType::Int8:
    case PlyType::UInt8: return 1;
    case PlyType::Int16:
    case PlyType::UInt16: return 2;
    case PlyType::Int32:
    case PlyType::UInt32:
    case PlyType::Float32: return 4;
    case PlyType::Float64: return 8;
  }
  return 0;
}

inline double read_binary_scalar(ByteReader& r, PlyType t) {
  switch (t) {
    case PlyType::Int8: return r.get<std::int8_t>("int8");
    case PlyType::UInt8: return r.get<std::uint8_t>("uint8");
    case PlyType::Int16: return r.get<std::int16_t>("int16");
    case PlyType::UInt16: return r.get<std::uint16_t>("uint16");
    case PlyType::Int32: return r.get<std::int32_t>("int32");
    case PlyType::UInt32: return r.get<std::uint32_t>("uint32");
    case PlyType::Float32: return r.get<float>("float32");
    case PlyType::Float64: return r.get<double>("float64");
  }
  return 0.0;
}

struct PlyProperty {
  std::string name;
  PlyType type = PlyType::Float32;
  bool is_list = false;
  PlyType count_type = PlyType::UInt8;
};

struct PlyElement {
  std::string name;
  std::uint64_t count = 0;
  std::vector<PlyProperty> properties;
};

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

inline bool parse_double(std::string_view s, double& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

template <typename Int>
bool parse_uint(std::string_view s, Int& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace detail

/// Reads the vertex x/y/z of an ascii or binary little-endian PLY file.
inline PointCloud parse_ply(std::string_view data) {
  using namespace detail;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  auto next_line = [&](std::string_view& line) -> bool {
    if (pos >= data.size()) return false;
    auto nl = data.find('\n', pos);
    if (nl == std::string_view::npos) nl = data.size();
    line = data.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    pos = std::min(nl + 1, data.size());
    ++line_no;
    return true;
  };
  auto header_error = [&](const std::string& what) {
    fail(ErrorCode::MalformedHeader, what + " (header line " + std::to_string(line_no) + ")");
  };

  std::string_view line;
  if (!next_line(line) || line != "ply") header_error("missing 'ply' signature");

  std::optional<PlyEncoding> encoding;
  std::vector<PlyElement> elements;
  bool ended = false;
  while (next_line(line)) {
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok[0] == "comment" || tok[0] == "obj_info") continue;
    if (tok[0] == "format") {
      if (tok.size() != 3) header_error("bad format line");
      if (tok[1] == "ascii") {
        encoding = PlyEncoding::Ascii;
      } else if (tok[1] == "binary_little_endian") {
        encoding = PlyEncoding::BinaryLittleEndian;
      } else if (tok[1] == "binary_big_endian") {
        fail(ErrorCode::UnsupportedEncoding, "binary_big_endian PLY (header line " + std::to_string(line_no) + ")");
      } else {
        header_error("unknown format '" + std::string(tok[1]) + "'");
      }
    } else if (tok[0] == "element") {
      if (tok.size() != 3) header_error("bad element line");
      PlyElement e;
      e.name = std::string(tok[1]);
      if (!parse_uint(tok[2], e.count)) header_error("bad element count");
      elements.push_back(std::move(e));
    } else if (tok[0] == "property") {
      if (elements.empty()) header_error("property before any element");
      PlyProperty p;
      if (tok.size() == 5 && tok[1] == "list") {
        auto ct = parse_ply_type(tok[2]);
        auto it = parse_ply_type(tok[3]);
        if (!ct || !it) header_error("bad list property types");
        if (*ct == PlyType::Float32 || *ct == PlyType::Float64) header_error("list count must be integral");
        p.is_list = true;
        p.count_type = *ct;
        p.type = *it;
        p.name = std::string(tok[4]);
      } else if (tok.size() == 3) {
        auto t = parse_ply_type(tok[1]);
        if (!t) header_error("unknown property type '" + std::string(tok[1]) + "'");
        p.type = *t;
        p.name = std::string(tok[2]);
      } else {
        header_error("bad property line");
      }
      elements.back().properties.push_back(std::move(p));
    } else if (tok[0] == "end_header") {
      ended = true;
      break;
    } else {
      header_error("unexpected keyword '" + std::string(tok[0]) + "'");
    }
  }
  if (!ended) header_error("missing end_header");
  if (!encoding) header_error("missing format line");

  const PlyElement* vertex = nullptr;
  for (const auto& e : elements) {
    if (e.name == "vertex") vertex = &e;
  }
  if (vertex == nullptr) fail(ErrorCode::MissingCoordinateProperty, "no vertex element");
  std::array<int, 3> xyz{-1, -1, -1};
  for (std::size_t i = 0; i < vertex->properties.size(); ++i) {
    const auto& p = vertex->properties[i];
    if (p.is_list) continue;
    if (p.name == "x") xyz[0] = static_cast<int>(i);
    if (p.name == "y") xyz[1] = static_cast<int>(i);
    if (p.name == "z") xyz[2] = static_cast<int>(i);
  }
  for (int a = 0; a < 3; ++a) {
    if (xyz[a] < 0) {
      fail(ErrorCode::MissingCoordinateProperty, std::string("vertex element lacks property '") + "xyz"[a] + "'");
    }
  }

  std::vector<Vec3> points;
  const std::size_t payload_start = pos;
  if (*encoding == PlyEncoding::BinaryLittleEndian) {
    ByteReader r(data, payload_start);
    for (const auto& e : elements) {
      const bool is_vertex = &e == vertex;
      if (e.properties.empty()) continue;
      if (is_vertex) {
        std::size_t min_stride = 0;
        for (const auto& p : e.properties) min_stride += p.is_list ? ply_type_size(p.count_type) : ply_type_size(p.type);
        if (min_stride > 0 && e.count > r.remaining() / min_stride) {
          fail(ErrorCode::TruncatedPayload, "header declares " + std::to_string(e.count) + " vertices but only " +
                                                std::to_string(r.remaining()) + " payload bytes remain at byte offset " +
                                                std::to_string(r.position()));
        }
        points.reserve(static_cast<std::size_t>(e.count));
      }
      for (std::uint64_t k = 0; k < e.count; ++k) {
        Vec3 pt = Vec3::Zero();
        for (std::size_t pi = 0; pi < e.properties.size(); ++pi) {
          const auto& p = e.properties[pi];
          if (p.is_list) {
            const double n = read_binary_scalar(r, p.count_type);
            if (n < 0) fail(ErrorCode::TruncatedPayload, "negative list length at byte offset " + std::to_string(r.position()));
            r.get_bytes(static_cast<std::size_t>(n) * ply_type_size(p.type), "list payload");
            continue;
          }
          const double v = read_binary_scalar(r, p.type);
          if (is_vertex) {
            for (int a = 0; a < 3; ++a) {
              if (static_cast<int>(pi) == xyz[a]) pt[a] = v;
            }
          }
        }
        if (is_vertex) {
          if (!pt.allFinite()) {
            fail(ErrorCode::InvariantViolation, "non-finite vertex " + std::to_string(k) + " before byte offset " +
                                                    std::to_string(r.position()));
          }
          points.push_back(pt);
        }
      }
      if (is_vertex) break;
    }
  } else {
    for (const auto& e : elements) {
      const bool is_vertex = &e == vertex;
      if (e.properties.empty()) continue;
      for (std::uint64_t k = 0; k < e.count; ++k) {
        std::string_view row;
        do {
          if (!next_line(row)) {
            fail(ErrorCode::TruncatedPayload, "element '" + e.name + "' declares " + std::to_string(e.count) +
                                                  " rows but the file ends at line " + std::to_string(line_no));
          }
        } while (split_ws(row).empty());
        const auto tok = split_ws(row);
        std::size_t t = 0;
        Vec3 pt = Vec3::Zero();
        auto bad_row = [&] {
          fail(ErrorCode::TruncatedPayload, "malformed or short row at line " + std::to_string(line_no));
        };
        for (std::size_t pi = 0; pi < e.properties.size(); ++pi) {
          const auto& p = e.properties[pi];
          if (t >= tok.size()) bad_row();
          if (p.is_list) {
            std::size_t n = 0;
            if (!parse_uint(tok[t], n)) bad_row();
            if (n > tok.size() - t - 1) bad_row();
            t += 1 + n;
            continue;
          }
          double v = 0;
          if (!parse_double(tok[t], v)) bad_row();
          if (p.type == PlyType::Float32) v = static_cast<float>(v);  // same value a binary file would carry
          ++t;
          if (is_vertex) {
            for (int a = 0; a < 3; ++a) {
              if (static_cast<int>(pi) == xyz[a]) pt[a] = v;
            }
          }
        }
        if (is_vertex) {
          if (!pt.allFinite()) fail(ErrorCode::InvariantViolation, "non-finite vertex at line " + std::to_string(line_no));
          points.push_back(pt);
        }
      }
      if (is_vertex) break;
    }
  }
  return PointCloud(std::move(points));
}

inline PointCloud read_ply(const std::filesystem::path& path) { return parse_ply(read_file(path)); }

inline std::string format_ply(const PointCloud& cloud, PlyEncoding encoding = PlyEncoding::BinaryLittleEndian) {
  std::ostringstream header;
  header << "ply\nformat " << (encoding == PlyEncoding::Ascii ? "ascii" : "binary_little_endian") << " 1.0\n"
         << "element vertex " << cloud.size() << "\n"
         << "property float x\nproperty float y\nproperty float z\nend_header\n";
  std::string out = header.str();
  if (encoding == PlyEncoding::Ascii) {
    std::ostringstream body;
    body << std::setprecision(9);
    for (const auto& p : cloud) {
      body << static_cast<float>(p.x()) << ' ' << static_cast<float>(p.y()) << ' ' << static_cast<float>(p.z()) << '\n';
    }
    out += body.str();
  } else {
    ByteWriter w;
    for (const auto& p : cloud) {
      for (int a = 0; a < 3; ++a) w.put(static_cast<float>(p[a]));
    }
    out += w.bytes();
  }
  return out;
}

inline void write_ply(const std::filesystem::path& path, const PointCloud& cloud,
                      PlyEncoding encoding = PlyEncoding::BinaryLittleEndian) {
  write_file_atomic(path, format_ply(cloud, encoding));
}

// ---------------------------------------------------------------------------
// Descriptor files: "SDVD", u32 version, u32 count, u32 dim, count*dim f32.

/// Row-major matrix of 32-bit descriptors.
struct DescriptorSet {
  std::size_t dim = 0;
  std::vector<float> values;

  DescriptorSet() = default;
  explicit DescriptorSet(std::size_t d) : dim(d) {}

  std::size_t count() const noexcept { return dim == 0 ? 0 : values.size() / dim; }
  std::span<const float> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
  std::span<float> row(std::size_t i) { return {values.data() + i * dim, dim}; }

  void push_back(std::span<const float> r) {
    if (r.size() != dim) {
      fail(ErrorCode::DimMismatch, "row has " + std::to_string(r.size()) + " entries, expected " + std::to_string(dim));
    }
    values.insert(values.end(), r.begin(), r.end());
  }

  friend bool operator==(const DescriptorSet&, const DescriptorSet&) = default;
};

inline constexpr std::uint32_t kDescriptorVersion = 1;

inline std::string format_descriptors(const DescriptorSet& d) {
  if (d.dim == 0 && !d.values.empty()) fail(ErrorCode::DimMismatch, "descriptors with dim 0");
  if (d.dim != 0 && d.values.size() % d.dim != 0) fail(ErrorCode::DimMismatch, "ragged descriptor payload");
  ByteWriter w;
  w.put_bytes("SDVD");
  w.put(kDescriptorVersion);
  w.put(static_cast<std::uint32_t>(d.count()));
  w.put(static_cast<std::uint32_t>(d.dim));
  for (float v : d.values) w.put(v);
  return w.bytes();
}

inline DescriptorSet parse_descriptors(std::string_view data) {
  ByteReader r(data);
  if (r.remaining() < 4 || r.get_bytes(4, "magic") != "SDVD") fail(ErrorCode::BadMagic, "descriptor file lacks 'SDVD' magic at byte offset 0");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kDescriptorVersion) {
    fail(ErrorCode::VersionMismatch, "descriptor file version " + std::to_string(version) + " at byte offset 4");
  }
  const auto count = r.get<std::uint32_t>("count");
  const auto dim = r.get<std::uint32_t>("dim");
  const auto need = static_cast<unsigned __int128>(count) * dim * 4;
  if (r.remaining() < need) {
    fail(ErrorCode::TruncatedPayload, "payload needs " + std::to_string(static_cast<std::uint64_t>(need)) + " bytes from byte offset 16, have " +
                                          std::to_string(r.remaining()));
  }
  if (r.remaining() > need) {
    fail(ErrorCode::DimMismatch, "payload has " + std::to_string(r.remaining() - static_cast<std::size_t>(need)) +
                                     " trailing bytes after count*dim floats (byte offset " +
                                     std::to_string(16 + static_cast<std::size_t>(need)) + ")");
  }
  DescriptorSet d(dim);
  d.values.resize(static_cast<std::size_t>(count) * dim);
  if (!d.values.empty()) std::memcpy(d.values.data(), data.data() + 16, d.values.size() * sizeof(float));
  return d;
}

inline void write_descriptors(const std::filesystem::path& path, const DescriptorSet& d) {
  write_file_atomic(path, format_descriptors(d));
}

inline DescriptorSet read_descriptors(const std::filesystem::path& path) { return parse_descriptors(read_file(path)); }

// ---------------------------------------------------------------------------
// Keypoint index files: one decimal index per line.

inline std::vector<std::size_t> parse_keypoints(std::string_view text, std::optional<std::size_t> cloud_size = std::nullopt) {
  std::vector<std::size_t> out;
  std::unordered_set<std::size_t> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    const auto tok = detail::split_ws(line);
    if (tok.empty()) continue;
    std::size_t idx = 0;
    if (tok.size() != 1 || !detail::parse_uint(tok[0], idx)) {
      fail(ErrorCode::InvariantViolation, "keypoint line " + std::to_string(line_no) + " is not a single index");
    }
    if (cloud_size && idx >= *cloud_size) {
      fail(ErrorCode::InvariantViolation, "keypoint " + std::to_string(idx) + " at line " + std::to_string(line_no) +
                                              " exceeds cloud size " + std::to_string(*cloud_size));
    }
    if (!seen.insert(idx).second) {
      fail(ErrorCode::InvariantViolation, "duplicate keypoint " + std::to_string(idx) + " at line " + std::to_string(line_no));
    }
    out.push_back(idx);
  }
  return out;
}

inline std::string format_keypoints(std::span<const std::size_t> indices) {
  std::string out;
  for (auto i : indices) {
    out += std::to_string(i);
    out += '\n';
  }
  return out;
}

inline std::vector<std::size_t> read_keypoints(const std::filesystem::path& path,
                                               std::optional<std::size_t> cloud_size = std::nullopt) {
  return parse_keypoints(read_file(path), cloud_size);
}

inline void write_keypoints(const std::filesystem::path& path, std::span<const std::size_t> indices) {
  write_file_atomic(path, format_keypoints(indices));
}

// ---------------------------------------------------------------------------
// Transform files: 4x4 row-major homogeneous matrix, whitespace separated.

inline std::string format_transform(const RigidTransform& t) {
  std::ostringstream out;
  out << std::setprecision(17);
  const Eigen::Matrix4d m = t.matrix();
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) out << m(r, c) << (c == 3 ? '\n' : ' ');
  }
  return out.str();
}

/// Parses a 4x4 matrix. A rotation block within 1e-4 of orthonormal is
/// projected onto SO(3) (text files often carry 6-8 significant digits).
inline RigidTransform parse_transform(std::string_view text) {
  const auto tok = detail::split_ws(text);
  if (tok.size() != 16) {
    fail(ErrorCode::InvariantViolation, "transform file has " + std::to_string(tok.size()) + " numbers, expected 16");
  }
  Eigen::Matrix4d m;
  for (int i = 0; i < 16; ++i) {
    double v = 0;
    if (!detail::parse_double(tok[static_cast<std::size_t>(i)], v) || !std::isfinite(v)) {
      fail(ErrorCode::InvariantViolation, "transform entry " + std::to_string(i) + " is not a finite number");
    }
    m(i / 4, i % 4) = v;
  }
  if ((m.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-9) {
    fail(ErrorCode::InvariantViolation, "transform last row must be 0 0 0 1");
  }
  RigidTransform t;
  t.rotation = m.topLeftCorner<3, 3>();
  t.translation = m.topRightCorner<3, 1>();
  if (!t.is_valid(1e-9)) {
    if (!t.is_valid(1e-4)) fail(ErrorCode::InvariantViolation, "transform rotation block is not a proper rotation");
    Eigen::JacobiSVD<Mat3> svd(t.rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
    t.rotation = svd.matrixU() * svd.matrixV().transpose();
  }
  return t;
}

inline RigidTransform read_transform(const std::filesystem::path& path) { return parse_transform(read_file(path)); }

inline void write_transform(const std::filesystem::path& path, const RigidTransform& t) {
  write_file_atomic(path, format_transform(t));
}

}  // namespace smoothnet::io
