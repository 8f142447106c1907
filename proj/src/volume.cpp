#include "depthseq/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "depthseq/errors.hpp"

namespace depthseq {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr double kUnitTol = 1e-6;

template <typename T>
void append_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> raw;
  std::memcpy(raw.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(raw.begin(), raw.end());
  }
  out.append(raw.data(), raw.size());
}

template <typename T>
T read_le(const char* p) {
  std::array<char, sizeof(T)> raw;
  std::memcpy(raw.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(raw.begin(), raw.end());
  }
  T value;
  std::memcpy(&value, raw.data(), sizeof(T));
  return value;
}

std::string header_line(const Geometry& g, const char* dtype) {
  ordered_json h;
  h["magic"] = kVolumeMagic;
  h["dims"] = {g.dims[0], g.dims[1], g.dims[2]};
  h["spacing"] = {g.spacing[0], g.spacing[1], g.spacing[2]};
  h["origin"] = {g.origin[0], g.origin[1], g.origin[2]};
  h["row_dir"] = {g.row_dir[0], g.row_dir[1], g.row_dir[2]};
  h["col_dir"] = {g.col_dir[0], g.col_dir[1], g.col_dir[2]};
  h["dtype"] = dtype;
  return h.dump() + "\n";
}

Vec3 read_vec3(const ordered_json& h, const char* key) {
  const auto& a = h.at(key);
  if (!a.is_array() || a.size() != 3) throw ValidationError("malformed header: bad " + std::string(key));
  Vec3 v;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!a[i].is_number()) throw ValidationError("malformed header: bad " + std::string(key));
    v[i] = a[i].get<double>();
  }
  return v;
}

struct Parsed {
  Geometry geometry;
  std::string dtype;
  std::size_t payload_offset = 0;
};

Parsed parse_header(const std::string& bytes) {
  const auto eol = bytes.find('\n');
  if (eol == std::string::npos) throw ValidationError("malformed header: missing newline");
  ordered_json h;
  try {
    h = ordered_json::parse(bytes.substr(0, eol));
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("malformed header: invalid JSON");
  }
  if (!h.is_object() || !h.contains("magic") || h["magic"] != kVolumeMagic) {
    throw ValidationError("malformed header: bad magic");
  }
  Parsed p;
  try {
    const auto& d = h.at("dims");
    if (!d.is_array() || d.size() != 3) throw ValidationError("malformed header: bad dims");
    for (std::size_t i = 0; i < 3; ++i) {
      if (!d[i].is_number_integer() || d[i].get<long long>() <= 0) {
        throw ValidationError("malformed header: bad dims");
      }
      p.geometry.dims[i] = d[i].get<std::size_t>();
    }
    p.geometry.spacing = read_vec3(h, "spacing");
    p.geometry.origin = read_vec3(h, "origin");
    p.geometry.row_dir = read_vec3(h, "row_dir");
    p.geometry.col_dir = read_vec3(h, "col_dir");
    p.dtype = h.at("dtype").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("malformed header: missing key");
  }
  if (p.dtype != "f32le" && p.dtype != "u8") throw ValidationError("malformed header: bad dtype");
  p.payload_offset = eol + 1;
  return p;
}

void check_payload(const Parsed& p, const std::string& bytes, std::size_t elem_size) {
  const std::size_t expected = p.geometry.voxel_count() * elem_size;
  if (bytes.size() - p.payload_offset != expected) throw ValidationError("payload size mismatch");
}

void check_geometry(const Geometry& g) {
  const auto problems = validate(g);
  if (!problems.empty()) throw ValidationError("invalid geometry: " + problems.front());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("cannot write " + path.string());
}

std::string encode_u8(const std::vector<std::uint8_t>& data, const Dims& dims, const Geometry& g) {
  Geometry h = g;
  h.dims = dims;
  std::string out = header_line(h, "u8");
  out.append(reinterpret_cast<const char*>(data.data()), data.size());
  return out;
}

std::vector<std::uint8_t> decode_u8(const std::filesystem::path& path, Geometry* geometry) {
  const std::string bytes = read_file(path);
  const Parsed p = parse_header(bytes);
  if (p.dtype != "u8") throw ValidationError("malformed header: expected dtype u8");
  check_payload(p, bytes, 1);
  if (geometry) *geometry = p.geometry;
  return {bytes.begin() + static_cast<std::ptrdiff_t>(p.payload_offset), bytes.end()};
}

}  // namespace

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

Vec3 Geometry::world(std::size_t i, std::size_t j, std::size_t k) const {
  const Vec3 n = slice_dir();
  const double u = static_cast<double>(i) * spacing[0];
  const double v = static_cast<double>(j) * spacing[1];
  const double w = static_cast<double>(k) * spacing[2];
  Vec3 p;
  for (int a = 0; a < 3; ++a) p[a] = origin[a] + u * row_dir[a] + v * col_dir[a] + w * n[a];
  return p;
}

std::size_t BinaryMask::count() const {
  std::size_t n = 0;
  for (auto b : bits) n += (b != 0);
  return n;
}

std::vector<std::string> validate(const Geometry& g) {
  std::vector<std::string> out;
  if (g.dims[0] == 0 || g.dims[1] == 0 || g.dims[2] == 0) out.emplace_back("non-positive dims");
  if (!(g.spacing[0] > 0.0 && g.spacing[1] > 0.0 && g.spacing[2] > 0.0)) {
    out.emplace_back("non-positive spacing");
  }
  if (!(std::abs(norm(g.row_dir) - 1.0) <= kUnitTol)) out.emplace_back("row_dir not unit length");
  if (!(std::abs(norm(g.col_dir) - 1.0) <= kUnitTol)) out.emplace_back("col_dir not unit length");
  if (!(std::abs(dot(g.row_dir, g.col_dir)) <= kUnitTol)) {
    out.emplace_back("row_dir and col_dir not orthogonal");
  }
  return out;
}

std::vector<std::string> validate(const Volume& v) {
  auto out = validate(v.geometry);
  if (v.voxels.size() != v.geometry.voxel_count()) out.emplace_back("voxel count mismatch");
  return out;
}

std::string encode_volume(const Volume& v) {
  std::string out = header_line(v.geometry, "f32le");
  out.reserve(out.size() + v.voxels.size() * 4);
  for (float x : v.voxels) append_le(out, x);
  return out;
}

Volume decode_volume(const std::string& bytes) {
  const Parsed p = parse_header(bytes);
  if (p.dtype != "f32le") throw ValidationError("malformed header: expected dtype f32le");
  check_payload(p, bytes, 4);
  check_geometry(p.geometry);
  Volume v;
  v.geometry = p.geometry;
  v.voxels.resize(p.geometry.voxel_count());
  const char* src = bytes.data() + p.payload_offset;
  for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = read_le<float>(src + 4 * i);
  return v;
}

Volume load_volume(const std::filesystem::path& path) { return decode_volume(read_file(path)); }

void save_volume(const Volume& v, const std::filesystem::path& path) {
  const auto problems = validate(v);
  if (!problems.empty()) throw ValidationError("invalid volume: " + problems.front());
  write_file(path, encode_volume(v));
}

void save_mask(const BinaryMask& m, const Geometry& g, const std::filesystem::path& path) {
  if (m.dims != g.dims) throw ValidationError("mask dims do not match geometry");
  write_file(path, encode_u8(m.bits, m.dims, g));
}

BinaryMask load_mask(const std::filesystem::path& path, Geometry* geometry) {
  Geometry g;
  BinaryMask m;
  m.bits = decode_u8(path, &g);
  m.dims = g.dims;
  for (auto b : m.bits) {
    if (b > 1) throw ValidationError("binary mask holds values other than 0/1");
  }
  if (geometry) *geometry = g;
  return m;
}

void save_label_mask(const LabelMask& m, const Geometry& g, const std::filesystem::path& path) {
  if (m.dims != g.dims) throw ValidationError("mask dims do not match geometry");
  write_file(path, encode_u8(m.labels, m.dims, g));
}

LabelMask load_label_mask(const std::filesystem::path& path, Geometry* geometry) {
  Geometry g;
  LabelMask m;
  m.labels = decode_u8(path, &g);
  m.dims = g.dims;
  for (auto b : m.labels) {
    if (b > 8) throw ValidationError("label mask holds values outside 0..8");
  }
  if (geometry) *geometry = g;
  return m;
}

}  // namespace depthseq
