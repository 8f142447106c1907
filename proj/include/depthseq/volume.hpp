#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace depthseq {

using Vec3 = std::array<double, 3>;
// (H, W, D): extent along row_dir, col_dir and the slice normal.
using Dims = std::array<std::size_t, 3>;

double dot(const Vec3& a, const Vec3& b);
Vec3 cross(const Vec3& a, const Vec3& b);
double norm(const Vec3& a);

// Grid placement shared by volumes and the masks derived from them.
// Voxel (i, j, k) lives at origin + i*sx*row_dir + j*sy*col_dir + k*sz*(row_dir x col_dir).
struct Geometry {
  Dims dims{0, 0, 0};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  Vec3 row_dir{1.0, 0.0, 0.0};
  Vec3 col_dir{0.0, 1.0, 0.0};

  std::size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t slice_size() const { return dims[0] * dims[1]; }
  // x-fastest, z slowest.
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
    return i + dims[0] * (j + dims[1] * k);
  }
  Vec3 slice_dir() const { return cross(row_dir, col_dir); }
  Vec3 world(std::size_t i, std::size_t j, std::size_t k) const;
  double voxel_volume() const { return spacing[0] * spacing[1] * spacing[2]; }

  bool operator==(const Geometry&) const = default;
};

// CT intensities in Hounsfield units.
struct Volume {
  Geometry geometry;
  std::vector<float> voxels;

  Volume() = default;
  explicit Volume(Geometry g, float fill = 0.0f)
      : geometry(g), voxels(g.voxel_count(), fill) {}

  const Dims& dims() const { return geometry.dims; }
  float& at(std::size_t i, std::size_t j, std::size_t k) { return voxels[geometry.index(i, j, k)]; }
  float at(std::size_t i, std::size_t j, std::size_t k) const {
    return voxels[geometry.index(i, j, k)];
  }

  bool operator==(const Volume&) const = default;
};

struct BinaryMask {
  Dims dims{0, 0, 0};
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  explicit BinaryMask(Dims d) : dims(d), bits(d[0] * d[1] * d[2], 0) {}

  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
    return i + dims[0] * (j + dims[1] * k);
  }
  bool test(std::size_t i, std::size_t j, std::size_t k) const { return bits[index(i, j, k)] != 0; }
  void set(std::size_t i, std::size_t j, std::size_t k, bool v = true) {
    bits[index(i, j, k)] = v ? 1 : 0;
  }
  std::size_t count() const;

  bool operator==(const BinaryMask&) const = default;
};

// Segment labels: 0 background, 1-4 left cervical/petrous/cavernous/supraclinoid,
// 5-8 right likewise.
struct LabelMask {
  Dims dims{0, 0, 0};
  std::vector<std::uint8_t> labels;

  LabelMask() = default;
  explicit LabelMask(Dims d) : dims(d), labels(d[0] * d[1] * d[2], 0) {}

  bool operator==(const LabelMask&) const = default;
};

inline constexpr const char* kVolumeMagic = "DSTVOL1";

// Empty result means every Volume invariant holds.
std::vector<std::string> validate(const Volume& v);
std::vector<std::string> validate(const Geometry& g);

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);

// Masks share the .dstvol layout with dtype "u8"; the header carries the
// geometry of the volume the mask was derived from.
void save_mask(const BinaryMask& m, const Geometry& g, const std::filesystem::path& path);
BinaryMask load_mask(const std::filesystem::path& path, Geometry* geometry = nullptr);
void save_label_mask(const LabelMask& m, const Geometry& g, const std::filesystem::path& path);
LabelMask load_label_mask(const std::filesystem::path& path, Geometry* geometry = nullptr);

// In-memory encoding used by the file functions (exposed for golden-byte tests).
std::string encode_volume(const Volume& v);
Volume decode_volume(const std::string& bytes);

}  // namespace depthseq
