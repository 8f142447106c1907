#include "depthseq/hemisplit.hpp"

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <vector>

#include "depthseq/errors.hpp"

namespace depthseq {

namespace {

struct Offset {
  int di, dj, dk;
};

std::vector<Offset> neighbourhood(Connectivity c) {
  std::vector<Offset> out;
  for (int dk = -1; dk <= 1; ++dk) {
    for (int dj = -1; dj <= 1; ++dj) {
      for (int di = -1; di <= 1; ++di) {
        const int manhattan = std::abs(di) + std::abs(dj) + std::abs(dk);
        if (manhattan == 0) continue;
        if (c == Connectivity::Six && manhattan != 1) continue;
        out.push_back({di, dj, dk});
      }
    }
  }
  return out;
}

}  // namespace

BinaryMask threshold_mask(const Volume& v, double hu_min) {
  BinaryMask m(v.geometry.dims);
  for (std::size_t i = 0; i < v.voxels.size(); ++i) {
    m.bits[i] = static_cast<double>(v.voxels[i]) >= hu_min ? 1 : 0;
  }
  return m;
}

BinaryMask largest_component(const BinaryMask& m, Connectivity connectivity) {
  const auto [nx, ny, nz] = m.dims;
  const auto offsets = neighbourhood(connectivity);
  std::vector<std::int32_t> label(m.bits.size(), 0);
  std::vector<std::size_t> stack;

  std::int32_t best_label = 0;
  std::size_t best_size = 0;
  std::int32_t next = 0;

  // Scanning in linear order means components are discovered in order of their
  // smallest index, so keeping the first strict maximum implements the tie rule.
  for (std::size_t seed = 0; seed < m.bits.size(); ++seed) {
    if (!m.bits[seed] || label[seed] != 0) continue;
    ++next;
    std::size_t size = 0;
    label[seed] = next;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      ++size;
      const std::size_t i = cur % nx;
      const std::size_t j = (cur / nx) % ny;
      const std::size_t k = cur / (nx * ny);
      for (const auto& o : offsets) {
        const auto ii = static_cast<std::ptrdiff_t>(i) + o.di;
        const auto jj = static_cast<std::ptrdiff_t>(j) + o.dj;
        const auto kk = static_cast<std::ptrdiff_t>(k) + o.dk;
        if (ii < 0 || jj < 0 || kk < 0 || ii >= static_cast<std::ptrdiff_t>(nx) ||
            jj >= static_cast<std::ptrdiff_t>(ny) || kk >= static_cast<std::ptrdiff_t>(nz)) {
          continue;
        }
        const std::size_t n = m.index(ii, jj, kk);
        if (m.bits[n] && label[n] == 0) {
          label[n] = next;
          stack.push_back(n);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best_label = next;
    }
  }
  if (best_label == 0) throw ValidationError("no components");

  BinaryMask out(m.dims);
  for (std::size_t n = 0; n < label.size(); ++n) out.bits[n] = label[n] == best_label ? 1 : 0;
  return out;
}

BinaryMask fill_holes(const BinaryMask& m) {
  const auto [nx, ny, nz] = m.dims;
  BinaryMask out = m;
  std::vector<std::uint8_t> outside(nx * ny);
  std::vector<std::size_t> stack;
  for (std::size_t k = 0; k < nz; ++k) {
    const std::uint8_t* slice = m.bits.data() + k * nx * ny;
    std::fill(outside.begin(), outside.end(), 0);
    auto push = [&](std::size_t i, std::size_t j) {
      const std::size_t p = i + nx * j;
      if (!slice[p] && !outside[p]) {
        outside[p] = 1;
        stack.push_back(p);
      }
    };
    for (std::size_t i = 0; i < nx; ++i) {
      push(i, 0);
      push(i, ny - 1);
    }
    for (std::size_t j = 0; j < ny; ++j) {
      push(0, j);
      push(nx - 1, j);
    }
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t i = p % nx;
      const std::size_t j = p / nx;
      if (i > 0) push(i - 1, j);
      if (i + 1 < nx) push(i + 1, j);
      if (j > 0) push(i, j - 1);
      if (j + 1 < ny) push(i, j + 1);
    }
    std::uint8_t* dst = out.bits.data() + k * nx * ny;
    for (std::size_t p = 0; p < nx * ny; ++p) {
      if (!outside[p]) dst[p] = 1;
    }
  }
  return out;
}

Vec3 centroid(const BinaryMask& m, const Volume& v) {
  if (m.dims != v.geometry.dims) throw ValidationError("mask dims do not match volume");
  const auto [nx, ny, nz] = m.dims;
  Vec3 sum{0.0, 0.0, 0.0};
  std::size_t count = 0;
  for (std::size_t k = 0; k < nz; ++k) {
    for (std::size_t j = 0; j < ny; ++j) {
      for (std::size_t i = 0; i < nx; ++i) {
        if (!m.test(i, j, k)) continue;
        const Vec3 p = v.geometry.world(i, j, k);
        for (int a = 0; a < 3; ++a) sum[a] += p[a];
        ++count;
      }
    }
  }
  if (count == 0) throw ValidationError("centroid of empty mask");
  const double n = static_cast<double>(count);
  return {sum[0] / n, sum[1] / n, sum[2] / n};
}

SplitPlane plane_from_orientation(const Vec3& c, const Volume& v) {
  return SplitPlane{c, v.geometry.row_dir};
}

HemisphereResult split_by_plane(const Volume& v, const SplitPlane& p) {
  const auto& g = v.geometry;
  const auto [nx, ny, nz] = g.dims;
  HemisphereResult r{BinaryMask(g.dims), BinaryMask(g.dims)};
  for (std::size_t k = 0; k < nz; ++k) {
    for (std::size_t j = 0; j < ny; ++j) {
      for (std::size_t i = 0; i < nx; ++i) {
        const Vec3 w = g.world(i, j, k);
        const Vec3 d{w[0] - p.point[0], w[1] - p.point[1], w[2] - p.point[2]};
        const std::size_t n = g.index(i, j, k);
        if (dot(d, p.normal) > 0.0) {
          r.right.bits[n] = 1;
        } else {
          r.left.bits[n] = 1;
        }
      }
    }
  }
  return r;
}

HemisphereResult separate_hemispheres(const Volume& v, const HemisplitOptions& opts) {
  return separate_hemispheres(v, opts, nullptr);
}

HemisphereResult separate_hemispheres(const Volume& v, const HemisplitOptions& opts, SplitPlane* plane) {
  const BinaryMask skull = fill_holes(largest_component(threshold_mask(v, opts.hu_min), opts.connectivity));
  const SplitPlane p = plane_from_orientation(centroid(skull, v), v);
  if (plane) *plane = p;
  return split_by_plane(v, p);
}

}  // namespace depthseq
