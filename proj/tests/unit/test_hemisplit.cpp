#include <doctest.h>

#include <array>
#include <cmath>
#include <deque>
#include <random>

#include "depthseq/errors.hpp"
#include "depthseq/hemisplit.hpp"
#include "depthseq/phantom.hpp"
#include "support.hpp"

using namespace depthseq;

namespace {

// Brute-force labelling: BFS from every unvisited set voxel in linear order.
BinaryMask oracle_largest(const BinaryMask& m, int conn) {
  const auto [H, W, D] = m.dims;
  std::vector<int> label(m.bits.size(), -1);
  std::vector<std::size_t> sizes;
  for (std::size_t start = 0; start < m.bits.size(); ++start) {
    if (!m.bits[start] || label[start] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    sizes.push_back(0);
    std::deque<std::size_t> q{start};
    label[start] = id;
    while (!q.empty()) {
      const std::size_t v = q.front();
      q.pop_front();
      ++sizes[id];
      const long i = v % H, j = (v / H) % W, k = v / (H * W);
      for (long dk = -1; dk <= 1; ++dk) {
        for (long dj = -1; dj <= 1; ++dj) {
          for (long di = -1; di <= 1; ++di) {
            const int steps = std::abs(di) + std::abs(dj) + std::abs(dk);
            if (steps == 0 || (conn == 6 && steps != 1)) continue;
            const long a = i + di, b = j + dj, c = k + dk;
            if (a < 0 || b < 0 || c < 0 || a >= long(H) || b >= long(W) || c >= long(D)) continue;
            const std::size_t u = a + H * (b + W * c);
            if (m.bits[u] && label[u] < 0) {
              label[u] = id;
              q.push_back(u);
            }
          }
        }
      }
    }
  }
  // Components were numbered in order of their smallest voxel index, so the
  // first maximum is also the tie winner.
  std::size_t best = 0;
  for (std::size_t c = 1; c < sizes.size(); ++c) {
    if (sizes[c] > sizes[best]) best = c;
  }
  BinaryMask out(m.dims);
  for (std::size_t v = 0; v < label.size(); ++v) out.bits[v] = label[v] == int(best) ? 1 : 0;
  return out;
}

// Per slice: everything not reachable from the border through background.
BinaryMask oracle_fill(const BinaryMask& m) {
  const auto [H, W, D] = m.dims;
  BinaryMask out = m;
  for (std::size_t k = 0; k < D; ++k) {
    std::vector<char> outside(H * W, 0);
    std::deque<std::pair<std::size_t, std::size_t>> q;
    for (std::size_t j = 0; j < W; ++j) {
      for (std::size_t i = 0; i < H; ++i) {
        const bool border = i == 0 || j == 0 || i + 1 == H || j + 1 == W;
        if (border && !m.test(i, j, k)) {
          outside[i + H * j] = 1;
          q.emplace_back(i, j);
        }
      }
    }
    while (!q.empty()) {
      const auto [i, j] = q.front();
      q.pop_front();
      const long nb[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
      for (const auto& d : nb) {
        const long a = long(i) + d[0], b = long(j) + d[1];
        if (a < 0 || b < 0 || a >= long(H) || b >= long(W)) continue;
        if (!outside[a + H * b] && !m.test(a, b, k)) {
          outside[a + H * b] = 1;
          q.emplace_back(a, b);
        }
      }
    }
    for (std::size_t j = 0; j < W; ++j) {
      for (std::size_t i = 0; i < H; ++i) {
        if (!outside[i + H * j]) out.set(i, j, k);
      }
    }
  }
  return out;
}

void check_partition(const HemisphereResult& r, const Dims& d) {
  REQUIRE(r.left.dims == d);
  REQUIRE(r.right.dims == d);
  for (std::size_t v = 0; v < r.left.bits.size(); ++v) {
    CHECK((r.left.bits[v] ^ r.right.bits[v]) == 1);
  }
}

Volume ring_volume(std::size_t H, std::size_t W, std::size_t D, double r_out, double r_in) {
  Geometry g;
  g.dims = {H, W, D};
  g.spacing = {0.5, 0.5, 1.0};
  Volume v(g, -1000.0f);
  const double ci = (H - 1) / 2.0, cj = (W - 1) / 2.0;
  for (std::size_t k = 0; k < D; ++k) {
    for (std::size_t j = 0; j < W; ++j) {
      for (std::size_t i = 0; i < H; ++i) {
        const double r = std::hypot(i - ci, j - cj);
        if (r <= r_out) v.at(i, j, k) = r >= r_in ? 1000.0f : 40.0f;
      }
    }
  }
  return v;
}

Volume mirrored(const Volume& v) {
  Volume m = v;
  const auto [H, W, D] = v.dims();
  for (std::size_t k = 0; k < D; ++k) {
    for (std::size_t j = 0; j < W; ++j) {
      for (std::size_t i = 0; i < H; ++i) m.at(i, j, k) = v.at(H - 1 - i, j, k);
    }
  }
  for (double& c : m.geometry.row_dir) c = -c;
  return m;
}

BinaryMask mirror_mask(const BinaryMask& m) {
  BinaryMask out(m.dims);
  const auto [H, W, D] = m.dims;
  for (std::size_t k = 0; k < D; ++k) {
    for (std::size_t j = 0; j < W; ++j) {
      for (std::size_t i = 0; i < H; ++i) out.set(i, j, k, m.test(H - 1 - i, j, k));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("threshold_mask") {
  Geometry g;
  g.dims = {4, 3, 2};
  Volume v(g);
  CHECK(threshold_mask(v, 300).count() == 0);
  v.at(2, 1, 1) = 1000.0f;
  const BinaryMask one = threshold_mask(v, 300);
  CHECK(one.count() == 1);
  CHECK(one.test(2, 1, 1));

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> hu(-1000.0f, 2000.0f);
  for (int t = 0; t < 20; ++t) {
    for (float& x : v.voxels) x = hu(rng);
    v.voxels[0] = 300.0f;  // boundary value counts as set
    std::size_t expected = 0;
    for (float x : v.voxels) expected += x >= 300.0f ? 1 : 0;
    CHECK(threshold_mask(v, 300).count() == expected);
  }
}

TEST_CASE("largest_component keeps the 27-cube over the 8-cube") {
  BinaryMask m({10, 10, 10});
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t i = 0; i < 3; ++i) m.set(i, j, k);
  for (std::size_t k = 6; k < 8; ++k)
    for (std::size_t j = 6; j < 8; ++j)
      for (std::size_t i = 6; i < 8; ++i) m.set(i, j, k);
  const BinaryMask out = largest_component(m);
  CHECK(out.count() == 27);
  CHECK(out.test(1, 1, 1));
  CHECK_FALSE(out.test(6, 6, 6));
}

TEST_CASE("largest_component edge cases") {
  BinaryMask m({4, 4, 4});
  CHECK_THROWS_WITH_AS(largest_component(m), "no components", ValidationError);
  m.set(2, 3, 1);
  CHECK(largest_component(m) == m);

  // Equal sizes: the component holding the lowest linear index wins.
  BinaryMask tie({6, 1, 1});
  tie.set(4, 0, 0);
  tie.set(1, 0, 0);
  const BinaryMask t = largest_component(tie);
  CHECK(t.test(1, 0, 0));
  CHECK_FALSE(t.test(4, 0, 0));

  // Diagonal neighbours join under 26- but not 6-connectivity.
  BinaryMask diag({4, 4, 4});
  diag.set(0, 0, 0);
  diag.set(1, 1, 1);
  diag.set(2, 2, 2);
  diag.set(0, 3, 0);
  diag.set(0, 3, 1);
  CHECK(largest_component(diag, Connectivity::TwentySix).count() == 3);
  CHECK(largest_component(diag, Connectivity::Six).count() == 2);
}

TEST_CASE("largest_component matches a flood-fill oracle on random masks up to 16^3") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> side(1, 16);
  std::uniform_real_distribution<double> density(0.05, 0.6);
  int tested = 0;
  for (int t = 0; t < 120; ++t) {
    const Dims d{side(rng), side(rng), side(rng)};
    BinaryMask m = testing::random_mask(d, density(rng), rng);
    if (m.count() == 0) m.bits[0] = 1;
    for (auto [c, conn] : {std::pair{Connectivity::Six, 6}, std::pair{Connectivity::TwentySix, 26}}) {
      const BinaryMask got = largest_component(m, c);
      CHECK(got == oracle_largest(m, conn));
      // The result is itself a single component.
      CHECK(oracle_largest(got, conn) == got);
    }
    ++tested;
  }
  CHECK(tested == 120);
}

TEST_CASE("fill_holes") {
  BinaryMask ring({5, 5, 1});
  for (std::size_t j = 1; j < 4; ++j)
    for (std::size_t i = 1; i < 4; ++i)
      if (!(i == 2 && j == 2)) ring.set(i, j, 0);
  const BinaryMask f = fill_holes(ring);
  CHECK(f.test(2, 2, 0));
  CHECK(f.count() == 9);

  BinaryMask solid({4, 4, 2});
  std::fill(solid.bits.begin(), solid.bits.end(), 1);
  CHECK(fill_holes(solid) == solid);

  // A hollow that touches the border stays open.
  BinaryMask open({5, 5, 1});
  for (std::size_t i = 0; i < 5; ++i) open.set(i, 2, 0);
  CHECK(fill_holes(open) == open);
}

TEST_CASE("fill_holes matches the border-flood oracle on random closed curves") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 60; ++t) {
    const std::size_t H = 6 + t % 11, W = 5 + (t * 7) % 12, D = 1 + t % 3;
    BinaryMask m(Dims{H, W, D});
    for (std::size_t k = 0; k < D; ++k) {
      // Closed polygon-ish outline plus random speckle.
      const double ci = H / 2.0, cj = W / 2.0, r = 1.5 + u(rng) * (std::min(H, W) / 2.0 - 1.5);
      for (int a = 0; a < 720; ++a) {
        const double th = a * M_PI / 360.0;
        const double rr = r * (0.8 + 0.2 * std::sin(3 * th + k));
        const long i = std::lround(ci + rr * std::cos(th)), j = std::lround(cj + rr * std::sin(th));
        if (i >= 0 && j >= 0 && i < long(H) && j < long(W)) m.set(i, j, k);
      }
      for (std::size_t j = 0; j < W; ++j)
        for (std::size_t i = 0; i < H; ++i)
          if (u(rng) < 0.08) m.set(i, j, k);
    }
    const BinaryMask f = fill_holes(m);
    CHECK(f == oracle_fill(m));
    CHECK(fill_holes(f) == f);
    for (std::size_t v = 0; v < m.bits.size(); ++v) {
      if (m.bits[v]) CHECK(f.bits[v] == 1);
    }
  }
}

TEST_CASE("centroid") {
  Geometry g;
  g.dims = {5, 5, 5};
  Volume v(g);
  BinaryMask m(g.dims);
  m.set(1, 2, 3);
  const Vec3 c = centroid(m, v);
  CHECK(c == Vec3{1.0, 2.0, 3.0});

  Geometry g9;
  g9.dims = {9, 9, 9};
  BinaryMask pair(g9.dims);
  pair.set(3, 4, 2);
  pair.set(5, 4, 6);
  const Vec3 mid = centroid(pair, Volume(g9));
  CHECK(mid[0] == doctest::Approx(4.0));
  CHECK(mid[1] == doctest::Approx(4.0));
  CHECK(mid[2] == doctest::Approx(4.0));

  CHECK_THROWS_AS(centroid(BinaryMask(g.dims), v), ValidationError);
}

TEST_CASE("centroid matches a brute-force mean in world coordinates") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.3, 2.0);
  for (int t = 0; t < 20; ++t) {
    Geometry g;
    g.dims = {7, 6, 5};
    g.spacing = {u(rng), u(rng), u(rng)};
    g.origin = {u(rng), -u(rng), 3 * u(rng)};
    const double th = u(rng);
    g.row_dir = {std::cos(th), std::sin(th), 0.0};
    g.col_dir = {-std::sin(th), std::cos(th), 0.0};
    const Volume v(g);
    BinaryMask m = testing::random_mask(g.dims, 0.3, rng);
    m.set(0, 0, 0);
    Vec3 sum{0, 0, 0};
    std::size_t n = 0;
    for (std::size_t k = 0; k < 5; ++k)
      for (std::size_t j = 0; j < 6; ++j)
        for (std::size_t i = 0; i < 7; ++i) {
          if (!m.test(i, j, k)) continue;
          for (int a = 0; a < 3; ++a) {
            const double n_a = g.row_dir[(a + 1) % 3] * g.col_dir[(a + 2) % 3] -
                               g.row_dir[(a + 2) % 3] * g.col_dir[(a + 1) % 3];
            sum[a] += g.origin[a] + i * g.spacing[0] * g.row_dir[a] + j * g.spacing[1] * g.col_dir[a] +
                      k * g.spacing[2] * n_a;
          }
          ++n;
        }
    const Vec3 c = centroid(m, v);
    for (int a = 0; a < 3; ++a) CHECK(std::abs(c[a] - sum[a] / n) < 1e-6);
  }
}

TEST_CASE("plane_from_orientation passes the row direction through") {
  Geometry g;
  g.dims = {2, 2, 2};
  Volume v(g);
  SplitPlane p = plane_from_orientation({10, 0, 0}, v);
  CHECK(p.point == Vec3{10, 0, 0});
  CHECK(p.normal == Vec3{1, 0, 0});

  v.geometry.row_dir = {0, 1, 0};
  v.geometry.col_dir = {1, 0, 0};
  CHECK(plane_from_orientation({0, 0, 0}, v).normal == Vec3{0, 1, 0});

  const double th = M_PI / 6;
  v.geometry.row_dir = {std::cos(th), std::sin(th), 0};
  v.geometry.col_dir = {-std::sin(th), std::cos(th), 0};
  CHECK(plane_from_orientation({0, 0, 0}, v).normal == v.geometry.row_dir);
}

TEST_CASE("split_by_plane signs each voxel") {
  Geometry g;
  g.dims = {4, 4, 1};
  const Volume v(g);
  // Column x = 2 lies on the plane (dot = 0) and therefore goes left.
  const HemisphereResult r = split_by_plane(v, {{2, 0, 0}, {1, 0, 0}});
  check_partition(r, g.dims);
  for (std::size_t j = 0; j < 4; ++j) {
    for (std::size_t i = 0; i < 4; ++i) {
      const double dot = static_cast<double>(i) - 2.0;
      CHECK(r.right.test(i, j, 0) == (dot > 0));
    }
  }
  CHECK(r.left.count() == 12);
  CHECK(r.right.count() == 4);

  const HemisphereResult half = split_by_plane(v, {{1.5, 0, 0}, {1, 0, 0}});
  CHECK(half.left.count() == 8);
  CHECK(half.right.count() == 8);

  const HemisphereResult far = split_by_plane(v, {{100, 0, 0}, {1, 0, 0}});
  CHECK(far.left.count() == 16);
  CHECK(far.right.count() == 0);
  const HemisphereResult far2 = split_by_plane(v, {{-100, 0, 0}, {1, 0, 0}});
  CHECK(far2.right.count() == 16);
}

TEST_CASE("separate_hemispheres on a symmetric skull gives equal halves") {
  const Volume v = ring_volume(20, 18, 3, 8.5, 7.0);
  SplitPlane plane;
  const HemisphereResult r = separate_hemispheres(v, {}, &plane);
  check_partition(r, v.dims());
  CHECK(r.left.count() == r.right.count());
  CHECK(plane.point[0] == doctest::Approx(9.5 * 0.5));
}

TEST_CASE("air-only volume has no components") {
  Geometry g;
  g.dims = {4, 4, 4};
  CHECK_THROWS_WITH_AS(separate_hemispheres(Volume(g, -1000.0f)), "no components", ValidationError);
}

TEST_CASE("50 random phantoms: partition, determinism, idempotent fill, mirror equivariance") {
  PhantomSpec spec;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const PhantomCase pc = generate_phantom(spec, 1000 + s);
    const Volume& v = pc.volume;
    SplitPlane plane;
    const HemisphereResult a = separate_hemispheres(v, {}, &plane);
    check_partition(a, v.dims());
    const HemisphereResult b = separate_hemispheres(v);
    CHECK(a.left == b.left);
    CHECK(a.right == b.right);

    const BinaryMask skull = largest_component(threshold_mask(v, kDefaultSkullHu));
    const BinaryMask filled = fill_holes(skull);
    CHECK(fill_holes(filled) == filled);

    // No voxel column may sit exactly on the plane, otherwise the tie rule breaks the symmetry.
    const double col = plane.point[0] / v.geometry.spacing[0];
    REQUIRE(col != std::floor(col));
    const HemisphereResult m = separate_hemispheres(mirrored(v));
    CHECK(mirror_mask(m.left) == a.right);
    CHECK(mirror_mask(m.right) == a.left);
  }
}

TEST_CASE("translating the head by 5 mm along the row axis moves the plane by 5 mm") {
  PhantomSpec spec;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const PhantomCase pc = generate_phantom(spec, 50 + s);
    const Volume& v = pc.volume;
    const auto [H, W, D] = v.dims();
    const std::size_t shift = 10;  // 10 voxels x 0.5 mm
    Geometry g = v.geometry;
    g.dims = {H + shift, W, D};
    Volume t(g, -1000.0f);
    for (std::size_t k = 0; k < D; ++k)
      for (std::size_t j = 0; j < W; ++j)
        for (std::size_t i = 0; i < H; ++i) t.at(i + shift, j, k) = v.at(i, j, k);
    SplitPlane p0, p1;
    const HemisphereResult a = separate_hemispheres(v, {}, &p0);
    const HemisphereResult b = separate_hemispheres(t, {}, &p1);
    CHECK(p1.point[0] - p0.point[0] == doctest::Approx(5.0).epsilon(1e-9));
    CHECK(p1.point[1] == doctest::Approx(p0.point[1]));
    for (std::size_t k = 0; k < D; ++k)
      for (std::size_t j = 0; j < W; ++j)
        for (std::size_t i = 0; i < H; ++i) CHECK(b.right.test(i + shift, j, k) == a.right.test(i, j, k));
  }
}
