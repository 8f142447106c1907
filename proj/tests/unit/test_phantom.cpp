#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

#include "depthseq/errors.hpp"
#include "depthseq/hemisplit.hpp"
#include "depthseq/phantom.hpp"
#include "support.hpp"

using namespace depthseq;

namespace {

bool same_case(const PhantomCase& a, const PhantomCase& b) {
  return a.volume.geometry == b.volume.geometry && a.landmarks == b.landmarks && a.calc_mask == b.calc_mask &&
         a.class_label == b.class_label &&
         std::memcmp(a.volume.voxels.data(), b.volume.voxels.data(), a.volume.voxels.size() * sizeof(float)) == 0;
}

std::vector<std::string> make_ids(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("p" + std::to_string(i));
  return ids;
}

// Ridge least squares with a bias column, solved by Gauss-Jordan elimination.
std::vector<double> ridge(const std::vector<std::vector<double>>& X, const std::vector<double>& y, double lambda) {
  const std::size_t p = X[0].size() + 1;
  std::vector<std::vector<double>> A(p, std::vector<double>(p + 1, 0.0));
  for (std::size_t r = 0; r < X.size(); ++r) {
    std::vector<double> x = X[r];
    x.push_back(1.0);
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t j = 0; j < p; ++j) A[i][j] += x[i] * x[j];
      A[i][p] += x[i] * y[r];
    }
  }
  for (std::size_t i = 0; i + 1 < p; ++i) A[i][i] += lambda;
  for (std::size_t c = 0; c < p; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < p; ++r) {
      if (std::abs(A[r][c]) > std::abs(A[piv][c])) piv = r;
    }
    std::swap(A[c], A[piv]);
    for (std::size_t r = 0; r < p; ++r) {
      if (r == c) continue;
      const double f = A[r][c] / A[c][c];
      for (std::size_t k = c; k <= p; ++k) A[r][k] -= f * A[c][k];
    }
  }
  std::vector<double> w(p);
  for (std::size_t i = 0; i < p; ++i) w[i] = A[i][p] / A[i][i];
  return w;
}

std::vector<double> slice_means(const Volume& v) {
  const auto [H, W, D] = v.dims();
  std::vector<double> m(D, 0.0);
  for (std::size_t k = 0; k < D; ++k) {
    for (std::size_t j = 0; j < W; ++j) {
      for (std::size_t i = 0; i < H; ++i) m[k] += v.at(i, j, k);
    }
    m[k] /= static_cast<double>(H * W);
  }
  return m;
}

}  // namespace

TEST_CASE("same spec and seed give a bit-identical case") {
  const PhantomSpec spec;
  for (std::uint64_t s : {0u, 1u, 99u}) {
    CHECK(same_case(generate_phantom(spec, s), generate_phantom(spec, s)));
    CHECK(same_case(generate_classification_case(spec, 1, s), generate_classification_case(spec, 1, s)));
  }
  CHECK_FALSE(same_case(generate_phantom(spec, 0), generate_phantom(spec, 1)));
  PhantomSpec other = spec;
  other.seed = spec.seed + 1;
  CHECK_FALSE(same_case(generate_phantom(spec, 0), generate_phantom(other, 0)));
}

TEST_CASE("landmarks are monotone per side with the margin respected") {
  PhantomSpec spec;
  spec.dims = {32, 32, 28};
  spec.depth_jitter = 4;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const PhantomCase pc = generate_phantom(spec, s);
    const std::size_t D = pc.volume.dims()[2];
    REQUIRE(pc.landmarks.size() == kDefaultLandmarks);
    CHECK_NOTHROW(check_landmarks(pc.landmarks, D));
    for (std::size_t side = 0; side < 2; ++side) {
      const std::size_t* z = pc.landmarks.data() + side * kLandmarksPerSide;
      CHECK(z[1] >= z[0] + spec.landmark_margin);
      CHECK(z[2] >= z[1] + spec.landmark_margin);
      CHECK(z[2] < D);
    }
    CHECK(D <= spec.dims[2]);
    CHECK(D + spec.depth_jitter >= spec.dims[2]);
  }
}

TEST_CASE("64 phantoms at 32x32x24 pass volume and hemisphere invariants") {
  const PhantomSpec spec;
  for (std::uint64_t s = 0; s < 64; ++s) {
    const PhantomCase pc = generate_phantom(spec, s);
    CHECK(validate(pc.volume).empty());
    CHECK(pc.volume.dims() == Dims{32, 32, 24});
    const HemisphereResult r = separate_hemispheres(pc.volume);
    std::size_t left = 0, right = 0, bad = 0;
    for (std::size_t i = 0; i < r.left.bits.size(); ++i) {
      bad += r.left.bits[i] + r.right.bits[i] != 1;
      left += r.left.bits[i];
      right += r.right.bits[i];
    }
    CHECK(bad == 0);
    CHECK(left > 0);
    CHECK(right > 0);
    // Calcifications sit inside the head, on both sides.
    std::size_t calc_left = 0, calc_right = 0;
    for (std::size_t i = 0; i < pc.calc_mask.bits.size(); ++i) {
      if (!pc.calc_mask.bits[i]) continue;
      CHECK(pc.volume.voxels[i] >= spec.calc_hu_min);
      calc_left += r.left.bits[i];
      calc_right += r.right.bits[i];
    }
    CHECK(calc_left > 0);
    CHECK(calc_right > 0);
  }
}

TEST_CASE("skull shell is above the bone threshold") {
  const PhantomSpec spec;
  const PhantomCase pc = generate_phantom(spec, 3);
  const BinaryMask skull = threshold_mask(pc.volume, kDefaultSkullHu);
  std::size_t n = 0;
  for (auto b : skull.bits) n += b;
  CHECK(n > 0);
  // Slice corners are air.
  CHECK(pc.volume.at(0, 0, 0) == static_cast<float>(kAirHu));
}

TEST_CASE("spec errors") {
  PhantomSpec spec;
  spec.dims = {32, 32, 10};
  CHECK_THROWS_WITH_AS(generate_phantom(spec, 0), doctest::Contains("dims too small"), ValidationError);
  spec = PhantomSpec{};
  spec.skull_radius_min = 0.95;
  spec.skull_radius_max = 0.9;
  CHECK_THROWS_AS(spec.check(), ValidationError);
  spec = PhantomSpec{};
  CHECK_THROWS_AS(generate_classification_case(spec, 3, 0), ValidationError);
  CHECK(to_json(phantom_spec_from_json(to_json(spec))) == to_json(spec));
  spec.vessel_radius_min = 2.0;
  spec.vessel_radius_max = 1.5;
  CHECK_THROWS_AS(spec.check(), ValidationError);
  spec.vessel_radius_max = 2.4;
  spec.vessel_radius_step = 0.0;
  CHECK_THROWS_AS(spec.check(), ValidationError);
  spec.vessel_radius_step = 0.7;
  const PhantomSpec back = phantom_spec_from_json(to_json(spec));
  CHECK(back.vessel_radius_min == 2.0);
  CHECK(back.vessel_radius_max == 2.4);
  CHECK(back.vessel_radius_step == 0.7);
}

TEST_CASE("a wider vessel radius range changes only the vessels") {
  PhantomSpec a, b;
  b.vessel_radius_max = 2.4;
  b.vessel_radius_step = 0.7;
  const PhantomCase ca = generate_phantom(a, 11), cb = generate_phantom(b, 11);
  CHECK(ca.landmarks == cb.landmarks);
  CHECK(ca.calc_mask.dims == cb.calc_mask.dims);
  CHECK(ca.volume.voxels != cb.volume.voxels);
}

TEST_CASE("classification classes differ only in where the texture sits") {
  const PhantomSpec spec;
  const PhantomCase a = generate_classification_case(spec, 0, 5);
  const PhantomCase b = generate_classification_case(spec, 1, 5);
  const std::size_t D = spec.dims[2];
  const std::size_t plane = spec.dims[0] * spec.dims[1];
  for (std::size_t k = 0; k < D; ++k) {
    const bool textured = k < 2 * D / 3;  // thirds 0 and 1
    const bool same = std::memcmp(a.volume.voxels.data() + k * plane, b.volume.voxels.data() + k * plane,
                                  plane * sizeof(float)) == 0;
    CHECK(same == !textured);
  }
}

TEST_CASE("per-slice mean intensity does not separate the classes") {
  PhantomSpec spec;
  spec.dims = {16, 16, 24};
  auto features = [&](std::size_t n, std::uint64_t offset, std::vector<std::vector<double>>& X,
                      std::vector<std::size_t>& y) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t label = i % 3;
      X.push_back(slice_means(generate_classification_case(spec, label, offset + i).volume));
      y.push_back(label);
    }
  };
  std::vector<std::vector<double>> Xtr, Xte;
  std::vector<std::size_t> ytr, yte;
  features(150, 0, Xtr, ytr);
  features(300, 10000, Xte, yte);
  // One-vs-rest linear probes.
  std::vector<std::vector<double>> w;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> t(ytr.size());
    for (std::size_t i = 0; i < ytr.size(); ++i) t[i] = ytr[i] == c ? 1.0 : 0.0;
    w.push_back(ridge(Xtr, t, 1e-3));
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < Xte.size(); ++i) {
    std::size_t best = 0;
    double best_score = -1e300;
    for (std::size_t c = 0; c < 3; ++c) {
      double s = w[c].back();
      for (std::size_t f = 0; f < Xte[i].size(); ++f) s += w[c][f] * Xte[i][f];
      if (s > best_score) best_score = s, best = c;
    }
    correct += best == yte[i];
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(Xte.size());
  CAPTURE(acc);
  CHECK(acc <= 0.40);
}

TEST_CASE("100 ids in 5 folds: test sets of 20 that cover the cohort") {
  const auto ids = make_ids(100);
  const FoldPlan plan = make_folds(ids, 5, 3);
  REQUIRE(plan.folds.size() == 5);
  std::multiset<std::string> tested;
  for (const Fold& f : plan.folds) {
    CHECK(f.test.size() == 20);
    CHECK(f.val.size() == 10);
    CHECK(f.train.size() == 70);
    CHECK_NOTHROW(check_fold(f, ids));
    tested.insert(f.test.begin(), f.test.end());
  }
  CHECK(tested == std::multiset<std::string>(ids.begin(), ids.end()));
}

TEST_CASE("99 ids: sizes within one of the targets and still a partition") {
  const auto ids = make_ids(99);
  const FoldPlan plan = make_folds(ids, 5, 0);
  std::multiset<std::string> tested;
  for (const Fold& f : plan.folds) {
    CHECK(std::abs(static_cast<double>(f.test.size()) - 19.8) <= 1.0);
    CHECK(std::abs(static_cast<double>(f.val.size()) - 9.9) <= 1.0);
    CHECK(std::abs(static_cast<double>(f.train.size()) - 69.3) <= 1.0);
    CHECK_NOTHROW(check_fold(f, ids));
    tested.insert(f.test.begin(), f.test.end());
  }
  CHECK(tested == std::multiset<std::string>(ids.begin(), ids.end()));
}

TEST_CASE("fold plans are deterministic in the seed") {
  const auto ids = make_ids(30);
  CHECK(to_json(make_folds(ids, 5, 4)) == to_json(make_folds(ids, 5, 4)));
  CHECK(to_json(make_folds(ids, 5, 4)) != to_json(make_folds(ids, 5, 5)));
  CHECK_THROWS_WITH_AS(make_folds(make_ids(9), 5, 0), doctest::Contains("too few cases"), ValidationError);
  CHECK_THROWS_AS(make_folds({"a", "a", "b", "c"}, 2, 0), ValidationError);
  Fold broken = make_folds(ids, 5, 0).folds[0];
  broken.train.push_back(broken.test[0]);
  CHECK_THROWS_AS(check_fold(broken, ids), ValidationError);
}

TEST_CASE("cohort written to disk loads back through the manifest") {
  testing::TempDir dir("cohort");
  PhantomSpec spec;
  spec.dims = {16, 16, 24};
  const auto cases = generate_cohort(spec, 4, CohortTask::Localization);
  const auto path = write_cohort(cases, dir.path(), CohortTask::Localization);
  const Manifest m = load_manifest(path);
  CHECK(m.version == kManifestVersion);
  CHECK(m.task == "localization");
  REQUIRE(m.cases.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(m.cases[i].case_id == cases[i].case_id);
    CHECK(m.cases[i].landmarks == cases[i].landmarks);
    CHECK_FALSE(m.cases[i].class_label.has_value());
    CHECK(load_volume(m.cases[i].volume) == cases[i].volume);
    CHECK(load_mask(m.cases[i].calc_mask) == cases[i].calc_mask);
  }

  const auto cls = generate_cohort(spec, 3, CohortTask::Classification);
  const Manifest mc = load_manifest(write_cohort(cls, dir / "cls", CohortTask::Classification));
  CHECK(mc.task == "classification");
  for (std::size_t i = 0; i < 3; ++i) CHECK(mc.cases[i].class_label == std::optional<std::size_t>(i));

  std::ofstream(dir / "bad.json") << R"({"version": 99, "cases": []})";
  CHECK_THROWS_WITH_AS(load_manifest(dir / "bad.json"), doctest::Contains("unsupported manifest version"),
                       ValidationError);
  std::ofstream(dir / "dup.json") << R"({"version": 1, "cases": [{"case_id": "a", "volume": "x"},
                                                                    {"case_id": "a", "volume": "y"}]})";
  CHECK_THROWS_AS(load_manifest(dir / "dup.json"), ValidationError);
}
