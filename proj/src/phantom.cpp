#include "depthseq/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>

#include "depthseq/errors.hpp"

namespace depthseq {

namespace {

// Slices needed above the top landmark (max), between landmarks (max) and below the lowest one.
constexpr std::size_t kTopOffsetMin = 3;
constexpr std::size_t kTopOffsetMax = 7;
constexpr std::size_t kGapExtra = 4;
constexpr std::size_t kBottomReserve = 3;

constexpr double kVesselOffset = 0.19;  // vessel centre distance from the midline, fraction of H
constexpr double kVesselContrast[2] = {120.0, 220.0};  // left, right
constexpr double kBandContrast[2] = {500.0, -400.0};  // left, right
constexpr double kTextureHu = 150.0;

std::size_t min_depth(const PhantomSpec& s) {
  return kTopOffsetMax + 2 * (s.landmark_margin + kGapExtra) + kBottomReserve + 1;
}

std::mt19937_64 case_rng(const PhantomSpec& spec, std::uint64_t case_seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(case_seed), static_cast<std::uint32_t>(case_seed >> 32)};
  return std::mt19937_64(seq);
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double uniform_real(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::string case_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%03zu", i);
  return buf;
}

struct Head {
  double cx = 0.0, cy = 0.0;
  double outer = 0.0;  // voxels
  double inner = 0.0;
};

// Air outside, a skull shell, noisy soft tissue inside. Returns the head geometry.
Head paint_head(Volume& v, const PhantomSpec& spec, std::mt19937_64& rng) {
  const auto [H, W, D] = v.dims();
  Head h;
  h.cx = (static_cast<double>(H) - 1.0) / 2.0;
  h.cy = (static_cast<double>(W) - 1.0) / 2.0;
  h.outer = uniform_real(rng, spec.skull_radius_min, spec.skull_radius_max) * static_cast<double>(std::min(H, W)) / 2.0;
  h.inner = h.outer - 2.0;
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  for (std::size_t k = 0; k < D; ++k) {
    for (std::size_t j = 0; j < W; ++j) {
      for (std::size_t i = 0; i < H; ++i) {
        const double r = std::hypot(static_cast<double>(i) - h.cx, static_cast<double>(j) - h.cy);
        double hu = kAirHu;
        if (r <= h.inner) {
          hu = kTissueHu + (spec.noise_sigma > 0.0 ? noise(rng) : 0.0);
        } else if (r <= h.outer) {
          hu = uniform_real(rng, spec.skull_hu_min, spec.skull_hu_max);
        }
        v.at(i, j, k) = static_cast<float>(hu);
      }
    }
  }
  return h;
}

Volume blank_volume(const PhantomSpec& spec, std::size_t depth) {
  Geometry g;
  g.dims = {spec.dims[0], spec.dims[1], depth};
  g.spacing = spec.spacing;
  return Volume(g, static_cast<float>(kAirHu));
}

}  // namespace

void PhantomSpec::check() const {
  if (dims[0] < 16 || dims[1] < 16) throw ValidationError("phantom in-plane dims must be >= 16");
  if (!(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0)) throw ValidationError("non-positive spacing");
  if (!(skull_radius_min > 0.0 && skull_radius_min <= skull_radius_max && skull_radius_max <= 1.0)) {
    throw ValidationError("skull radius range must satisfy 0 < min <= max <= 1");
  }
  if (landmark_margin < 1) throw ValidationError("landmark margin must be >= 1");
  if (calc_count_min > calc_count_max) throw ValidationError("empty calcification count range");
  if (!(calc_hu_min <= calc_hu_max) || !(skull_hu_min <= skull_hu_max)) throw ValidationError("empty HU range");
  if (!(noise_sigma >= 0.0)) throw ValidationError("noise sigma must be >= 0");
  if (!(vessel_radius_min > 0.0 && vessel_radius_min <= vessel_radius_max) || !(vessel_radius_step > 0.0)) {
    throw ValidationError("vessel radius range must satisfy 0 < min <= max and step > 0");
  }
  if (depth_jitter >= dims[2] || dims[2] - depth_jitter < min_depth(*this)) {
    throw ValidationError("dims too small for margins: depth " + std::to_string(dims[2]) + " minus jitter " +
                          std::to_string(depth_jitter) + " must be >= " + std::to_string(min_depth(*this)));
  }
}

nlohmann::json to_json(const PhantomSpec& s) {
  nlohmann::json j;
  j["dims"] = s.dims;
  j["spacing"] = s.spacing;
  j["skull_radius"] = {s.skull_radius_min, s.skull_radius_max};
  j["landmark_margin"] = s.landmark_margin;
  j["calc_count"] = {s.calc_count_min, s.calc_count_max};
  j["calc_hu"] = {s.calc_hu_min, s.calc_hu_max};
  j["skull_hu"] = {s.skull_hu_min, s.skull_hu_max};
  j["noise_sigma"] = s.noise_sigma;
  j["vessel_radius"] = {s.vessel_radius_min, s.vessel_radius_max};
  j["vessel_radius_step"] = s.vessel_radius_step;
  j["depth_jitter"] = s.depth_jitter;
  j["seed"] = s.seed;
  return j;
}

PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  try {
    s.dims = j.value("dims", s.dims);
    s.spacing = j.value("spacing", s.spacing);
    if (j.contains("skull_radius")) {
      s.skull_radius_min = j["skull_radius"].at(0).get<double>();
      s.skull_radius_max = j["skull_radius"].at(1).get<double>();
    }
    s.landmark_margin = j.value("landmark_margin", s.landmark_margin);
    if (j.contains("calc_count")) {
      s.calc_count_min = j["calc_count"].at(0).get<std::size_t>();
      s.calc_count_max = j["calc_count"].at(1).get<std::size_t>();
    }
    if (j.contains("calc_hu")) {
      s.calc_hu_min = j["calc_hu"].at(0).get<double>();
      s.calc_hu_max = j["calc_hu"].at(1).get<double>();
    }
    if (j.contains("skull_hu")) {
      s.skull_hu_min = j["skull_hu"].at(0).get<double>();
      s.skull_hu_max = j["skull_hu"].at(1).get<double>();
    }
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    if (j.contains("vessel_radius")) {
      s.vessel_radius_min = j["vessel_radius"].at(0).get<double>();
      s.vessel_radius_max = j["vessel_radius"].at(1).get<double>();
    }
    s.vessel_radius_step = j.value("vessel_radius_step", s.vessel_radius_step);
    s.depth_jitter = j.value("depth_jitter", s.depth_jitter);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad phantom spec: ") + e.what());
  }
  s.check();
  return s;
}

PhantomCase generate_phantom(const PhantomSpec& spec, std::uint64_t case_seed) {
  spec.check();
  auto rng = case_rng(spec, case_seed);
  const std::size_t D = spec.dims[2] - uniform_index(rng, 0, spec.depth_jitter);
  PhantomCase pc;
  pc.volume = blank_volume(spec, D);
  const Head head = paint_head(pc.volume, spec, rng);
  const std::size_t H = spec.dims[0], W = spec.dims[1];

  pc.landmarks.assign(kDefaultLandmarks, 0);
  pc.calc_mask = BinaryMask(pc.volume.dims());
  for (std::size_t side = 0; side < 2; ++side) {
    std::size_t* c = pc.landmarks.data() + side * kLandmarksPerSide;
    c[2] = D - 1 - uniform_index(rng, kTopOffsetMin, kTopOffsetMax);
    c[1] = c[2] - spec.landmark_margin - uniform_index(rng, 0, kGapExtra);
    c[0] = c[1] - spec.landmark_margin - uniform_index(rng, 0, kGapExtra);

    const double sign = side == 0 ? -1.0 : 1.0;
    const double vx = head.cx + sign * kVesselOffset * static_cast<double>(H) + uniform_real(rng, -0.5, 0.5);
    const double vy = head.cy + uniform_real(rng, -1.0, 1.0);
    const double r0 = uniform_real(rng, spec.vessel_radius_min, spec.vessel_radius_max);
    auto radius = [&](std::size_t z) {
      double r = r0;
      for (std::size_t t = 0; t < kLandmarksPerSide; ++t) r += z > c[t] ? spec.vessel_radius_step : 0.0;
      return r;
    };
    for (std::size_t k = 0; k < D; ++k) {
      const double r = radius(k);
      const bool band = k == c[0] || k == c[1] || k == c[2];
      for (std::size_t j = 0; j < W; ++j) {
        for (std::size_t i = 0; i < H; ++i) {
          const double d = std::hypot(static_cast<double>(i) - vx, static_cast<double>(j) - vy);
          // Partial-volume edge so the radius is encoded continuously.
          const double fill = std::clamp(r - d + 0.5, 0.0, 1.0);
          double add = fill * kVesselContrast[side];
          if (band && d > r && d <= r + 1.5) add += kBandContrast[side];
          pc.volume.at(i, j, k) += static_cast<float>(add);
        }
      }
    }
    const std::size_t n_calc = uniform_index(rng, spec.calc_count_min, spec.calc_count_max);
    for (std::size_t n = 0; n < n_calc; ++n) {
      const std::size_t k = uniform_index(rng, 0, D - 1);
      const double theta = uniform_real(rng, 0.0, 2.0 * M_PI);
      const double rr = radius(k) + 0.5;
      const auto ci = static_cast<std::size_t>(std::lround(vx + rr * std::cos(theta)));
      const auto cj = static_cast<std::size_t>(std::lround(vy + rr * std::sin(theta)));
      for (std::size_t dj = 0; dj < 2; ++dj) {
        for (std::size_t di = 0; di < 2; ++di) {
          const std::size_t i = ci + di, j = cj + dj;
          pc.volume.at(i, j, k) = static_cast<float>(uniform_real(rng, spec.calc_hu_min, spec.calc_hu_max));
          pc.calc_mask.set(i, j, k);
        }
      }
    }
  }
  return pc;
}

PhantomCase generate_classification_case(const PhantomSpec& spec, std::size_t class_label, std::uint64_t case_seed) {
  spec.check();
  if (class_label > 2) throw ValidationError("class label must be 0, 1 or 2");
  auto rng = case_rng(spec, case_seed);
  const std::size_t D = spec.dims[2];
  PhantomCase pc;
  pc.volume = blank_volume(spec, D);
  const Head head = paint_head(pc.volume, spec, rng);
  pc.calc_mask = BinaryMask(pc.volume.dims());
  pc.class_label = class_label;
  // Even-sided square inscribed in the tissue disc, so the checkerboard sums to
  // exactly zero on every slice.
  const auto side = 2 * static_cast<std::size_t>(head.inner / std::sqrt(2.0));
  const std::size_t i0 = static_cast<std::size_t>(head.cx) + 1 - side / 2;
  const std::size_t j0 = static_cast<std::size_t>(head.cy) + 1 - side / 2;
  const std::size_t z0 = class_label * D / 3;
  const std::size_t z1 = (class_label + 1) * D / 3;
  for (std::size_t k = z0; k < z1; ++k) {
    for (std::size_t j = j0; j < j0 + side; ++j) {
      for (std::size_t i = i0; i < i0 + side; ++i) {
        pc.volume.at(i, j, k) += static_cast<float>(((i + j) % 2 == 0) ? kTextureHu : -kTextureHu);
      }
    }
  }
  return pc;
}

FoldPlan make_folds(const std::vector<std::string>& case_ids, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("need at least 2 folds");
  if (case_ids.size() < 2 * k) {
    throw ValidationError("too few cases: " + std::to_string(case_ids.size()) + " for " + std::to_string(k) +
                          " folds");
  }
  std::set<std::string> unique(case_ids.begin(), case_ids.end());
  if (unique.size() != case_ids.size()) throw ValidationError("duplicate case id");
  std::vector<std::string> ids = case_ids;
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const std::size_t chunks = 2 * k;
  std::vector<std::vector<std::string>> chunk(chunks);
  for (std::size_t c = 0, pos = 0; c < chunks; ++c) {
    const std::size_t n = ids.size() / chunks + (c < ids.size() % chunks ? 1 : 0);
    chunk[c].assign(ids.begin() + static_cast<std::ptrdiff_t>(pos), ids.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
  }
  FoldPlan plan;
  for (std::size_t f = 0; f < k; ++f) {
    Fold fold;
    for (std::size_t c = 0; c < chunks; ++c) {
      auto& dst = (c == 2 * f || c == 2 * f + 1) ? fold.test : (c == (2 * f + 2) % chunks ? fold.val : fold.train);
      dst.insert(dst.end(), chunk[c].begin(), chunk[c].end());
    }
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

nlohmann::json to_json(const FoldPlan& p) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& f : p.folds) arr.push_back({{"train", f.train}, {"val", f.val}, {"test", f.test}});
  return arr;
}

void check_fold(const Fold& f, const std::vector<std::string>& cohort) {
  std::set<std::string> seen;
  for (const auto* list : {&f.train, &f.val, &f.test}) {
    for (const auto& id : *list) {
      if (!seen.insert(id).second) throw ValidationError("case " + id + " appears in more than one split");
    }
  }
  const std::set<std::string> all(cohort.begin(), cohort.end());
  if (seen != all) throw ValidationError("fold does not partition the cohort");
}

// ---------------------------------------------------------------------------
// manifests

void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  nlohmann::json j;
  j["version"] = m.version;
  j["task"] = m.task;
  j["z_increases_superior"] = m.z_increases_superior;
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& e : m.cases) {
    nlohmann::json c;
    c["case_id"] = e.case_id;
    c["volume"] = e.volume.generic_string();
    c["calc_mask"] = e.calc_mask.generic_string();
    c["landmarks"] = e.landmarks;
    c["class_label"] = e.class_label ? nlohmann::json(*e.class_label) : nlohmann::json(nullptr);
    cases.push_back(c);
  }
  j["cases"] = cases;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("manifest is not valid JSON: " + path.string());
  }
  Manifest m;
  const auto base = path.parent_path();
  try {
    m.version = j.at("version").get<int>();
    if (m.version != kManifestVersion) throw ValidationError("unsupported manifest version " + std::to_string(m.version));
    m.task = j.value("task", m.task);
    m.z_increases_superior = j.value("z_increases_superior", true);
    std::set<std::string> ids;
    for (const auto& c : j.at("cases")) {
      ManifestEntry e;
      e.case_id = c.at("case_id").get<std::string>();
      if (!ids.insert(e.case_id).second) throw ValidationError("duplicate case id " + e.case_id);
      e.volume = base / c.at("volume").get<std::string>();
      if (c.contains("calc_mask") && !c["calc_mask"].is_null()) e.calc_mask = base / c["calc_mask"].get<std::string>();
      e.landmarks = c.value("landmarks", LandmarkSet{});
      if (c.contains("class_label") && !c["class_label"].is_null()) e.class_label = c["class_label"].get<std::size_t>();
      m.cases.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad manifest: ") + e.what());
  }
  return m;
}

std::vector<PhantomCase> generate_cohort(const PhantomSpec& spec, std::size_t count, CohortTask task) {
  std::vector<PhantomCase> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    PhantomCase c = task == CohortTask::Localization ? generate_phantom(spec, i)
                                                     : generate_classification_case(spec, i % 3, i);
    c.case_id = case_name(i);
    out.push_back(std::move(c));
  }
  return out;
}

std::filesystem::path write_cohort(const std::vector<PhantomCase>& cases, const std::filesystem::path& dir,
                                   CohortTask task) {
  std::filesystem::create_directories(dir);
  Manifest m;
  m.task = task == CohortTask::Localization ? "localization" : "classification";
  for (const auto& c : cases) {
    ManifestEntry e;
    e.case_id = c.case_id;
    e.volume = c.case_id + ".dstvol";
    e.calc_mask = c.case_id + "_calc.dstvol";
    e.landmarks = c.landmarks;
    e.class_label = c.class_label;
    save_volume(c.volume, dir / e.volume);
    save_mask(c.calc_mask, c.volume.geometry, dir / e.calc_mask);
    m.cases.push_back(std::move(e));
  }
  const auto path = dir / "manifest.json";
  save_manifest(m, path);
  return path;
}

}  // namespace depthseq
