#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "depthseq/landmarks.hpp"
#include "depthseq/volume.hpp"

namespace depthseq {

inline constexpr double kAirHu = -1000.0;
inline constexpr double kTissueHu = 40.0;

struct PhantomSpec {
  Dims dims{32, 32, 24};
  Vec3 spacing{0.5, 0.5, 1.0};
  // Outer skull radius as a fraction of half the in-plane extent.
  double skull_radius_min = 0.82;
  double skull_radius_max = 0.94;
  std::size_t landmark_margin = 2;
  std::size_t calc_count_min = 1;
  std::size_t calc_count_max = 4;  // per side
  double calc_hu_min = 400.0;
  double calc_hu_max = 1200.0;
  double skull_hu_min = 700.0;
  double skull_hu_max = 1400.0;
  double noise_sigma = 10.0;
  // Vessel radius below the first landmark is drawn from [min, max] voxels and
  // grows by `vessel_radius_step` above each landmark. A range wider than the
  // step hides which landmark a local radius belongs to.
  double vessel_radius_min = 1.0;
  double vessel_radius_max = 1.6;
  double vessel_radius_step = 0.9;
  // Each case drops up to this many inferior slices, so depth varies across a cohort.
  std::size_t depth_jitter = 0;
  std::uint64_t seed = 7;

  void check() const;
};

nlohmann::json to_json(const PhantomSpec& s);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);

struct PhantomCase {
  std::string case_id;
  Volume volume;
  LandmarkSet landmarks;
  BinaryMask calc_mask;
  std::optional<std::size_t> class_label;
};

// Deterministic in (spec, case_seed). Each side has a vessel whose radius grows
// by one step above every landmark slice, with a faint density band on the
// landmark slice itself; the base radius varies per case.
PhantomCase generate_phantom(const PhantomSpec& spec, std::uint64_t case_seed);

// Head phantom without landmark structure; a zero-mean checkerboard texture
// fills the depth third selected by `class_label` (0, 1 or 2).
PhantomCase generate_classification_case(const PhantomSpec& spec, std::size_t class_label, std::uint64_t case_seed);

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

struct FoldPlan {
  std::vector<Fold> folds;
};

// The shuffled ids are cut into 2k near-equal chunks; fold f tests on chunks
// 2f and 2f+1, validates on chunk 2f+2 (mod 2k) and trains on the rest.
FoldPlan make_folds(const std::vector<std::string>& case_ids, std::size_t k = 5, std::uint64_t seed = 0);
nlohmann::json to_json(const FoldPlan& p);

// Throws ValidationError if an id repeats within a fold or a fold misses an id.
void check_fold(const Fold& f, const std::vector<std::string>& cohort);

inline constexpr int kManifestVersion = 1;

struct ManifestEntry {
  std::string case_id;
  std::filesystem::path volume;
  std::filesystem::path calc_mask;
  LandmarkSet landmarks;
  std::optional<std::size_t> class_label;
};

struct Manifest {
  int version = kManifestVersion;
  std::string task = "localization";  // or "classification"
  bool z_increases_superior = true;
  std::vector<ManifestEntry> cases;
};

// Paths in the file are relative to the manifest's directory; loading resolves them.
void save_manifest(const Manifest& m, const std::filesystem::path& path);
Manifest load_manifest(const std::filesystem::path& path);

enum class CohortTask { Localization, Classification };

// Cases case_000, case_001, ... with case_seed = index. Classification labels cycle 0,1,2.
std::vector<PhantomCase> generate_cohort(const PhantomSpec& spec, std::size_t count, CohortTask task);

// Writes volumes, calcification masks and manifest.json under `dir`; returns the manifest path.
std::filesystem::path write_cohort(const std::vector<PhantomCase>& cases, const std::filesystem::path& dir,
                                   CohortTask task);

}  // namespace depthseq
