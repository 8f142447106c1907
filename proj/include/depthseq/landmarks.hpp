#pragma once

#include <cstddef>
#include <vector>

namespace depthseq {

// Six slice indices in the order: left carotid canal, left petrolingual ligament,
// left anterior clinoid ligament, then the same three on the right.
using LandmarkSet = std::vector<std::size_t>;

inline constexpr std::size_t kLandmarksPerSide = 3;
inline constexpr std::size_t kDefaultLandmarks = 2 * kLandmarksPerSide;

// Per-landmark distributions over the valid slices, row-major [n][depth].
struct PredictionSet {
  std::size_t n = 0;
  std::size_t depth = 0;
  std::vector<double> probs;

  PredictionSet() = default;
  PredictionSet(std::size_t n_, std::size_t depth_) : n(n_), depth(depth_), probs(n_ * depth_, 0.0) {}

  double at(std::size_t j, std::size_t z) const { return probs[j * depth + z]; }
  double& at(std::size_t j, std::size_t z) { return probs[j * depth + z]; }
};

// Throws ValidationError if an index is outside [0, depth) or a side is not
// monotone (canal <= petrolingual <= anterior clinoid).
void check_landmarks(const LandmarkSet& z, std::size_t depth);

}  // namespace depthseq
