#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace depthseq {

struct GradCheckEntry {
  std::string op;
  std::size_t shapes = 0;  // random shapes tried
  double max_rel_error = 0.0;
};

// Central-difference checks of every differentiable op and of the composite
// localization + classification loss of a small model, each on `shapes` random shapes.
std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed, std::size_t shapes = 10, double eps = 1e-3);

nlohmann::json to_json(const std::vector<GradCheckEntry>& entries);

}  // namespace depthseq
