#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "depthseq/volume.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("depthseq_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline depthseq::BinaryMask random_mask(const depthseq::Dims& d, double p, std::mt19937_64& rng) {
  depthseq::BinaryMask m(d);
  std::bernoulli_distribution b(p);
  for (auto& v : m.bits) v = b(rng) ? 1 : 0;
  return m;
}

}  // namespace testing
