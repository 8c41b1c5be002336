#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "sparsespect/rng.hpp"
#include "sparsespect/volume.hpp"

namespace testutil {

inline sparsespect::Volume3D random_volume(sparsespect::Dims3 d, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  sparsespect::Rng rng(seed);
  sparsespect::Volume3D v(d, 1.0);
  for (double& x : v.storage()) x = rng.uniform(lo, hi);
  return v;
}

inline double rel_diff(double a, double b) {
  const double s = std::max(std::abs(a), std::abs(b));
  return s == 0.0 ? 0.0 : std::abs(a - b) / s;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("sparsespect_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
