#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sparsespect {

/// Thrown for malformed on-disk data (bad magic, truncated payload, ...).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dims3 {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  bool positive() const { return nx > 0 && ny > 0 && nz > 0; }
  friend bool operator==(const Dims3&, const Dims3&) = default;
};

using Index3 = std::array<int, 3>;
using Point3 = std::array<double, 3>;

std::string to_string(const Dims3& d);

/// Dense voxel grid stored x-fastest, then y, then z.
class Volume3D {
 public:
  Volume3D() = default;
  Volume3D(Dims3 dims, double voxel_mm, double fill = 0.0);
  Volume3D(Dims3 dims, double voxel_mm, std::vector<double> data);

  const Dims3& dims() const { return dims_; }
  double voxel_mm() const { return voxel_mm_; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * static_cast<std::size_t>(dims_.ny) + static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(dims_.nx) +
           static_cast<std::size_t>(x);
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims_.nx && y < dims_.ny && z < dims_.nz;
  }

  double& operator()(int x, int y, int z) { return data_[index(x, y, z)]; }
  double operator()(int x, int y, int z) const { return data_[index(x, y, z)]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }

  double sum() const;
  double min() const;
  double max() const;

  friend bool operator==(const Volume3D&, const Volume3D&) = default;

 private:
  Dims3 dims_{};
  double voxel_mm_ = 1.0;
  std::vector<double> data_;
};

/// One short-axis plane (x-fastest).
class Slice2D {
 public:
  Slice2D() = default;
  Slice2D(int nx, int ny, double fill = 0.0);
  Slice2D(int nx, int ny, std::vector<double> data);

  int nx() const { return nx_; }
  int ny() const { return ny_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(int x, int y) { return data_[static_cast<std::size_t>(y) * nx_ + x]; }
  double operator()(int x, int y) const { return data_[static_cast<std::size_t>(y) * nx_ + x]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  friend bool operator==(const Slice2D&, const Slice2D&) = default;

 private:
  int nx_ = 0;
  int ny_ = 0;
  std::vector<double> data_;
};

/// Window origin used by crop_centered / embed_centered: center - size/2.
Index3 crop_origin(const Index3& center, const Dims3& size);

/// Extracts the `size` window whose origin is center - size/2. Throws
/// std::out_of_range if the window leaves the volume.
Volume3D crop_centered(const Volume3D& vol, const Index3& center, const Dims3& size);

/// Writes `patch` back into `target` at the window crop_centered would read.
void embed_centered(Volume3D& target, const Volume3D& patch, const Index3& center);

Slice2D slice_extract(const Volume3D& vol, int z);

/// Inverse of slice_extract over all z.
Volume3D stack_slices(const std::vector<Slice2D>& slices, double voxel_mm);

/// Rounds a continuous voxel coordinate to the nearest grid index.
Index3 round_index(const Point3& p);

// ".spv" binary format: 32-byte header ("SPV1", three u32 LE dims, f64 LE
// voxel pitch, 8 reserved zero bytes) followed by nx*ny*nz f64 LE values.
inline constexpr std::size_t kSpvHeaderBytes = 32;

void write_volume(const Volume3D& vol, const std::filesystem::path& path);
Volume3D read_volume(const std::filesystem::path& path);

}  // namespace sparsespect
