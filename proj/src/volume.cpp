#include "sparsespect/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>

namespace sparsespect {

namespace {

static_assert(std::endian::native == std::endian::little, "spv I/O assumes a little-endian host");

void put_u32(unsigned char* p, std::uint32_t v) { std::memcpy(p, &v, sizeof v); }
void put_f64(unsigned char* p, double v) { std::memcpy(p, &v, sizeof v); }
std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v;
  std::memcpy(&v, p, sizeof v);
  return v;
}
double get_f64(const unsigned char* p) {
  double v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

}  // namespace

std::string to_string(const Dims3& d) {
  return std::to_string(d.nx) + "x" + std::to_string(d.ny) + "x" + std::to_string(d.nz);
}

Volume3D::Volume3D(Dims3 dims, double voxel_mm, double fill) : dims_(dims), voxel_mm_(voxel_mm) {
  if (!dims.positive()) throw std::invalid_argument("Volume3D: dims must be positive, got " + to_string(dims));
  if (!(voxel_mm > 0.0)) throw std::invalid_argument("Volume3D: voxel_mm must be > 0");
  data_.assign(dims.count(), fill);
}

Volume3D::Volume3D(Dims3 dims, double voxel_mm, std::vector<double> data)
    : dims_(dims), voxel_mm_(voxel_mm), data_(std::move(data)) {
  if (!dims.positive()) throw std::invalid_argument("Volume3D: dims must be positive, got " + to_string(dims));
  if (!(voxel_mm > 0.0)) throw std::invalid_argument("Volume3D: voxel_mm must be > 0");
  if (data_.size() != dims.count()) throw std::invalid_argument("Volume3D: data length does not match dims");
}

double Volume3D::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
double Volume3D::min() const { return *std::min_element(data_.begin(), data_.end()); }
double Volume3D::max() const { return *std::max_element(data_.begin(), data_.end()); }

Slice2D::Slice2D(int nx, int ny, double fill) : nx_(nx), ny_(ny) {
  if (nx <= 0 || ny <= 0) throw std::invalid_argument("Slice2D: dims must be positive");
  data_.assign(static_cast<std::size_t>(nx) * ny, fill);
}

Slice2D::Slice2D(int nx, int ny, std::vector<double> data) : nx_(nx), ny_(ny), data_(std::move(data)) {
  if (nx <= 0 || ny <= 0) throw std::invalid_argument("Slice2D: dims must be positive");
  if (data_.size() != static_cast<std::size_t>(nx) * ny) throw std::invalid_argument("Slice2D: data length mismatch");
}

Index3 crop_origin(const Index3& center, const Dims3& size) {
  return {center[0] - size.nx / 2, center[1] - size.ny / 2, center[2] - size.nz / 2};
}

namespace {

void check_window(const Dims3& outer, const Index3& origin, const Dims3& size) {
  if (!size.positive()) throw std::invalid_argument("crop: size must be positive, got " + to_string(size));
  const bool inside = origin[0] >= 0 && origin[1] >= 0 && origin[2] >= 0 && origin[0] + size.nx <= outer.nx &&
                      origin[1] + size.ny <= outer.ny && origin[2] + size.nz <= outer.nz;
  if (!inside) {
    throw std::out_of_range("crop: window " + to_string(size) + " at origin (" + std::to_string(origin[0]) + "," +
                            std::to_string(origin[1]) + "," + std::to_string(origin[2]) + ") leaves volume " +
                            to_string(outer));
  }
}

}  // namespace

Volume3D crop_centered(const Volume3D& vol, const Index3& center, const Dims3& size) {
  const Index3 o = crop_origin(center, size);
  check_window(vol.dims(), o, size);
  Volume3D out(size, vol.voxel_mm());
  for (int z = 0; z < size.nz; ++z)
    for (int y = 0; y < size.ny; ++y) {
      const double* src = &vol.data()[vol.index(o[0], o[1] + y, o[2] + z)];
      std::copy(src, src + size.nx, &out.data()[out.index(0, y, z)]);
    }
  return out;
}

void embed_centered(Volume3D& target, const Volume3D& patch, const Index3& center) {
  const Index3 o = crop_origin(center, patch.dims());
  check_window(target.dims(), o, patch.dims());
  const Dims3& s = patch.dims();
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y) {
      const double* src = &patch.data()[patch.index(0, y, z)];
      std::copy(src, src + s.nx, &target.data()[target.index(o[0], o[1] + y, o[2] + z)]);
    }
}

Slice2D slice_extract(const Volume3D& vol, int z) {
  const Dims3& d = vol.dims();
  if (z < 0 || z >= d.nz) {
    throw std::out_of_range("slice_extract: index " + std::to_string(z) + " outside [0," + std::to_string(d.nz) + ")");
  }
  const auto plane = static_cast<std::size_t>(d.nx) * d.ny;
  const double* src = &vol.data()[plane * z];
  return Slice2D(d.nx, d.ny, std::vector<double>(src, src + plane));
}

Volume3D stack_slices(const std::vector<Slice2D>& slices, double voxel_mm) {
  if (slices.empty()) throw std::invalid_argument("stack_slices: no slices");
  const int nx = slices.front().nx(), ny = slices.front().ny();
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(nx) * ny * slices.size());
  for (const auto& s : slices) {
    if (s.nx() != nx || s.ny() != ny) throw std::invalid_argument("stack_slices: inconsistent slice dims");
    data.insert(data.end(), s.data().begin(), s.data().end());
  }
  return Volume3D({nx, ny, static_cast<int>(slices.size())}, voxel_mm, std::move(data));
}

Index3 round_index(const Point3& p) {
  return {static_cast<int>(std::lround(p[0])), static_cast<int>(std::lround(p[1])),
          static_cast<int>(std::lround(p[2]))};
}

void write_volume(const Volume3D& vol, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_volume: cannot open " + path.string());
  unsigned char header[kSpvHeaderBytes] = {};
  std::memcpy(header, "SPV1", 4);
  put_u32(header + 4, static_cast<std::uint32_t>(vol.dims().nx));
  put_u32(header + 8, static_cast<std::uint32_t>(vol.dims().ny));
  put_u32(header + 12, static_cast<std::uint32_t>(vol.dims().nz));
  put_f64(header + 16, vol.voxel_mm());
  out.write(reinterpret_cast<const char*>(header), sizeof header);
  out.write(reinterpret_cast<const char*>(vol.data().data()),
            static_cast<std::streamsize>(vol.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write_volume: write failed for " + path.string());
}

Volume3D read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_volume: cannot open " + path.string());
  unsigned char header[kSpvHeaderBytes];
  if (!in.read(reinterpret_cast<char*>(header), sizeof header)) {
    throw FormatError("read_volume: truncated header in " + path.string());
  }
  if (std::memcmp(header, "SPV1", 4) != 0) throw FormatError("read_volume: bad magic in " + path.string());
  const Dims3 dims{static_cast<int>(get_u32(header + 4)), static_cast<int>(get_u32(header + 8)),
                   static_cast<int>(get_u32(header + 12))};
  const double voxel_mm = get_f64(header + 16);
  if (!dims.positive() || !(voxel_mm > 0.0)) throw FormatError("read_volume: invalid header in " + path.string());
  std::vector<double> data(dims.count());
  const auto bytes = static_cast<std::streamsize>(data.size() * sizeof(double));
  in.read(reinterpret_cast<char*>(data.data()), bytes);
  if (in.gcount() != bytes) {
    throw FormatError("read_volume: payload shorter than header dims " + to_string(dims) + " in " + path.string());
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("read_volume: trailing bytes after payload in " + path.string());
  }
  return Volume3D(dims, voxel_mm, std::move(data));
}

}  // namespace sparsespect
