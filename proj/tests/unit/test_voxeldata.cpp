#include <doctest.h>

#include <cstring>
#include <fstream>

#include "sparsespect/volume.hpp"
#include "unit/test_util.hpp"

using namespace sparsespect;

namespace {

// Value encodes its own index so every lookup can be checked by arithmetic.
Volume3D ramp(Dims3 d) {
  Volume3D v(d, 2.5);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) v(x, y, z) = x + 100.0 * y + 10000.0 * z;
  return v;
}

std::vector<unsigned char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("storage is x-fastest, then y, then z") {
  Volume3D v({3, 4, 5}, 1.0);
  CHECK(v.index(1, 0, 0) == 1);
  CHECK(v.index(0, 1, 0) == 3);
  CHECK(v.index(0, 0, 1) == 12);
  CHECK(v.size() == 60);
}

TEST_CASE("crop of 64 cube to 48 about the center") {
  const Volume3D v = ramp({64, 64, 64});
  const Volume3D c = crop_centered(v, {32, 32, 32}, {48, 48, 48});
  CHECK(c.dims() == Dims3{48, 48, 48});
  CHECK(c.voxel_mm() == 2.5);
  CHECK(c(0, 0, 0) == v(8, 8, 8));
  CHECK(c(47, 47, 47) == v(55, 55, 55));
}

TEST_CASE("crop with the full size about dims/2 is the identity") {
  for (Dims3 d : {Dims3{8, 8, 8}, Dims3{7, 9, 5}, Dims3{16, 4, 10}}) {
    const Volume3D v = ramp(d);
    CHECK(crop_centered(v, {d.nx / 2, d.ny / 2, d.nz / 2}, d) == v);
  }
}

TEST_CASE("crop of an 8 cube ramp matches index arithmetic") {
  const Volume3D v = ramp({8, 8, 8});
  const Volume3D c = crop_centered(v, {4, 4, 4}, {4, 4, 4});
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 4; ++j)
      for (int i = 0; i < 4; ++i) {
        // origin = center - size/2 = 2
        CHECK(c(i, j, k) == (i + 2) + 100.0 * (j + 2) + 10000.0 * (k + 2));
      }
}

TEST_CASE("crop windows leaving the volume are rejected") {
  const Volume3D v = ramp({8, 8, 8});
  CHECK_THROWS_AS(crop_centered(v, {1, 4, 4}, {4, 4, 4}), std::out_of_range);
  CHECK_THROWS_AS(crop_centered(v, {4, 4, 7}, {4, 4, 4}), std::out_of_range);
  CHECK_THROWS_AS(crop_centered(v, {4, 4, 4}, {0, 4, 4}), std::invalid_argument);
}

TEST_CASE("embedding a crop back at the same center restores the region") {
  const Volume3D v = testutil::random_volume({12, 10, 9}, 3);
  const Index3 center{6, 4, 5};
  const Volume3D patch = crop_centered(v, center, {6, 4, 4});
  Volume3D target({12, 10, 9}, 1.0, -1.0);
  embed_centered(target, patch, center);
  CHECK(crop_centered(target, center, {6, 4, 4}) == patch);
  const Index3 o = crop_origin(center, {6, 4, 4});
  CHECK(target(o[0], o[1], o[2]) == v(o[0], o[1], o[2]));
  CHECK(target(0, 0, 0) == -1.0);
}

TEST_CASE("slice extraction") {
  SUBCASE("central slice of a 48 cube") {
    const Volume3D v = ramp({48, 48, 48});
    const Slice2D s = slice_extract(v, 24);
    CHECK(s.nx() == 48);
    CHECK(s(5, 7) == v(5, 7, 24));
  }
  SUBCASE("constant volume") {
    const Slice2D s = slice_extract(Volume3D({5, 6, 7}, 1.0, 3.25), 2);
    for (double x : s.data()) CHECK(x == 3.25);
  }
  SUBCASE("ramp values follow the index formula") {
    const Volume3D v = ramp({6, 5, 4});
    for (int z = 0; z < 4; ++z) {
      const Slice2D s = slice_extract(v, z);
      for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 6; ++x) CHECK(s(x, y) == x + 100.0 * y + 10000.0 * z);
    }
  }
  SUBCASE("out of range") {
    const Volume3D v({4, 4, 4}, 1.0);
    CHECK_THROWS_AS(slice_extract(v, 4), std::out_of_range);
    CHECK_THROWS_AS(slice_extract(v, -1), std::out_of_range);
  }
}

TEST_CASE("restacking every slice reproduces the volume") {
  const Volume3D v = testutil::random_volume({7, 5, 6}, 11);
  std::vector<Slice2D> slices;
  for (int z = 0; z < 6; ++z) slices.push_back(slice_extract(v, z));
  CHECK(stack_slices(slices, v.voxel_mm()) == v);
}

TEST_CASE("spv round trip is bit exact") {
  testutil::TempDir tmp("voxel");
  const auto p = tmp.path() / "v.spv";
  Volume3D v = testutil::random_volume({16, 16, 16}, 5, -1e3, 1e3);
  v(0, 0, 0) = 5e-324;  // denormal
  v(1, 0, 0) = -0.0;
  write_volume(v, p);
  CHECK(std::filesystem::file_size(p) == kSpvHeaderBytes + 16 * 16 * 16 * 8);
  const Volume3D r = read_volume(p);
  CHECK(r.dims() == v.dims());
  CHECK(r.voxel_mm() == v.voxel_mm());
  CHECK(std::memcmp(r.data().data(), v.data().data(), v.size() * sizeof(double)) == 0);
}

TEST_CASE("spv header layout") {
  testutil::TempDir tmp("voxelhdr");
  const auto p = tmp.path() / "v.spv";
  write_volume(Volume3D({3, 4, 5}, 4.0, 1.0), p);
  const auto b = slurp(p);
  CHECK(std::string(b.begin(), b.begin() + 4) == "SPV1");
  auto u32 = [&](std::size_t off) { return b[off] | (b[off + 1] << 8) | (b[off + 2] << 16) | (b[off + 3] << 24); };
  CHECK(u32(4) == 3);
  CHECK(u32(8) == 4);
  CHECK(u32(12) == 5);
  double pitch;
  std::memcpy(&pitch, b.data() + 16, 8);
  CHECK(pitch == 4.0);
  for (std::size_t i = 24; i < 32; ++i) CHECK(b[i] == 0);
}

TEST_CASE("corrupt spv files are rejected") {
  testutil::TempDir tmp("voxelbad");
  const auto p = tmp.path() / "v.spv";
  write_volume(testutil::random_volume({4, 4, 4}, 9), p);
  const auto good = slurp(p);

  SUBCASE("bad magic") {
    auto b = good;
    b[0] = 'X';
    spit(p, b);
    CHECK_THROWS_AS(read_volume(p), FormatError);
  }
  SUBCASE("short payload") {
    auto b = good;
    b.resize(b.size() - 8);
    spit(p, b);
    CHECK_THROWS_AS(read_volume(p), FormatError);
  }
  SUBCASE("trailing bytes") {
    auto b = good;
    b.push_back(0);
    spit(p, b);
    CHECK_THROWS_AS(read_volume(p), FormatError);
  }
  SUBCASE("truncated header") {
    auto b = good;
    b.resize(10);
    spit(p, b);
    CHECK_THROWS_AS(read_volume(p), FormatError);
  }
  SUBCASE("missing file") { CHECK_THROWS(read_volume(tmp.path() / "absent.spv")); }
}
