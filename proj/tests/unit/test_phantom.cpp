#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "sparsespect/phantom.hpp"
#include "unit/test_util.hpp"

using namespace sparsespect;

namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 rot_x(double deg) {
  const double a = deg * std::numbers::pi / 180.0, c = std::cos(a), s = std::sin(a);
  return {{{1, 0, 0}, {0, c, -s}, {0, s, c}}};
}

Mat3 rot_y(double deg) {
  const double a = deg * std::numbers::pi / 180.0, c = std::cos(a), s = std::sin(a);
  return {{{c, 0, s}, {0, 1, 0}, {-s, 0, c}}};
}

Mat3 mul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
  return r;
}

// Independent voxel classifier: world = Ry * Rx * lv, so lv = (Ry Rx)^T world.
bool oracle_in_shell(const LvGeometry& g, double voxel_mm, int x, int y, int z) {
  const Mat3 m = mul(rot_y(g.tilt_deg[1]), rot_x(g.tilt_deg[0]));
  const double w[3] = {(x - g.center_vox[0]) * voxel_mm, (y - g.center_vox[1]) * voxel_mm,
                       (z - g.center_vox[2]) * voxel_mm};
  double l[3] = {0, 0, 0};
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) l[i] += m[k][i] * w[k];
  if (l[2] > g.base_z_mm) return false;
  const double L = g.base_z_mm - g.apex_z_mm, R = g.outer_radius_mm, t = g.wall_thickness_mm;
  const double dz = l[2] - g.base_z_mm, rho2 = l[0] * l[0] + l[1] * l[1];
  const bool outer = rho2 / (R * R) + dz * dz / (L * L) <= 1.0;
  const bool inner = rho2 / ((R - t) * (R - t)) + dz * dz / ((L - t) * (L - t)) <= 1.0;
  return outer && !inner;
}

LvGeometry geometry_at(Dims3 d) {
  LvGeometry g;
  g.center_vox = {d.nx / 2.0, d.ny / 2.0, d.nz / 2.0};
  return g;
}

}  // namespace

TEST_CASE("default geometry at 48 cube matches an independent voxel classifier") {
  const Dims3 d{48, 48, 48};
  for (std::array<double, 2> tilt : {std::array<double, 2>{0, 0}, {7.5, -4.0}, {-10.0, 10.0}}) {
    LvGeometry g = geometry_at(d);
    g.tilt_deg = tilt;
    const LvPhantom p = generate_lv_phantom(g, d, 4.0);
    std::size_t expected = 0, mismatches = 0;
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
          const bool in = oracle_in_shell(g, 4.0, x, y, z);
          expected += in;
          mismatches += in != (p.wall_mask(x, y, z) == 1.0);
        }
    CHECK(expected > 100);
    CHECK(mismatches == 0);
    CHECK(p.wall_mask.sum() == doctest::Approx(static_cast<double>(expected)));
  }
}

TEST_CASE("activity is an indicator of the mask with unit wall and zero background") {
  LvGeometry g = geometry_at({48, 48, 48});
  g.wall_activity = 1.0;
  g.background_activity = 0.0;
  const LvPhantom p = generate_lv_phantom(g, {48, 48, 48}, 4.0);
  CHECK(p.activity == p.wall_mask);
}

TEST_CASE("thin walls shrink the mask towards nothing") {
  double prev = 1e300;
  for (double t : {8.0, 2.0, 0.5, 1e-6}) {
    LvGeometry g = geometry_at({48, 48, 48});
    g.wall_thickness_mm = t;
    const double n = generate_lv_phantom(g, {48, 48, 48}, 4.0).wall_mask.sum();
    CHECK(n <= prev);
    prev = n;
  }
  CHECK(prev < 20.0);
}

TEST_CASE("geometry checks") {
  LvGeometry g = geometry_at({48, 48, 48});
  CHECK_THROWS_AS(generate_lv_phantom(g, {16, 16, 16}, 4.0), std::out_of_range);
  g.wall_thickness_mm = 40.0;
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
  g = geometry_at({48, 48, 48});
  g.background_activity = 2.0;
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
  g = geometry_at({48, 48, 48});
  g.apex_z_mm = 40.0;
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
}

TEST_CASE("wall location angle convention") {
  CHECK(wall_angle_deg(WallLocation::lateral) == 0.0);
  CHECK(wall_angle_deg(WallLocation::anterior) == 90.0);
  CHECK(wall_angle_deg(WallLocation::septal) == 180.0);
  CHECK(wall_angle_deg(WallLocation::inferior) == 270.0);
  for (auto l : {WallLocation::lateral, WallLocation::anterior, WallLocation::septal, WallLocation::inferior}) {
    CHECK(parse_wall_location(to_string(l)) == l);
  }
  CHECK_THROWS_AS(parse_wall_location("apical"), std::invalid_argument);
}

TEST_CASE("inferior 30 degree 25 percent defect removes a quarter of the sector") {
  const Dims3 d{48, 48, 48};
  const LvGeometry g = geometry_at(d);
  const LvPhantom p = generate_lv_phantom(g, d, 4.0);
  DefectSpec spec;
  spec.location = WallLocation::inferior;
  spec.center_angle_deg = 270.0;
  spec.extent_deg = 30.0;
  spec.severity_frac = 0.25;
  const auto ins = make_defect_volume(p.activity, p.wall_mask, g, spec);

  // Independent sector selection: polar angle in the untilted frame.
  int zlo = d.nz, zhi = -1;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x)
        if (p.wall_mask(x, y, z) != 0.0) zlo = std::min(zlo, z), zhi = std::max(zhi, z);
  const int s_lo = (zlo + zhi) / 2 - spec.axial_extent_slices / 2;
  double sector_activity = 0.0;
  for (int z = s_lo; z < s_lo + spec.axial_extent_slices; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        if (p.wall_mask(x, y, z) == 0.0) continue;
        double ang = std::atan2(y - g.center_vox[1], x - g.center_vox[0]) * 180.0 / std::numbers::pi;
        if (ang < 0) ang += 360.0;
        if (std::abs(ang - 270.0) <= 15.0) sector_activity += p.activity(x, y, z);
      }
  CHECK(sector_activity > 0.0);
  CHECK(ins.defect_only.sum() == doctest::Approx(0.25 * sector_activity).epsilon(1e-12));

  // Inferior is -y from the center.
  CHECK(ins.meta.defect_centroid_vox[1] < g.center_vox[1] - 3.0);
  CHECK(std::abs(ins.meta.defect_centroid_vox[0] - g.center_vox[0]) < 1.0);
  CHECK(ins.meta.defect_present);
  REQUIRE(ins.meta.defect.has_value());
  CHECK(ins.meta.slice_lo == zlo);
  CHECK(ins.meta.slice_hi == zhi);
}

TEST_CASE("defect properties") {
  const Dims3 d{48, 48, 48};
  LvGeometry g = geometry_at(d);
  g.tilt_deg = {6.0, -3.0};
  const LvPhantom p = generate_lv_phantom(g, d, 4.0);

  SUBCASE("subtraction never goes negative and the centroid lies in the wall") {
    for (double ang : {0.0, 90.0, 180.0, 270.0, 45.0}) {
      DefectSpec spec;
      spec.center_angle_deg = ang;
      const auto ins = make_defect_volume(p.activity, p.wall_mask, g, spec);
      for (std::size_t i = 0; i < ins.defect_only.size(); ++i) {
        CHECK(p.activity.data()[i] - ins.defect_only.data()[i] >= 0.0);
      }
      const Index3 c = round_index(ins.meta.defect_centroid_vox);
      CHECK(p.wall_mask(c[0], c[1], c[2]) == 1.0);
    }
  }
  SUBCASE("a full turn of the center angle changes nothing") {
    DefectSpec a, b;
    a.center_angle_deg = 100.0;
    b.center_angle_deg = 460.0;
    CHECK(make_defect_volume(p.activity, p.wall_mask, g, a).defect_only ==
          make_defect_volume(p.activity, p.wall_mask, g, b).defect_only);
  }
  SUBCASE("full sector, full severity, whole wall equals the wall activity") {
    DefectSpec spec;
    spec.extent_deg = 360.0;
    spec.severity_frac = 1.0;
    spec.axial_extent_slices = 2 * d.nz;
    const auto ins = make_defect_volume(p.activity, p.wall_mask, g, spec);
    for (std::size_t i = 0; i < p.activity.size(); ++i) {
      CHECK(ins.defect_only.data()[i] == p.activity.data()[i] * p.wall_mask.data()[i]);
    }
  }
  SUBCASE("zero severity is rejected") {
    DefectSpec spec;
    spec.severity_frac = 0.0;
    CHECK_THROWS_AS(make_defect_volume(p.activity, p.wall_mask, g, spec), std::invalid_argument);
  }
}

TEST_CASE("population sampling") {
  PopulationConfig cfg;
  SUBCASE("same seed gives the same population") {
    const auto a = sample_population(cfg, 10, 42);
    const auto b = sample_population(cfg, 10, 42);
    for (int i = 0; i < 10; ++i) {
      CHECK(a[i].activity == b[i].activity);
      CHECK(a[i].meta.defect_present == b[i].meta.defect_present);
      CHECK(a[i].meta.signal_location_vox == b[i].meta.signal_location_vox);
    }
    const auto c = sample_population(cfg, 10, 43);
    CHECK_FALSE(a[0].activity == c[0].activity);
  }
  SUBCASE("184 samples carry distinct ids, clusters equal ids, half have defects") {
    const auto present = assign_presence(184, 92, 7);
    CHECK(std::count(present.begin(), present.end(), true) == 92);
    std::set<int> ids;
    for (int i = 0; i < 184; ++i) {
      const auto s = draw_sample(cfg, i, present[i], 7);
      ids.insert(s.meta.sample_id);
      CHECK(s.meta.cluster_id == s.meta.sample_id);
      CHECK(s.meta.defect_present == present[i]);
      CHECK(s.defect_only.has_value() == present[i]);
      if (!present[i]) CHECK(s.meta.defect_centroid_vox == s.meta.lv_center_vox);
    }
    CHECK(ids.size() == 184);
  }
  SUBCASE("slice range is the z extent of the wall") {
    const auto s = draw_sample(cfg, 3, false, 99);
    int lo = 1000, hi = -1;
    const Dims3& d = s.wall_mask.dims();
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x)
          if (s.wall_mask(x, y, z) != 0.0) lo = std::min(lo, z), hi = std::max(hi, z);
    CHECK(s.meta.slice_lo == lo);
    CHECK(s.meta.slice_hi == hi);
  }
}

TEST_CASE("drawn geometry stays inside the configured ranges over 1000 draws") {
  PopulationConfig cfg;
  for (int i = 0; i < 1000; ++i) {
    const auto s = draw_sample(cfg, i, i % 2 == 0, 1234);
    const auto& g = s.geom;
    auto in = [](double v, const Range& r) { return v >= r.lo && v <= r.hi; };
    CHECK(in(g.outer_radius_mm, cfg.outer_radius_mm));
    CHECK(in(g.wall_thickness_mm, cfg.wall_thickness_mm));
    CHECK(in(g.apex_z_mm, cfg.apex_z_mm));
    CHECK(in(g.base_z_mm, cfg.base_z_mm));
    CHECK(in(g.wall_activity, cfg.wall_activity));
    CHECK(in(g.background_activity, cfg.background_activity));
    CHECK(in(g.tilt_deg[0], cfg.tilt_deg));
    CHECK(in(g.tilt_deg[1], cfg.tilt_deg));
    for (int a = 0; a < 3; ++a) CHECK(in(g.center_vox[a] - 32.0, cfg.center_offset_vox));
  }
}

TEST_CASE("invalid population ranges are rejected") {
  PopulationConfig cfg;
  cfg.outer_radius_mm = {30.0, 20.0};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = PopulationConfig{};
  cfg.present_fraction = 1.5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_THROWS_AS(sample_population(PopulationConfig{}, 0, 1), std::invalid_argument);
}
