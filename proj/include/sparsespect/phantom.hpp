#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sparsespect/rng.hpp"
#include "sparsespect/volume.hpp"

namespace sparsespect {

/// Left-ventricle shell: half of an ellipsoidal shell whose equator sits on
/// the base plane and whose long axis runs along z (optionally tilted).
/// Lengths are in mm; z offsets are relative to center_vox.
struct LvGeometry {
  Point3 center_vox{0.0, 0.0, 0.0};
  double outer_radius_mm = 28.0;
  double wall_thickness_mm = 10.0;
  double apex_z_mm = -40.0;
  double base_z_mm = 28.0;
  double wall_activity = 1.0;
  double background_activity = 0.1;
  std::array<double, 2> tilt_deg{0.0, 0.0};  // about x, then about y

  void validate() const;
};

enum class WallLocation { anterior, inferior, septal, lateral };

/// Short-axis polar angle of a wall, counterclockwise from +x.
double wall_angle_deg(WallLocation loc);
std::string to_string(WallLocation loc);
WallLocation parse_wall_location(const std::string& name);

struct DefectSpec {
  WallLocation location = WallLocation::inferior;
  double center_angle_deg = 270.0;
  double extent_deg = 30.0;
  double severity_frac = 0.25;
  int axial_extent_slices = 8;

  void validate() const;
};

/// Per-sample truth. All coordinates are voxel indices of the grid the
/// sample currently lives in (see in_window()).
struct SampleMeta {
  int sample_id = 0;
  int cluster_id = 0;
  bool defect_present = false;
  Point3 defect_centroid_vox{};   // LV center when absent
  Point3 lv_center_vox{};
  Point3 signal_location_vox{};   // where the observer looks (defect or would-be defect centroid)
  int slice_lo = 0;               // s1
  int slice_hi = 0;               // s2, inclusive
  std::optional<DefectSpec> defect;

  void validate(const Dims3& dims) const;

  /// Same metadata expressed in the coordinates of a window with the given
  /// origin and size; slice range is clipped to the window.
  SampleMeta in_window(const Index3& origin, const Dims3& size) const;
};

struct LvPhantom {
  Volume3D activity;
  Volume3D wall_mask;
};

LvPhantom generate_lv_phantom(const LvGeometry& geom, const Dims3& dims, double voxel_mm);

/// Wall voxels (linear indices) inside the angular/axial sector of `spec`.
std::vector<std::size_t> defect_sector(const Volume3D& mask, const LvGeometry& geom, const DefectSpec& spec);

struct DefectInsertion {
  Volume3D defect_only;
  SampleMeta meta;
};

/// defect_only = severity * activity on the sector, 0 elsewhere. Throws
/// std::invalid_argument when the spec is invalid or no voxel qualifies.
DefectInsertion make_defect_volume(const Volume3D& activity, const Volume3D& mask, const LvGeometry& geom,
                                   const DefectSpec& spec);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  double draw(Rng& rng) const;
};

struct DefectMixture {
  std::vector<WallLocation> locations{WallLocation::anterior, WallLocation::inferior};
  std::vector<double> weights{1.0, 1.0};
  double extent_deg = 30.0;
  double severity_frac = 0.25;
  int axial_extent_slices = 8;
  Range angle_jitter_deg{0.0, 0.0};
};

struct PopulationConfig {
  Dims3 dims{64, 64, 64};
  double voxel_mm = 4.0;
  Range center_offset_vox{-2.0, 2.0};
  Range outer_radius_mm{24.0, 32.0};
  Range wall_thickness_mm{8.0, 12.0};
  Range apex_z_mm{-44.0, -36.0};
  Range base_z_mm{24.0, 32.0};
  Range wall_activity{0.8, 1.2};
  Range background_activity{0.08, 0.15};
  Range tilt_deg{-10.0, 10.0};
  double present_fraction = 0.5;
  DefectMixture defects;

  void validate() const;
};

struct PhantomSample {
  Volume3D activity;
  Volume3D wall_mask;
  LvGeometry geom;
  SampleMeta meta;
  std::optional<Volume3D> defect_only;
};

/// Draws one sample from its own stream derive_seed(seed, {sample_id}).
/// Absent samples still draw a would-be defect so the observer has a
/// matched signal location.
PhantomSample draw_sample(const PopulationConfig& cfg, int sample_id, bool defect_present, std::uint64_t seed);

/// Exactly n_present of n samples, chosen by a seeded permutation, carry a
/// defect.
std::vector<bool> assign_presence(int n, int n_present, std::uint64_t seed);

/// Draws samples 0..n-1; round(n * present_fraction) of them carry a defect.
std::vector<PhantomSample> sample_population(const PopulationConfig& cfg, int n, std::uint64_t seed);

}  // namespace sparsespect
