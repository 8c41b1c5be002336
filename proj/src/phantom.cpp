#include "sparsespect/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace sparsespect {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

/// Voxel center offset (mm) expressed in the LV frame, whose z axis is the
/// long axis.
struct LvFrame {
  double cx, cy, sx, sy;  // cos/sin of tilt about x and y

  explicit LvFrame(const LvGeometry& g)
      : cx(std::cos(g.tilt_deg[0] * kDeg)),
        cy(std::cos(g.tilt_deg[1] * kDeg)),
        sx(std::sin(g.tilt_deg[0] * kDeg)),
        sy(std::sin(g.tilt_deg[1] * kDeg)) {}

  Point3 to_lv(const Point3& d) const {
    // Undo the y tilt, then the x tilt.
    const double x1 = cy * d[0] - sy * d[2];
    const double z1 = sy * d[0] + cy * d[2];
    const double y2 = cx * d[1] + sx * z1;
    const double z2 = -sx * d[1] + cx * z1;
    return {x1, y2, z2};
  }
};

Point3 offset_mm(const LvGeometry& g, double voxel_mm, int x, int y, int z) {
  return {(x - g.center_vox[0]) * voxel_mm, (y - g.center_vox[1]) * voxel_mm, (z - g.center_vox[2]) * voxel_mm};
}

bool in_shell(const LvGeometry& g, const Point3& l) {
  if (l[2] > g.base_z_mm) return false;
  const double len = g.base_z_mm - g.apex_z_mm;
  const double dz = l[2] - g.base_z_mm;
  const double rho2 = l[0] * l[0] + l[1] * l[1];
  const double r_out = g.outer_radius_mm;
  if (rho2 / (r_out * r_out) + dz * dz / (len * len) > 1.0) return false;
  const double r_in = r_out - g.wall_thickness_mm;
  const double len_in = len - g.wall_thickness_mm;
  if (r_in <= 0.0 || len_in <= 0.0) return true;
  return rho2 / (r_in * r_in) + dz * dz / (len_in * len_in) > 1.0;
}

/// Signed angular difference wrapped to (-180, 180].
double wrap_deg(double a) {
  double r = std::fmod(a, 360.0);
  if (r <= -180.0) r += 360.0;
  if (r > 180.0) r -= 360.0;
  return r;
}

std::pair<int, int> mask_z_extent(const Volume3D& mask) {
  const Dims3& d = mask.dims();
  int lo = d.nz, hi = -1;
  const auto plane = static_cast<std::size_t>(d.nx) * d.ny;
  for (int z = 0; z < d.nz; ++z) {
    const auto first = mask.data().begin() + static_cast<std::ptrdiff_t>(plane * z);
    if (std::any_of(first, first + static_cast<std::ptrdiff_t>(plane), [](double v) { return v != 0.0; })) {
      lo = std::min(lo, z);
      hi = std::max(hi, z);
    }
  }
  return {lo, hi};
}

Point3 weighted_centroid(const Volume3D& w) {
  const Dims3& d = w.dims();
  double sx = 0, sy = 0, sz = 0, total = 0;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const double v = w(x, y, z);
        if (v == 0.0) continue;
        sx += v * x;
        sy += v * y;
        sz += v * z;
        total += v;
      }
  return {sx / total, sy / total, sz / total};
}

void check_range(const Range& r, const char* name) {
  if (!(r.lo <= r.hi) || !std::isfinite(r.lo) || !std::isfinite(r.hi)) {
    throw std::invalid_argument(std::string("population range '") + name + "' must satisfy lo <= hi");
  }
}

}  // namespace

void LvGeometry::validate() const {
  if (!(outer_radius_mm > 0.0 && wall_thickness_mm > 0.0)) throw std::invalid_argument("LvGeometry: radii must be > 0");
  if (!(wall_thickness_mm < outer_radius_mm)) {
    throw std::invalid_argument("LvGeometry: wall_thickness_mm must be < outer_radius_mm");
  }
  if (!(apex_z_mm < base_z_mm)) throw std::invalid_argument("LvGeometry: apex_z_mm must be < base_z_mm");
  if (!(wall_activity > 0.0)) throw std::invalid_argument("LvGeometry: wall_activity must be > 0");
  if (!(background_activity >= 0.0 && background_activity < wall_activity)) {
    throw std::invalid_argument("LvGeometry: background_activity must lie in [0, wall_activity)");
  }
}

double wall_angle_deg(WallLocation loc) {
  switch (loc) {
    case WallLocation::lateral: return 0.0;
    case WallLocation::anterior: return 90.0;
    case WallLocation::septal: return 180.0;
    case WallLocation::inferior: return 270.0;
  }
  return 0.0;
}

std::string to_string(WallLocation loc) {
  switch (loc) {
    case WallLocation::lateral: return "lateral";
    case WallLocation::anterior: return "anterior";
    case WallLocation::septal: return "septal";
    case WallLocation::inferior: return "inferior";
  }
  return "unknown";
}

WallLocation parse_wall_location(const std::string& name) {
  for (auto loc : {WallLocation::anterior, WallLocation::inferior, WallLocation::septal, WallLocation::lateral}) {
    if (to_string(loc) == name) return loc;
  }
  throw std::invalid_argument("unknown wall location '" + name + "'");
}

void DefectSpec::validate() const {
  if (!(extent_deg > 0.0 && extent_deg <= 360.0)) throw std::invalid_argument("DefectSpec: extent_deg must be in (0, 360]");
  if (!(severity_frac > 0.0 && severity_frac <= 1.0)) {
    throw std::invalid_argument("DefectSpec: severity_frac must be in (0, 1]");
  }
  if (axial_extent_slices <= 0) throw std::invalid_argument("DefectSpec: axial_extent_slices must be positive");
}

void SampleMeta::validate(const Dims3& dims) const {
  if (!(slice_lo >= 0 && slice_lo <= slice_hi && slice_hi < dims.nz)) {
    throw std::out_of_range("SampleMeta: slice range [" + std::to_string(slice_lo) + "," + std::to_string(slice_hi) +
                            "] invalid for nz=" + std::to_string(dims.nz));
  }
  if (defect_present && !defect) throw std::invalid_argument("SampleMeta: defect_present without a DefectSpec");
}

SampleMeta SampleMeta::in_window(const Index3& origin, const Dims3& size) const {
  SampleMeta m = *this;
  auto shift = [&](Point3 p) {
    for (int a = 0; a < 3; ++a) p[a] -= origin[a];
    return p;
  };
  m.defect_centroid_vox = shift(defect_centroid_vox);
  m.lv_center_vox = shift(lv_center_vox);
  m.signal_location_vox = shift(signal_location_vox);
  m.slice_lo = std::clamp(slice_lo - origin[2], 0, size.nz - 1);
  m.slice_hi = std::clamp(slice_hi - origin[2], 0, size.nz - 1);
  return m;
}

LvPhantom generate_lv_phantom(const LvGeometry& geom, const Dims3& dims, double voxel_mm) {
  geom.validate();
  if (!dims.positive() || !(voxel_mm > 0.0)) throw std::invalid_argument("generate_lv_phantom: bad grid");

  // Bounding sphere of the half-ellipsoid must sit inside the grid.
  const double reach_mm = std::hypot(geom.outer_radius_mm, std::max(std::abs(geom.apex_z_mm), std::abs(geom.base_z_mm)));
  const double reach = reach_mm / voxel_mm;
  const int n[3] = {dims.nx, dims.ny, dims.nz};
  for (int a = 0; a < 3; ++a) {
    if (geom.center_vox[a] - reach < 0.0 || geom.center_vox[a] + reach > n[a] - 1) {
      throw std::out_of_range("generate_lv_phantom: LV does not fit inside grid " + to_string(dims));
    }
  }

  LvPhantom out{Volume3D(dims, voxel_mm, geom.background_activity), Volume3D(dims, voxel_mm, 0.0)};
  const LvFrame frame(geom);
  for (int z = 0; z < dims.nz; ++z)
    for (int y = 0; y < dims.ny; ++y)
      for (int x = 0; x < dims.nx; ++x) {
        if (!in_shell(geom, frame.to_lv(offset_mm(geom, voxel_mm, x, y, z)))) continue;
        out.activity(x, y, z) = geom.wall_activity;
        out.wall_mask(x, y, z) = 1.0;
      }
  return out;
}

std::vector<std::size_t> defect_sector(const Volume3D& mask, const LvGeometry& geom, const DefectSpec& spec) {
  const auto [zlo, zhi] = mask_z_extent(mask);
  if (zhi < zlo) return {};
  const int mid = (zlo + zhi) / 2;
  const int s_lo = mid - spec.axial_extent_slices / 2;
  const int s_hi = s_lo + spec.axial_extent_slices - 1;
  const double half = spec.extent_deg / 2.0;

  const LvFrame frame(geom);
  const Dims3& d = mask.dims();
  std::vector<std::size_t> idx;
  for (int z = std::max(0, s_lo); z <= std::min(d.nz - 1, s_hi); ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        if (mask(x, y, z) == 0.0) continue;
        const Point3 l = frame.to_lv(offset_mm(geom, mask.voxel_mm(), x, y, z));
        const double polar = std::atan2(l[1], l[0]) / kDeg;
        if (spec.extent_deg >= 360.0 || std::abs(wrap_deg(polar - spec.center_angle_deg)) <= half) {
          idx.push_back(mask.index(x, y, z));
        }
      }
  return idx;
}

DefectInsertion make_defect_volume(const Volume3D& activity, const Volume3D& mask, const LvGeometry& geom,
                                   const DefectSpec& spec) {
  spec.validate();
  if (activity.dims() != mask.dims()) throw std::invalid_argument("make_defect_volume: activity/mask dims differ");
  const auto sector = defect_sector(mask, geom, spec);

  Volume3D defect(activity.dims(), activity.voxel_mm(), 0.0);
  for (std::size_t i : sector) defect.data()[i] = spec.severity_frac * activity.data()[i];
  if (sector.empty() || defect.sum() <= 0.0) throw std::invalid_argument("make_defect_volume: empty defect region");

  const auto [zlo, zhi] = mask_z_extent(mask);
  SampleMeta meta;
  meta.defect_present = true;
  meta.defect = spec;
  meta.defect_centroid_vox = weighted_centroid(defect);
  meta.signal_location_vox = meta.defect_centroid_vox;
  meta.lv_center_vox = geom.center_vox;
  meta.slice_lo = zlo;
  meta.slice_hi = zhi;
  return {std::move(defect), meta};
}

double Range::draw(Rng& rng) const { return lo == hi ? lo : rng.uniform(lo, hi); }

void PopulationConfig::validate() const {
  if (!dims.positive() || !(voxel_mm > 0.0)) throw std::invalid_argument("PopulationConfig: bad grid");
  check_range(center_offset_vox, "center_offset_vox");
  check_range(outer_radius_mm, "outer_radius_mm");
  check_range(wall_thickness_mm, "wall_thickness_mm");
  check_range(apex_z_mm, "apex_z_mm");
  check_range(base_z_mm, "base_z_mm");
  check_range(wall_activity, "wall_activity");
  check_range(background_activity, "background_activity");
  check_range(tilt_deg, "tilt_deg");
  check_range(defects.angle_jitter_deg, "angle_jitter_deg");
  if (wall_thickness_mm.hi >= outer_radius_mm.lo) {
    throw std::invalid_argument("PopulationConfig: wall thickness range must stay below the radius range");
  }
  if (apex_z_mm.hi >= base_z_mm.lo) throw std::invalid_argument("PopulationConfig: apex range must lie below base range");
  if (background_activity.lo < 0.0 || background_activity.hi >= wall_activity.lo) {
    throw std::invalid_argument("PopulationConfig: background activity must lie in [0, min wall activity)");
  }
  if (!(present_fraction >= 0.0 && present_fraction <= 1.0)) {
    throw std::invalid_argument("PopulationConfig: present_fraction must be in [0, 1]");
  }
  if (defects.locations.empty() || defects.locations.size() != defects.weights.size()) {
    throw std::invalid_argument("PopulationConfig: defect locations and weights must be nonempty and aligned");
  }
  if (std::any_of(defects.weights.begin(), defects.weights.end(), [](double w) { return !(w >= 0.0); }) ||
      std::accumulate(defects.weights.begin(), defects.weights.end(), 0.0) <= 0.0) {
    throw std::invalid_argument("PopulationConfig: defect weights must be nonnegative with positive sum");
  }
  DefectSpec probe;
  probe.extent_deg = defects.extent_deg;
  probe.severity_frac = defects.severity_frac;
  probe.axial_extent_slices = defects.axial_extent_slices;
  probe.validate();
}

PhantomSample draw_sample(const PopulationConfig& cfg, int sample_id, bool defect_present, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(sample_id)}));

  LvGeometry g;
  const Dims3& d = cfg.dims;
  g.center_vox = {d.nx / 2.0 + cfg.center_offset_vox.draw(rng), d.ny / 2.0 + cfg.center_offset_vox.draw(rng),
                  d.nz / 2.0 + cfg.center_offset_vox.draw(rng)};
  g.outer_radius_mm = cfg.outer_radius_mm.draw(rng);
  g.wall_thickness_mm = cfg.wall_thickness_mm.draw(rng);
  g.apex_z_mm = cfg.apex_z_mm.draw(rng);
  g.base_z_mm = cfg.base_z_mm.draw(rng);
  g.wall_activity = cfg.wall_activity.draw(rng);
  g.background_activity = cfg.background_activity.draw(rng);
  g.tilt_deg = {cfg.tilt_deg.draw(rng), cfg.tilt_deg.draw(rng)};

  // Defect parameters are drawn for every sample so that the stream layout
  // does not depend on presence.
  const auto& mix = cfg.defects;
  const double total_w = std::accumulate(mix.weights.begin(), mix.weights.end(), 0.0);
  double pick = rng.uniform() * total_w;
  std::size_t which = 0;
  while (which + 1 < mix.weights.size() && pick >= mix.weights[which]) pick -= mix.weights[which++];
  DefectSpec spec;
  spec.location = mix.locations[which];
  spec.center_angle_deg = wall_angle_deg(spec.location) + mix.angle_jitter_deg.draw(rng);
  spec.extent_deg = mix.extent_deg;
  spec.severity_frac = mix.severity_frac;
  spec.axial_extent_slices = mix.axial_extent_slices;

  auto phantom = generate_lv_phantom(g, cfg.dims, cfg.voxel_mm);
  auto inserted = make_defect_volume(phantom.activity, phantom.wall_mask, g, spec);

  PhantomSample s{std::move(phantom.activity), std::move(phantom.wall_mask), g, inserted.meta, std::nullopt};
  s.meta.sample_id = sample_id;
  s.meta.cluster_id = sample_id;
  s.meta.defect_present = defect_present;
  if (defect_present) {
    s.defect_only = std::move(inserted.defect_only);
  } else {
    s.meta.defect_centroid_vox = g.center_vox;
  }
  return s;
}

std::vector<bool> assign_presence(int n, int n_present, std::uint64_t seed) {
  if (n <= 0 || n_present < 0 || n_present > n) throw std::invalid_argument("assign_presence: invalid counts");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, {0x9e5e4ceull}));
  rng.shuffle(order);
  std::vector<bool> present(static_cast<std::size_t>(n), false);
  for (int i = 0; i < n_present; ++i) present[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  return present;
}

std::vector<PhantomSample> sample_population(const PopulationConfig& cfg, int n, std::uint64_t seed) {
  if (n <= 0) throw std::invalid_argument("sample_population: n must be positive");
  cfg.validate();
  const int n_present = static_cast<int>(std::lround(n * cfg.present_fraction));
  const auto present = assign_presence(n, n_present, seed);
  std::vector<PhantomSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(draw_sample(cfg, i, present[static_cast<std::size_t>(i)], seed));
  return out;
}

}  // namespace sparsespect
