#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "sparsespect/volume.hpp"

namespace sparsespect {

enum class ProjectionKind { expected, counts };

/// Angle-indexed parallel-beam projections. bins are stored u-fastest, then
/// v (= z), then angle, i.e. the layout of a (nu, nv, n_angles) volume.
struct ProjectionSet {
  std::vector<double> angles_deg;
  int nu = 0;
  int nv = 0;
  double bin_mm = 1.0;
  ProjectionKind kind = ProjectionKind::expected;
  std::vector<double> bins;

  std::size_t n_angles() const { return angles_deg.size(); }
  std::size_t view_size() const { return static_cast<std::size_t>(nu) * static_cast<std::size_t>(nv); }
  std::span<double> view(std::size_t a) { return {bins.data() + a * view_size(), view_size()}; }
  std::span<const double> view(std::size_t a) const { return {bins.data() + a * view_size(), view_size()}; }
  double total() const;

  /// Views listed in `indices`, in that order.
  ProjectionSet subset(std::span<const int> indices) const;

  void validate() const;
};

/// Rotation-based parallel projector with bilinear in-plane interpolation.
/// For angle t the volume is rotated by -t about the z axis (through the
/// in-plane grid center) and summed along y; samples outside the grid read
/// as zero. The interpolation-and-sum weights are precomputed per angle as
/// a sparse matrix, and back projection applies exactly its transpose.
class ParallelProjector {
 public:
  ParallelProjector(const Dims3& dims, std::vector<double> angles_deg, double voxel_mm = 1.0);

  const Dims3& dims() const { return dims_; }
  const std::vector<double>& angles_deg() const { return angles_; }

  ProjectionSet forward(const Volume3D& vol) const;
  Volume3D back(const ProjectionSet& proj) const;

  /// Projects into the views listed in `views` of `out` (other views untouched).
  void forward_views(const Volume3D& vol, std::span<const int> views, ProjectionSet& out) const;
  /// Accumulates the back projection of the listed views into `out`.
  void back_views(const ProjectionSet& proj, std::span<const int> views, Volume3D& out) const;

  ProjectionSet empty_projections(ProjectionKind kind = ProjectionKind::expected) const;

 private:
  struct Weight {
    std::uint32_t src;  // in-plane linear index (x + nx*y)
    double w;
  };
  struct AngleMatrix {
    std::vector<std::uint32_t> row_start;  // nu + 1 offsets into weights
    std::vector<Weight> weights;
  };

  void check_volume(const Volume3D& vol) const;
  void check_projections(const ProjectionSet& proj) const;

  Dims3 dims_;
  double voxel_mm_;
  std::vector<double> angles_;
  std::vector<AngleMatrix> matrices_;
};

ProjectionSet forward_project(const Volume3D& vol, const std::vector<double>& angles_deg);
Volume3D back_project(const ProjectionSet& proj, const Dims3& dims, double voxel_mm = 1.0);

/// floor(i * n_total / n_keep) for i = 0..n_keep-1.
std::vector<int> select_angles(int n_total, int n_keep);

/// n angles evenly spaced over span_deg starting at start_deg.
std::vector<double> uniform_angles(int n, double span_deg, double start_deg = 0.0);

/// Scale that makes the mean expected counts per view of `reference` equal
/// to counts_per_view_target.
double count_scale(const ProjectionSet& reference, double counts_per_view_target);

/// Poisson realisation of scale * expected, where the scale is fixed by the
/// full-view reference so every protocol shares the same dwell per angle.
/// View a draws from stream derive_seed(seed, {a}).
ProjectionSet simulate_counts(const ProjectionSet& expected, double counts_per_view_target,
                              const ProjectionSet& reference_view_set, std::uint64_t seed);

/// Persists bins as a (nu, nv, n_angles) ".spv" plus "<stem>.angles" with
/// one angle in degrees per line.
void write_projections(const ProjectionSet& proj, const std::filesystem::path& path);
ProjectionSet read_projections(const std::filesystem::path& path, ProjectionKind kind);
std::filesystem::path angles_sidecar(const std::filesystem::path& path);

}  // namespace sparsespect
