#include "sparsespect/osem.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sparsespect {

void OsemConfig::validate(std::size_t n_angles) const {
  if (n_iterations <= 0) throw std::invalid_argument("OsemConfig: n_iterations must be positive");
  if (n_subsets <= 0 || static_cast<std::size_t>(n_subsets) > n_angles) {
    throw std::invalid_argument("OsemConfig: n_subsets must lie in [1, " + std::to_string(n_angles) + "]");
  }
  if (!(init_value > 0.0)) throw std::invalid_argument("OsemConfig: init_value must be positive");
  if (!(nonneg_floor > 0.0)) throw std::invalid_argument("OsemConfig: nonneg_floor must be positive");
}

std::vector<std::vector<int>> partition_subsets(int n_angles, int n_subsets) {
  if (n_subsets < 1 || n_subsets > n_angles) {
    throw std::invalid_argument("partition_subsets: need 1 <= n_subsets <= n_angles, got (" + std::to_string(n_angles) +
                                ", " + std::to_string(n_subsets) + ")");
  }
  std::vector<std::vector<int>> subsets(static_cast<std::size_t>(n_subsets));
  for (int i = 0; i < n_angles; ++i) subsets[static_cast<std::size_t>(i % n_subsets)].push_back(i);
  return subsets;
}

Volume3D osem(const ProjectionSet& counts, const Dims3& dims, double voxel_mm, const OsemConfig& cfg,
              const OsemObserver& on_iteration) {
  return osem(counts, ParallelProjector(dims, counts.angles_deg, voxel_mm), cfg, on_iteration);
}

Volume3D osem(const ProjectionSet& counts, const ParallelProjector& projector, const OsemConfig& cfg,
              const OsemObserver& on_iteration) {
  if (counts.kind != ProjectionKind::counts) throw std::invalid_argument("osem: input must be count data");
  cfg.validate(counts.n_angles());
  if (counts.angles_deg != projector.angles_deg()) throw std::invalid_argument("osem: projector angles differ from data");

  const auto subsets = partition_subsets(static_cast<int>(counts.n_angles()), cfg.n_subsets);
  const double eps = cfg.nonneg_floor;
  const Dims3& dims = projector.dims();

  // Per-subset sensitivity images B_s 1.
  ProjectionSet ones = projector.empty_projections();
  std::fill(ones.bins.begin(), ones.bins.end(), 1.0);
  std::vector<Volume3D> sensitivity;
  sensitivity.reserve(subsets.size());
  for (const auto& s : subsets) {
    if (s.empty()) throw std::invalid_argument("osem: empty subset");
    Volume3D sens(dims, counts.bin_mm, 0.0);
    projector.back_views(ones, s, sens);
    if (sens.max() <= 0.0) throw std::runtime_error("osem: subset has all-zero sensitivity");
    sensitivity.push_back(std::move(sens));
  }

  Volume3D x(dims, counts.bin_mm, cfg.init_value);
  ProjectionSet ratio = projector.empty_projections();
  Volume3D correction(dims, counts.bin_mm, 0.0);
  for (int it = 0; it < cfg.n_iterations; ++it) {
    for (std::size_t s = 0; s < subsets.size(); ++s) {
      projector.forward_views(x, subsets[s], ratio);
      for (int a : subsets[s]) {
        auto r = ratio.view(static_cast<std::size_t>(a));
        const auto y = counts.view(static_cast<std::size_t>(a));
        for (std::size_t b = 0; b < r.size(); ++b) r[b] = y[b] / std::max(r[b], eps);
      }
      std::fill(correction.storage().begin(), correction.storage().end(), 0.0);
      projector.back_views(ratio, subsets[s], correction);
      auto xv = x.data();
      const auto cv = correction.data();
      const auto sv = sensitivity[s].data();
      for (std::size_t v = 0; v < xv.size(); ++v) xv[v] *= cv[v] / std::max(sv[v], eps);
    }
    if (on_iteration) on_iteration(it, x);
  }
  return x;
}

double poisson_loglik(const ProjectionSet& counts, const Volume3D& vol, double eps) {
  return poisson_loglik(counts, vol, ParallelProjector(vol.dims(), counts.angles_deg, vol.voxel_mm()), eps);
}

double poisson_loglik(const ProjectionSet& counts, const Volume3D& vol, const ParallelProjector& projector,
                      double eps) {
  if (counts.nu != vol.dims().nx || counts.nv != vol.dims().nz) {
    throw std::invalid_argument("poisson_loglik: projection shape does not match volume");
  }
  const ProjectionSet yhat = projector.forward(vol);
  if (yhat.bins.size() != counts.bins.size()) throw std::invalid_argument("poisson_loglik: shape mismatch");
  double ll = 0.0;
  for (std::size_t b = 0; b < yhat.bins.size(); ++b) {
    const double y = counts.bins[b];
    const double m = yhat.bins[b];
    if (y != 0.0) ll += y * std::log(std::max(m, eps));
    ll -= m;
  }
  return ll;
}

}  // namespace sparsespect
