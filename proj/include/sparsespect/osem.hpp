#pragma once

#include <functional>
#include <vector>

#include "sparsespect/projector.hpp"
#include "sparsespect/volume.hpp"

namespace sparsespect {

struct OsemConfig {
  int n_iterations = 8;
  int n_subsets = 6;
  double init_value = 1.0;
  double nonneg_floor = 1e-12;  // guards every division

  void validate(std::size_t n_angles) const;
};

/// Interleaved ordered subsets: subset s holds {i : i mod n_subsets == s}.
std::vector<std::vector<int>> partition_subsets(int n_angles, int n_subsets);

/// Called after every full iteration with (iteration index, current image).
using OsemObserver = std::function<void(int, const Volume3D&)>;

/// Multiplicative OSEM:
///   x <- x * B_s(y_s / max(F_s x, eps)) / max(B_s 1, eps)
/// over subsets in ascending order, n_iterations times, from a uniform
/// start. The result is nonnegative and depends only on the inputs.
Volume3D osem(const ProjectionSet& counts, const Dims3& dims, double voxel_mm, const OsemConfig& cfg,
              const OsemObserver& on_iteration = {});

/// Same as osem() with a caller-supplied projector (reused across samples).
Volume3D osem(const ProjectionSet& counts, const ParallelProjector& projector, const OsemConfig& cfg,
              const OsemObserver& on_iteration = {});

/// sum_b y_b ln(max(yhat_b, eps)) - yhat_b with yhat = forward_project(vol).
double poisson_loglik(const ProjectionSet& counts, const Volume3D& vol, double eps = 1e-12);
double poisson_loglik(const ProjectionSet& counts, const Volume3D& vol, const ParallelProjector& projector,
                      double eps = 1e-12);

}  // namespace sparsespect
