#include "sparsespect/projector.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "sparsespect/rng.hpp"

namespace sparsespect {

double ProjectionSet::total() const { return std::accumulate(bins.begin(), bins.end(), 0.0); }

ProjectionSet ProjectionSet::subset(std::span<const int> indices) const {
  ProjectionSet out;
  out.nu = nu;
  out.nv = nv;
  out.bin_mm = bin_mm;
  out.kind = kind;
  out.bins.reserve(indices.size() * view_size());
  for (int a : indices) {
    if (a < 0 || static_cast<std::size_t>(a) >= n_angles()) throw std::out_of_range("ProjectionSet::subset: bad index");
    out.angles_deg.push_back(angles_deg[static_cast<std::size_t>(a)]);
    const auto v = view(static_cast<std::size_t>(a));
    out.bins.insert(out.bins.end(), v.begin(), v.end());
  }
  return out;
}

void ProjectionSet::validate() const {
  if (nu <= 0 || nv <= 0) throw std::invalid_argument("ProjectionSet: bin dims must be positive");
  if (bins.size() != n_angles() * view_size()) throw std::invalid_argument("ProjectionSet: bins/angles count mismatch");
  for (double b : bins) {
    if (!(b >= 0.0)) throw std::invalid_argument("ProjectionSet: negative or non-finite bin");
    if (kind == ProjectionKind::counts && b != std::floor(b)) {
      throw std::invalid_argument("ProjectionSet: counts must be integers");
    }
  }
}

ParallelProjector::ParallelProjector(const Dims3& dims, std::vector<double> angles_deg, double voxel_mm)
    : dims_(dims), voxel_mm_(voxel_mm), angles_(std::move(angles_deg)) {
  if (!dims.positive()) throw std::invalid_argument("ParallelProjector: dims must be positive");
  if (dims.nx != dims.ny) {
    throw std::invalid_argument("ParallelProjector: in-plane dims must be square, got " + to_string(dims));
  }
  const int n = dims.nx;
  const double c = (n - 1) / 2.0;
  const auto plane = static_cast<std::size_t>(n) * n;

  // Dense scratch used to merge duplicate sources within one detector column.
  std::vector<double> acc(plane, 0.0);
  std::vector<std::uint32_t> touched;

  auto snap = [](double f, int& base) {
    if (f < 1e-12) return 0.0;
    if (f > 1.0 - 1e-12) {
      ++base;
      return 0.0;
    }
    return f;
  };

  matrices_.reserve(angles_.size());
  for (double deg : angles_) {
    const double t = deg * std::numbers::pi / 180.0;
    const double ct = std::cos(t), st = std::sin(t);
    AngleMatrix m;
    m.row_start.reserve(static_cast<std::size_t>(n) + 1);
    m.row_start.push_back(0);
    for (int u = 0; u < n; ++u) {
      touched.clear();
      for (int y = 0; y < n; ++y) {
        const double qx = c + ct * (u - c) - st * (y - c);
        const double qy = c + st * (u - c) + ct * (y - c);
        int x0 = static_cast<int>(std::floor(qx));
        int y0 = static_cast<int>(std::floor(qy));
        const double fx = snap(qx - x0, x0);
        const double fy = snap(qy - y0, y0);
        const int xs[2] = {x0, x0 + 1};
        const int ys[2] = {y0, y0 + 1};
        const double wx[2] = {1.0 - fx, fx};
        const double wy[2] = {1.0 - fy, fy};
        for (int j = 0; j < 2; ++j)
          for (int i = 0; i < 2; ++i) {
            const double w = wx[i] * wy[j];
            if (w == 0.0 || xs[i] < 0 || xs[i] >= n || ys[j] < 0 || ys[j] >= n) continue;
            const auto src = static_cast<std::uint32_t>(ys[j] * n + xs[i]);
            if (acc[src] == 0.0) touched.push_back(src);
            acc[src] += w;
          }
      }
      std::sort(touched.begin(), touched.end());
      for (auto src : touched) {
        m.weights.push_back({src, acc[src]});
        acc[src] = 0.0;
      }
      m.row_start.push_back(static_cast<std::uint32_t>(m.weights.size()));
    }
    matrices_.push_back(std::move(m));
  }
}

void ParallelProjector::check_volume(const Volume3D& vol) const {
  if (vol.dims() != dims_) {
    throw std::invalid_argument("ParallelProjector: volume dims " + to_string(vol.dims()) + " != projector dims " +
                                to_string(dims_));
  }
}

void ParallelProjector::check_projections(const ProjectionSet& proj) const {
  if (proj.nu != dims_.nx || proj.nv != dims_.nz || proj.n_angles() != angles_.size() ||
      proj.bins.size() != proj.n_angles() * proj.view_size()) {
    throw std::invalid_argument("ParallelProjector: projection shape does not match projector geometry");
  }
}

ProjectionSet ParallelProjector::empty_projections(ProjectionKind kind) const {
  ProjectionSet p;
  p.angles_deg = angles_;
  p.nu = dims_.nx;
  p.nv = dims_.nz;
  p.bin_mm = voxel_mm_;
  p.kind = kind;
  p.bins.assign(angles_.size() * p.view_size(), 0.0);
  return p;
}

void ParallelProjector::forward_views(const Volume3D& vol, std::span<const int> views, ProjectionSet& out) const {
  check_volume(vol);
  check_projections(out);
  const int n = dims_.nx;
  const auto plane = static_cast<std::size_t>(n) * n;
  for (int a : views) {
    const AngleMatrix& m = matrices_.at(static_cast<std::size_t>(a));
    auto view = out.view(static_cast<std::size_t>(a));
    for (int z = 0; z < dims_.nz; ++z) {
      const double* src = vol.data().data() + plane * z;
      double* row = view.data() + static_cast<std::size_t>(z) * n;
      for (int u = 0; u < n; ++u) {
        double s = 0.0;
        for (auto k = m.row_start[u]; k < m.row_start[u + 1]; ++k) s += m.weights[k].w * src[m.weights[k].src];
        row[u] = s;
      }
    }
  }
}

void ParallelProjector::back_views(const ProjectionSet& proj, std::span<const int> views, Volume3D& out) const {
  check_volume(out);
  check_projections(proj);
  const int n = dims_.nx;
  const auto plane = static_cast<std::size_t>(n) * n;
  for (int a : views) {
    const AngleMatrix& m = matrices_.at(static_cast<std::size_t>(a));
    const auto view = proj.view(static_cast<std::size_t>(a));
    for (int z = 0; z < dims_.nz; ++z) {
      double* dst = out.data().data() + plane * z;
      const double* row = view.data() + static_cast<std::size_t>(z) * n;
      for (int u = 0; u < n; ++u) {
        const double g = row[u];
        if (g == 0.0) continue;
        for (auto k = m.row_start[u]; k < m.row_start[u + 1]; ++k) dst[m.weights[k].src] += m.weights[k].w * g;
      }
    }
  }
}

ProjectionSet ParallelProjector::forward(const Volume3D& vol) const {
  ProjectionSet out = empty_projections();
  out.bin_mm = vol.voxel_mm();
  std::vector<int> all(angles_.size());
  std::iota(all.begin(), all.end(), 0);
  forward_views(vol, all, out);
  return out;
}

Volume3D ParallelProjector::back(const ProjectionSet& proj) const {
  Volume3D out(dims_, voxel_mm_, 0.0);
  std::vector<int> all(angles_.size());
  std::iota(all.begin(), all.end(), 0);
  back_views(proj, all, out);
  return out;
}

ProjectionSet forward_project(const Volume3D& vol, const std::vector<double>& angles_deg) {
  return ParallelProjector(vol.dims(), angles_deg, vol.voxel_mm()).forward(vol);
}

Volume3D back_project(const ProjectionSet& proj, const Dims3& dims, double voxel_mm) {
  return ParallelProjector(dims, proj.angles_deg, voxel_mm).back(proj);
}

std::vector<int> select_angles(int n_total, int n_keep) {
  if (n_keep < 1 || n_keep > n_total) {
    throw std::invalid_argument("select_angles: need 1 <= n_keep <= n_total, got (" + std::to_string(n_total) + ", " +
                                std::to_string(n_keep) + ")");
  }
  std::vector<int> idx(static_cast<std::size_t>(n_keep));
  for (int i = 0; i < n_keep; ++i) {
    idx[static_cast<std::size_t>(i)] =
        static_cast<int>(static_cast<long long>(i) * n_total / n_keep);
  }
  return idx;
}

std::vector<double> uniform_angles(int n, double span_deg, double start_deg) {
  if (n <= 0) throw std::invalid_argument("uniform_angles: n must be positive");
  std::vector<double> a(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) a[static_cast<std::size_t>(i)] = start_deg + span_deg * i / n;
  return a;
}

double count_scale(const ProjectionSet& reference, double counts_per_view_target) {
  if (!(counts_per_view_target > 0.0)) throw std::invalid_argument("count_scale: target must be positive");
  if (reference.n_angles() == 0) throw std::invalid_argument("count_scale: empty reference");
  const double per_view = reference.total() / static_cast<double>(reference.n_angles());
  if (!(per_view > 0.0)) throw std::invalid_argument("count_scale: reference projections carry no activity");
  return counts_per_view_target / per_view;
}

ProjectionSet simulate_counts(const ProjectionSet& expected, double counts_per_view_target,
                              const ProjectionSet& reference_view_set, std::uint64_t seed) {
  if (expected.kind != ProjectionKind::expected) throw std::invalid_argument("simulate_counts: input must be expected");
  const double alpha = count_scale(reference_view_set, counts_per_view_target);
  ProjectionSet out = expected;
  out.kind = ProjectionKind::counts;
  for (std::size_t a = 0; a < out.n_angles(); ++a) {
    Rng rng(derive_seed(seed, {a}));
    for (double& b : out.view(a)) b = rng.poisson(alpha * b);
  }
  return out;
}

std::filesystem::path angles_sidecar(const std::filesystem::path& path) {
  auto p = path;
  p.replace_extension(".angles");
  return p;
}

void write_projections(const ProjectionSet& proj, const std::filesystem::path& path) {
  write_volume(Volume3D({proj.nu, proj.nv, static_cast<int>(proj.n_angles())}, proj.bin_mm, proj.bins), path);
  std::ofstream out(angles_sidecar(path), std::ios::trunc);
  if (!out) throw std::runtime_error("write_projections: cannot write angle sidecar for " + path.string());
  char buf[64];
  for (double a : proj.angles_deg) {
    auto res = std::to_chars(buf, buf + sizeof buf, a);
    out.write(buf, res.ptr - buf);
    out.put('\n');
  }
}

ProjectionSet read_projections(const std::filesystem::path& path, ProjectionKind kind) {
  Volume3D vol = read_volume(path);
  ProjectionSet p;
  p.nu = vol.dims().nx;
  p.nv = vol.dims().ny;
  p.bin_mm = vol.voxel_mm();
  p.kind = kind;
  p.bins = std::move(vol.storage());
  std::ifstream in(angles_sidecar(path));
  if (!in) throw std::runtime_error("read_projections: missing angle sidecar for " + path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    double a = 0.0;
    auto res = std::from_chars(line.data(), line.data() + line.size(), a);
    if (res.ec != std::errc{}) throw FormatError("read_projections: bad angle line '" + line + "'");
    p.angles_deg.push_back(a);
  }
  if (static_cast<int>(p.angles_deg.size()) != vol.dims().nz) {
    throw FormatError("read_projections: angle count does not match projection depth in " + path.string());
  }
  p.validate();
  return p;
}

}  // namespace sparsespect
