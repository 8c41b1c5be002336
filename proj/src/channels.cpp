#include "sparsespect/channels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace sparsespect {

namespace {

int signed_freq(int k, int n) { return k < (n + 1) / 2 ? k : k - n; }

int wrap(int v, int n) {
  const int r = v % n;
  return r < 0 ? r + n : r;
}

}  // namespace

std::vector<Passband> default_passbands() {
  return {{1.0 / 64, 1.0 / 32}, {1.0 / 32, 1.0 / 16}, {1.0 / 16, 1.0 / 8}, {1.0 / 8, 1.0 / 4}};
}

double radial_frequency(int kx, int ky, int nx, int ny) {
  const double fx = static_cast<double>(signed_freq(kx, nx)) / nx;
  const double fy = static_cast<double>(signed_freq(ky, ny)) / ny;
  return std::sqrt(fx * fx + fy * fy);
}

ChannelBank::ChannelBank(int nx, int ny, std::vector<Passband> passbands)
    : nx_(nx), ny_(ny), passbands_(std::move(passbands)) {
  if (nx <= 0 || ny <= 0) throw std::invalid_argument("ChannelBank: slice dims must be positive");
  if (passbands_.empty()) throw std::invalid_argument("ChannelBank: need at least one passband");
  for (const auto& b : passbands_) {
    if (!(b.lo > 0.0 && b.lo < b.hi)) throw std::invalid_argument("ChannelBank: passband must satisfy 0 < lo < hi");
    if (b.hi > 0.5) throw std::invalid_argument("ChannelBank: passband exceeds Nyquist (0.5 cycles/pixel)");
  }
  auto sorted = passbands_;
  std::sort(sorted.begin(), sorted.end(), [](const Passband& a, const Passband& b) { return a.lo < b.lo; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i].lo < sorted[i - 1].hi) throw std::invalid_argument("ChannelBank: overlapping passbands");
  }

  // Separable inverse DFT: k_c(x, y) = 1/(nx ny) sum_f H_c(f) cos(2 pi f . (r - center)).
  // H_c is symmetric under f -> -f (both are within the same radial band), so
  // the sine part cancels and the kernel is real.
  const int cx = center_x(), cy = center_y();
  std::vector<double> cos_x(static_cast<std::size_t>(nx) * nx), sin_x(cos_x.size());
  std::vector<double> cos_y(static_cast<std::size_t>(ny) * ny), sin_y(cos_y.size());
  for (int k = 0; k < nx; ++k)
    for (int x = 0; x < nx; ++x) {
      const double ph = 2.0 * std::numbers::pi * k * wrap(x - cx, nx) / nx;
      cos_x[static_cast<std::size_t>(k) * nx + x] = std::cos(ph);
      sin_x[static_cast<std::size_t>(k) * nx + x] = std::sin(ph);
    }
  for (int k = 0; k < ny; ++k)
    for (int y = 0; y < ny; ++y) {
      const double ph = 2.0 * std::numbers::pi * k * wrap(y - cy, ny) / ny;
      cos_y[static_cast<std::size_t>(k) * ny + y] = std::cos(ph);
      sin_y[static_cast<std::size_t>(k) * ny + y] = std::sin(ph);
    }

  kernels_.assign(passbands_.size() * plane(), 0.0);
  const double norm = 1.0 / (static_cast<double>(nx) * ny);
  for (std::size_t c = 0; c < passbands_.size(); ++c) {
    double* ker = kernels_.data() + c * plane();
    for (int ky = 0; ky < ny; ++ky)
      for (int kx = 0; kx < nx; ++kx) {
        const double rho = radial_frequency(kx, ky, nx, ny);
        if (rho < passbands_[c].lo || rho >= passbands_[c].hi) continue;
        // cos(a + b) = cos a cos b - sin a sin b
        const double* cxk = &cos_x[static_cast<std::size_t>(kx) * nx];
        const double* sxk = &sin_x[static_cast<std::size_t>(kx) * nx];
        for (int y = 0; y < ny; ++y) {
          const double cyv = cos_y[static_cast<std::size_t>(ky) * ny + y];
          const double syv = sin_y[static_cast<std::size_t>(ky) * ny + y];
          double* row = ker + static_cast<std::size_t>(y) * nx;
          for (int x = 0; x < nx; ++x) row[x] += norm * (cxk[x] * cyv - sxk[x] * syv);
        }
      }
  }
}

double ChannelBank::shifted(int c, const std::array<int, 2>& shift, int x, int y) const {
  const int kx = wrap(x - shift[0] + center_x(), nx_);
  const int ky = wrap(y - shift[1] + center_y(), ny_);
  return kernel(c)[static_cast<std::size_t>(ky) * nx_ + kx];
}

ChannelBank build_channels(int nx, int ny, const std::vector<Passband>& passbands) {
  return ChannelBank(nx, ny, passbands);
}

ChannelVector channelize(std::span<const double> plane, const ChannelBank& bank, const std::array<int, 2>& shift) {
  if (plane.size() != bank.plane()) throw std::invalid_argument("channelize: slice dims do not match channel bank");
  const int nx = bank.nx(), ny = bank.ny();
  const int ox = wrap(bank.center_x() - shift[0], nx);
  const int oy = wrap(bank.center_y() - shift[1], ny);
  ChannelVector out(static_cast<std::size_t>(bank.n_channels()), 0.0);
  for (int c = 0; c < bank.n_channels(); ++c) {
    const auto ker = bank.kernel(c);
    double acc = 0.0;
    for (int y = 0; y < ny; ++y) {
      const double* krow = ker.data() + static_cast<std::size_t>(wrap(y + oy, ny)) * nx;
      const double* srow = plane.data() + static_cast<std::size_t>(y) * nx;
      // x + ox wraps at most once; split the row at the wrap point.
      const int split = nx - ox;
      for (int x = 0; x < split; ++x) acc += krow[x + ox] * srow[x];
      for (int x = split; x < nx; ++x) acc += krow[x + ox - nx] * srow[x];
    }
    out[static_cast<std::size_t>(c)] = acc;
  }
  return out;
}

ChannelVector channelize(const Slice2D& slice, const ChannelBank& bank, const std::array<int, 2>& shift) {
  if (slice.nx() != bank.nx() || slice.ny() != bank.ny()) {
    throw std::invalid_argument("channelize: slice dims do not match channel bank");
  }
  return channelize(slice.data(), bank, shift);
}

void channelize_adjoint(std::span<const double> weights, const ChannelBank& bank, const std::array<int, 2>& shift,
                        std::span<double> plane) {
  if (plane.size() != bank.plane() || weights.size() != static_cast<std::size_t>(bank.n_channels())) {
    throw std::invalid_argument("channelize_adjoint: size mismatch");
  }
  const int nx = bank.nx(), ny = bank.ny();
  const int ox = wrap(bank.center_x() - shift[0], nx);
  const int oy = wrap(bank.center_y() - shift[1], ny);
  for (int c = 0; c < bank.n_channels(); ++c) {
    const double w = weights[static_cast<std::size_t>(c)];
    if (w == 0.0) continue;
    const auto ker = bank.kernel(c);
    for (int y = 0; y < ny; ++y) {
      const double* krow = ker.data() + static_cast<std::size_t>(wrap(y + oy, ny)) * nx;
      double* prow = plane.data() + static_cast<std::size_t>(y) * nx;
      const int split = nx - ox;
      for (int x = 0; x < split; ++x) prow[x] += w * krow[x + ox];
      for (int x = split; x < nx; ++x) prow[x] += w * krow[x + ox - nx];
    }
  }
}

}  // namespace sparsespect
