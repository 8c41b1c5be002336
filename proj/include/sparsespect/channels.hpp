#pragma once

#include <array>
#include <span>
#include <vector>

#include "sparsespect/volume.hpp"

namespace sparsespect {

/// Half-open radial frequency interval [lo, hi) in cycles/pixel.
struct Passband {
  double lo = 0.0;
  double hi = 0.0;
};

/// Four octave passbands starting at 1/64 cycles/pixel.
std::vector<Passband> default_passbands();

using ChannelVector = std::vector<double>;

/// Rows of the channel operator U: kernel c is the inverse DFT of the radial
/// indicator of passband c, centered at (nx/2, ny/2).
class ChannelBank {
 public:
  ChannelBank(int nx, int ny, std::vector<Passband> passbands);

  int n_channels() const { return static_cast<int>(passbands_.size()); }
  int nx() const { return nx_; }
  int ny() const { return ny_; }
  const std::vector<Passband>& passbands() const { return passbands_; }
  std::span<const double> kernel(int c) const {
    return {kernels_.data() + static_cast<std::size_t>(c) * plane(), plane()};
  }
  std::size_t plane() const { return static_cast<std::size_t>(nx_) * static_cast<std::size_t>(ny_); }
  int center_x() const { return nx_ / 2; }
  int center_y() const { return ny_ / 2; }

  /// Value of kernel c re-centered on `shift` (circular), at pixel (x, y).
  double shifted(int c, const std::array<int, 2>& shift, int x, int y) const;

 private:
  int nx_;
  int ny_;
  std::vector<Passband> passbands_;
  std::vector<double> kernels_;
};

ChannelBank build_channels(int nx, int ny, const std::vector<Passband>& passbands);

/// Channel outputs <kernel_c shifted to `shift`, slice>.
ChannelVector channelize(const Slice2D& slice, const ChannelBank& bank, const std::array<int, 2>& shift);
ChannelVector channelize(std::span<const double> plane, const ChannelBank& bank, const std::array<int, 2>& shift);

/// Adjoint of channelize for a fixed shift: accumulates sum_c w_c * kernel_c
/// (shifted) into `plane`.
void channelize_adjoint(std::span<const double> weights, const ChannelBank& bank, const std::array<int, 2>& shift,
                        std::span<double> plane);

/// Radial frequency (cycles/pixel) of DFT index (kx, ky) on an nx by ny grid.
double radial_frequency(int kx, int ky, int nx, int ny);

}  // namespace sparsespect
