#pragma once

#include <span>
#include <vector>

#include "sparsespect/channels.hpp"
#include "sparsespect/phantom.hpp"
#include "sparsespect/volume.hpp"

namespace sparsespect::nn {

enum class SliceRangeMode { per_sample_meta, fixed };

/// Where S^j centers the channels for a defect-absent sample.
enum class AbsentShift { signal_location, lv_center };

struct LossConfig {
  double lambda = 1.0;
  SliceRangeMode slice_range_mode = SliceRangeMode::per_sample_meta;
  int fixed_slice_lo = 0;
  int fixed_slice_hi = 0;
  /// Divide the channel term by C * (s2 - s1 + 1).
  bool normalize_channel_term = true;
  AbsentShift absent_shift = AbsentShift::signal_location;
  const ChannelBank* bank = nullptr;

  void validate() const;
};

struct LossTerms {
  double fidelity = 0.0;
  double channel = 0.0;  // after normalization, before lambda
  double total = 0.0;    // fidelity + lambda * channel
};

/// Per-sample hybrid loss
///   ||truth - est||^2 + lambda * sum_{s=s1..s2} ||(S U)(truth_s - est_s)||^2
/// with the channel sum optionally normalized (see LossConfig).
LossTerms hybrid_loss(const Volume3D& est, const Volume3D& truth, const SampleMeta& meta, const LossConfig& cfg);

/// Same value; also writes dLoss/dEst into grad (resized to est.size()).
LossTerms hybrid_loss_grad(const Volume3D& est, const Volume3D& truth, const SampleMeta& meta, const LossConfig& cfg,
                        std::vector<double>& grad);

/// Mean over samples (the 1/J factors).
LossTerms mean_terms(std::span<const LossTerms> terms);

/// In-plane channel center and slice range the loss uses for `meta`.
std::array<int, 2> loss_shift(const SampleMeta& meta, const LossConfig& cfg);
std::pair<int, int> loss_slice_range(const SampleMeta& meta, const LossConfig& cfg, int nz);

}  // namespace sparsespect::nn
