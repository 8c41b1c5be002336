#include "sparsespect/restorer/loss.hpp"

#include <stdexcept>
#include <string>

namespace sparsespect::nn {

void LossConfig::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("LossConfig: lambda must be >= 0");
  if (bank == nullptr) throw std::invalid_argument("LossConfig: channel bank not set");
  if (slice_range_mode == SliceRangeMode::fixed && fixed_slice_lo > fixed_slice_hi) {
    throw std::invalid_argument("LossConfig: fixed slice range is empty");
  }
}

std::array<int, 2> loss_shift(const SampleMeta& meta, const LossConfig& cfg) {
  const Point3& p = (meta.defect_present || cfg.absent_shift == AbsentShift::signal_location)
                        ? meta.signal_location_vox
                        : meta.lv_center_vox;
  const Index3 r = round_index(p);
  return {r[0], r[1]};
}

std::pair<int, int> loss_slice_range(const SampleMeta& meta, const LossConfig& cfg, int nz) {
  const int lo = cfg.slice_range_mode == SliceRangeMode::fixed ? cfg.fixed_slice_lo : meta.slice_lo;
  const int hi = cfg.slice_range_mode == SliceRangeMode::fixed ? cfg.fixed_slice_hi : meta.slice_hi;
  if (lo > hi) throw std::invalid_argument("hybrid_loss: empty slice range");
  if (lo < 0 || hi >= nz) {
    throw std::out_of_range("hybrid_loss: slice range [" + std::to_string(lo) + "," + std::to_string(hi) +
                            "] outside volume depth " + std::to_string(nz));
  }
  return {lo, hi};
}

namespace {

LossTerms evaluate(const Volume3D& est, const Volume3D& truth, const SampleMeta& meta, const LossConfig& cfg,
                   std::vector<double>* grad) {
  cfg.validate();
  if (est.dims() != truth.dims()) throw std::invalid_argument("hybrid_loss: est/truth dims differ");
  const Dims3& d = est.dims();
  const ChannelBank& bank = *cfg.bank;
  if (d.nx != bank.nx() || d.ny != bank.ny()) throw std::invalid_argument("hybrid_loss: slice dims do not match channels");

  const auto e = est.data();
  const auto t = truth.data();
  if (grad) grad->assign(e.size(), 0.0);

  LossTerms out;
  for (std::size_t v = 0; v < e.size(); ++v) {
    const double r = t[v] - e[v];
    out.fidelity += r * r;
    if (grad) (*grad)[v] = -2.0 * r;
  }

  const auto [lo, hi] = loss_slice_range(meta, cfg, d.nz);
  const auto shift = loss_shift(meta, cfg);
  const double norm =
      cfg.normalize_channel_term ? 1.0 / (static_cast<double>(bank.n_channels()) * (hi - lo + 1)) : 1.0;
  const std::size_t plane = bank.plane();
  std::vector<double> diff(plane);
  std::vector<double> weights(static_cast<std::size_t>(bank.n_channels()));
  for (int s = lo; s <= hi; ++s) {
    const std::size_t off = plane * static_cast<std::size_t>(s);
    for (std::size_t i = 0; i < plane; ++i) diff[i] = t[off + i] - e[off + i];
    const ChannelVector v = channelize(diff, bank, shift);
    double sq = 0.0;
    for (double c : v) sq += c * c;
    out.channel += norm * sq;
    if (grad && cfg.lambda != 0.0) {
      // d/d est of lambda*norm*||U(t - e)||^2 = -2 lambda norm U^T U (t - e)
      for (std::size_t c = 0; c < v.size(); ++c) weights[c] = -2.0 * cfg.lambda * norm * v[c];
      channelize_adjoint(weights, bank, shift, std::span<double>(grad->data() + off, plane));
    }
  }
  out.total = out.fidelity + cfg.lambda * out.channel;
  return out;
}

}  // namespace

LossTerms hybrid_loss(const Volume3D& est, const Volume3D& truth, const SampleMeta& meta, const LossConfig& cfg) {
  return evaluate(est, truth, meta, cfg, nullptr);
}

LossTerms hybrid_loss_grad(const Volume3D& est, const Volume3D& truth, const SampleMeta& meta, const LossConfig& cfg,
                        std::vector<double>& grad) {
  return evaluate(est, truth, meta, cfg, &grad);
}

LossTerms mean_terms(std::span<const LossTerms> terms) {
  LossTerms m;
  if (terms.empty()) return m;
  for (const auto& t : terms) {
    m.fidelity += t.fidelity;
    m.channel += t.channel;
    m.total += t.total;
  }
  const auto n = static_cast<double>(terms.size());
  m.fidelity /= n;
  m.channel /= n;
  m.total /= n;
  return m;
}

}  // namespace sparsespect::nn
