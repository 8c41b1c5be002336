#include "sparsespect/observer.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>

namespace sparsespect {

namespace {

std::size_t feature_length(const std::vector<ChannelVector>& a, const std::vector<ChannelVector>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("cho_train: both classes need at least one sample");
  const std::size_t c = a.front().size();
  if (c == 0) throw std::invalid_argument("cho_train: empty feature vectors");
  auto same = [c](const ChannelVector& v) { return v.size() == c; };
  if (!std::all_of(a.begin(), a.end(), same) || !std::all_of(b.begin(), b.end(), same)) {
    throw std::invalid_argument("cho_train: inconsistent feature lengths");
  }
  return c;
}

Eigen::VectorXd class_mean(const std::vector<ChannelVector>& f, std::size_t c) {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c));
  for (const auto& v : f) m += Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(c));
  return m / static_cast<double>(f.size());
}

/// Unbiased sample covariance; a single sample contributes zero.
Eigen::MatrixXd class_covariance(const std::vector<ChannelVector>& f, const Eigen::VectorXd& mean) {
  const auto c = mean.size();
  Eigen::MatrixXd k = Eigen::MatrixXd::Zero(c, c);
  for (const auto& v : f) {
    const Eigen::VectorXd d = Eigen::Map<const Eigen::VectorXd>(v.data(), c) - mean;
    k += d * d.transpose();
  }
  if (f.size() > 1) k /= static_cast<double>(f.size() - 1);
  return k;
}

Eigen::MatrixXd pooled_covariance(const std::vector<ChannelVector>& present, const std::vector<ChannelVector>& absent,
                                  Eigen::VectorXd& mp, Eigen::VectorXd& ma) {
  const std::size_t c = feature_length(present, absent);
  mp = class_mean(present, c);
  ma = class_mean(absent, c);
  Eigen::MatrixXd k = 0.5 * (class_covariance(present, mp) + class_covariance(absent, ma));
  return 0.5 * (k + k.transpose());
}

/// Per-case structural components: for each present case the fraction of
/// absent cases it beats (ties 1/2), and vice versa.
struct Placements {
  std::vector<double> v10;  // present cases
  std::vector<double> v01;  // absent cases
  double auc = 0.0;
};

/// Twice the number of (present > absent) pairs plus ties, as an integer-valued
/// double, for each query against a sorted reference.
double below_plus_half_ties_x2(const std::vector<double>& sorted, double q) {
  const auto lo = std::lower_bound(sorted.begin(), sorted.end(), q);
  const auto hi = std::upper_bound(lo, sorted.end(), q);
  return 2.0 * static_cast<double>(lo - sorted.begin()) + static_cast<double>(hi - lo);
}

Placements placements(const std::vector<double>& present, const std::vector<double>& absent) {
  std::vector<double> sp(present), sa(absent);
  std::sort(sp.begin(), sp.end());
  std::sort(sa.begin(), sa.end());
  const auto m = static_cast<double>(present.size());
  const auto n = static_cast<double>(absent.size());
  Placements out;
  out.v10.resize(present.size());
  out.v01.resize(absent.size());
  double pairs_x2 = 0.0;
  for (std::size_t i = 0; i < present.size(); ++i) {
    const double c = below_plus_half_ties_x2(sa, present[i]);
    pairs_x2 += c;
    out.v10[i] = 0.5 * c / n;
  }
  for (std::size_t j = 0; j < absent.size(); ++j) {
    // present cases above absent[j], ties counting half
    const auto lo = std::lower_bound(sp.begin(), sp.end(), absent[j]);
    const auto hi = std::upper_bound(lo, sp.end(), absent[j]);
    const double c = 2.0 * static_cast<double>(sp.end() - hi) + static_cast<double>(hi - lo);
    out.v01[j] = 0.5 * c / m;
  }
  out.auc = 0.5 * pairs_x2 / (m * n);
  return out;
}

/// Cluster-aggregated components for one arm.
struct ClusterComponents {
  std::vector<double> v10;   // sum of v10 over present cases in the cluster
  std::vector<double> v01;   // sum of v01 over absent cases in the cluster
  std::vector<double> m;     // present cases in the cluster
  std::vector<double> n;     // absent cases in the cluster
  double auc = 0.0;
  double total_m = 0.0;
  double total_n = 0.0;
  int clusters_with_present = 0;
  int clusters_with_absent = 0;
};

ClusterComponents cluster_components(const ObserverStudy& s) {
  const Placements p = placements(s.scores_present, s.scores_absent);
  std::map<int, std::size_t> slot;
  for (int id : s.cluster_ids_present) slot.emplace(id, 0);
  for (int id : s.cluster_ids_absent) slot.emplace(id, 0);
  std::size_t k = 0;
  for (auto& [id, idx] : slot) idx = k++;

  ClusterComponents c;
  c.v10.assign(k, 0.0);
  c.v01.assign(k, 0.0);
  c.m.assign(k, 0.0);
  c.n.assign(k, 0.0);
  for (std::size_t i = 0; i < p.v10.size(); ++i) {
    const auto idx = slot[s.cluster_ids_present[i]];
    c.v10[idx] += p.v10[i];
    c.m[idx] += 1.0;
  }
  for (std::size_t j = 0; j < p.v01.size(); ++j) {
    const auto idx = slot[s.cluster_ids_absent[j]];
    c.v01[idx] += p.v01[j];
    c.n[idx] += 1.0;
  }
  c.auc = p.auc;
  c.total_m = static_cast<double>(p.v10.size());
  c.total_n = static_cast<double>(p.v01.size());
  for (std::size_t i = 0; i < k; ++i) {
    c.clusters_with_present += c.m[i] > 0.0 ? 1 : 0;
    c.clusters_with_absent += c.n[i] > 0.0 ? 1 : 0;
  }
  return c;
}

double clustered_covariance(const ClusterComponents& a, const ClusterComponents& b) {
  const auto clusters = static_cast<double>(a.v10.size());
  const double i10 = a.clusters_with_present;
  const double i01 = a.clusters_with_absent;
  if (i10 < 2 || i01 < 2) throw DegenerateVarianceError("delong: need at least two clusters per class");
  const double big_m = a.total_m, big_n = a.total_n;
  double s10 = 0.0, s01 = 0.0, s11_ab = 0.0, s11_ba = 0.0;
  for (std::size_t i = 0; i < a.v10.size(); ++i) {
    const double da10 = a.v10[i] - a.m[i] * a.auc;
    const double db10 = b.v10[i] - b.m[i] * b.auc;
    const double da01 = a.v01[i] - a.n[i] * a.auc;
    const double db01 = b.v01[i] - b.n[i] * b.auc;
    s10 += da10 * db10;
    s01 += da01 * db01;
    s11_ab += da10 * db01;
    s11_ba += db10 * da01;
  }
  s10 *= i10 / ((i10 - 1.0) * big_m);
  s01 *= i01 / ((i01 - 1.0) * big_n);
  const double k = clusters / (clusters - 1.0);
  s11_ab *= k;
  s11_ba *= k;
  return s10 / big_m + s01 / big_n + (s11_ab + s11_ba) / (big_m * big_n);
}

bool all_tied(const ObserverStudy& s) {
  const double first = s.scores_present.front();
  auto same = [first](double v) { return v == first; };
  return std::all_of(s.scores_present.begin(), s.scores_present.end(), same) &&
         std::all_of(s.scores_absent.begin(), s.scores_absent.end(), same);
}

}  // namespace

void ObserverStudy::validate() const {
  if (scores_present.empty() || scores_absent.empty()) throw std::invalid_argument("ObserverStudy: empty class");
  if (cluster_ids_present.size() != scores_present.size() || cluster_ids_absent.size() != scores_absent.size()) {
    throw std::invalid_argument("ObserverStudy: cluster id lists must match score lists");
  }
}

ChannelVector extract_feature(const Volume3D& image, const SampleMeta& meta, const ChannelBank& bank) {
  const Index3 at = round_index(meta.signal_location_vox);
  if (!image.contains(at[0], at[1], at[2])) {
    throw std::out_of_range("extract_feature: signal location outside image " + to_string(image.dims()));
  }
  if (image.dims().nx != bank.nx() || image.dims().ny != bank.ny()) {
    throw std::invalid_argument("extract_feature: image slice dims do not match channel bank");
  }
  const auto plane = static_cast<std::size_t>(bank.nx()) * bank.ny();
  return channelize(image.data().subspan(plane * static_cast<std::size_t>(at[2]), plane), bank, {at[0], at[1]});
}

double default_ridge(const std::vector<ChannelVector>& features_present,
                     const std::vector<ChannelVector>& features_absent, double fraction) {
  Eigen::VectorXd mp, ma;
  const Eigen::MatrixXd k = pooled_covariance(features_present, features_absent, mp, ma);
  return fraction * k.trace() / static_cast<double>(k.rows());
}

ChoTemplate cho_train(const std::vector<ChannelVector>& features_present,
                      const std::vector<ChannelVector>& features_absent, double ridge) {
  if (!(ridge >= 0.0)) throw std::invalid_argument("cho_train: ridge must be >= 0");
  Eigen::VectorXd mp, ma;
  const Eigen::MatrixXd k = pooled_covariance(features_present, features_absent, mp, ma);
  const auto c = k.rows();
  const Eigen::MatrixXd reg = k + ridge * Eigen::MatrixXd::Identity(c, c);

  const Eigen::LLT<Eigen::MatrixXd> llt(reg);
  const double scale = std::max(reg.diagonal().cwiseAbs().maxCoeff(), 1e-300);
  if (llt.info() != Eigen::Success || llt.matrixL().toDenseMatrix().diagonal().minCoeff() <= 1e-10 * std::sqrt(scale)) {
    throw SingularCovarianceError("cho_train: channel covariance is singular; use a positive ridge");
  }
  const Eigen::VectorXd w = llt.solve(mp - ma);

  ChoTemplate t;
  t.w.assign(w.data(), w.data() + c);
  t.mean_present.assign(mp.data(), mp.data() + c);
  t.mean_absent.assign(ma.data(), ma.data() + c);
  t.covariance.resize(static_cast<std::size_t>(c * c));
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(t.covariance.data(), c, c) = k;
  return t;
}

std::vector<double> cho_apply(const ChoTemplate& tmpl, const std::vector<ChannelVector>& features) {
  std::vector<double> scores;
  scores.reserve(features.size());
  for (const auto& f : features) {
    if (f.size() != tmpl.w.size()) throw std::invalid_argument("cho_apply: feature length does not match template");
    scores.push_back(std::inner_product(f.begin(), f.end(), tmpl.w.begin(), 0.0));
  }
  return scores;
}

double auc(const std::vector<double>& scores_present, const std::vector<double>& scores_absent) {
  if (scores_present.empty() || scores_absent.empty()) throw std::invalid_argument("auc: both classes must be nonempty");
  return placements(scores_present, scores_absent).auc;
}

double two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

double auc_variance(const ObserverStudy& s) {
  s.validate();
  const auto c = cluster_components(s);
  return clustered_covariance(c, c);
}

DeLongResult delong_paired(const ObserverStudy& a, const ObserverStudy& b) {
  a.validate();
  b.validate();
  if (a.cluster_ids_present != b.cluster_ids_present || a.cluster_ids_absent != b.cluster_ids_absent) {
    throw std::invalid_argument("delong_paired: arms must score the same cases in the same order");
  }
  if (all_tied(a) || all_tied(b)) throw DegenerateVarianceError("delong_paired: all scores tied in one arm");

  const auto ca = cluster_components(a);
  const auto cb = cluster_components(b);
  DeLongResult r;
  r.auc_a = ca.auc;
  r.auc_b = cb.auc;
  r.var_a = clustered_covariance(ca, ca);
  r.var_b = clustered_covariance(cb, cb);
  r.cov = clustered_covariance(ca, cb);
  const double var_diff = r.var_a + r.var_b - 2.0 * r.cov;
  const double diff = r.auc_a - r.auc_b;
  if (diff == 0.0) {
    r.z = 0.0;
    r.p_two_sided = 1.0;
    return r;
  }
  if (!(var_diff > 0.0)) {
    throw DegenerateVarianceError("delong_paired: nonpositive variance of the AUC difference");
  }
  r.z = diff / std::sqrt(var_diff);
  r.p_two_sided = two_sided_p(r.z);
  return r;
}

}  // namespace sparsespect
