#pragma once

// Independent reference computations for the observer statistics, shared by
// the unit tests and the acceptance binary.

#include <cmath>
#include <vector>

#include "sparsespect/observer.hpp"
#include "sparsespect/rng.hpp"

namespace oracle {

inline double psi(double x, double y) { return x > y ? 1.0 : (x == y ? 0.5 : 0.0); }

inline double brute_auc(const std::vector<double>& p, const std::vector<double>& a) {
  double s = 0.0;
  for (double x : p)
    for (double y : a) s += psi(x, y);
  return s / (static_cast<double>(p.size()) * static_cast<double>(a.size()));
}

/// Textbook DeLong (1988) for two paired arms, from the O(mn) placement
/// values and unbiased sample (co)variances.
struct TextbookDeLong {
  double auc_a, auc_b, var_a, var_b, cov, z;
};

inline TextbookDeLong textbook_delong(const std::vector<double>& pa, const std::vector<double>& aa,
                                      const std::vector<double>& pb, const std::vector<double>& ab) {
  const std::size_t m = pa.size(), n = aa.size();
  std::vector<double> v10a(m), v10b(m), v01a(n), v01b(n);
  for (std::size_t i = 0; i < m; ++i) {
    double sa = 0.0, sb = 0.0;
    for (std::size_t j = 0; j < n; ++j) sa += psi(pa[i], aa[j]), sb += psi(pb[i], ab[j]);
    v10a[i] = sa / n;
    v10b[i] = sb / n;
  }
  for (std::size_t j = 0; j < n; ++j) {
    double sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < m; ++i) sa += psi(pa[i], aa[j]), sb += psi(pb[i], ab[j]);
    v01a[j] = sa / m;
    v01b[j] = sb / m;
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  auto cov = [&](const std::vector<double>& x, const std::vector<double>& y) {
    const double mx = mean(x), my = mean(y);
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - mx) * (y[i] - my);
    return s / static_cast<double>(x.size() - 1);
  };
  TextbookDeLong r{};
  r.auc_a = mean(v10a);
  r.auc_b = mean(v10b);
  r.var_a = cov(v10a, v10a) / m + cov(v01a, v01a) / n;
  r.var_b = cov(v10b, v10b) / m + cov(v01b, v01b) / n;
  r.cov = cov(v10a, v10b) / m + cov(v01a, v01b) / n;
  const double vd = r.var_a + r.var_b - 2.0 * r.cov;
  r.z = (r.auc_a - r.auc_b) / std::sqrt(vd);
  return r;
}

/// Two arms scoring the same 2n cases with correlated noise; arm b's
/// separation is `shift_b`, arm a's is 1.
struct PairedScores {
  std::vector<double> pa, aa, pb, ab;
};

inline PairedScores correlated_scores(int n, double shift_b, double rho, std::uint64_t seed) {
  sparsespect::Rng rng(seed);
  PairedScores s;
  const double q = std::sqrt(1.0 - rho * rho);
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal(), y = rng.normal();
    s.pa.push_back(1.0 + x);
    s.pb.push_back(shift_b + rho * x + q * y);
  }
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal(), y = rng.normal();
    s.aa.push_back(x);
    s.ab.push_back(rho * x + q * y);
  }
  return s;
}

/// Paired stratified bootstrap of the AUC difference; two-sided test of
/// diff / sd_boot against the normal reference.
inline double bootstrap_p(const PairedScores& s, int replicates, std::uint64_t seed) {
  sparsespect::Rng rng(seed);
  const std::size_t m = s.pa.size(), n = s.aa.size();
  std::vector<double> pa(m), pb(m), aa(n), ab(n);
  double sum = 0.0, sum2 = 0.0;
  for (int r = 0; r < replicates; ++r) {
    for (std::size_t i = 0; i < m; ++i) {
      const auto k = rng.below(m);
      pa[i] = s.pa[k];
      pb[i] = s.pb[k];
    }
    for (std::size_t j = 0; j < n; ++j) {
      const auto k = rng.below(n);
      aa[j] = s.aa[k];
      ab[j] = s.ab[k];
    }
    const double d = sparsespect::auc(pa, aa) - sparsespect::auc(pb, ab);
    sum += d;
    sum2 += d * d;
  }
  const double mean = sum / replicates;
  const double sd = std::sqrt((sum2 - replicates * mean * mean) / (replicates - 1));
  const double diff = sparsespect::auc(s.pa, s.aa) - sparsespect::auc(s.pb, s.ab);
  return sparsespect::two_sided_p(diff / sd);
}

inline sparsespect::ObserverStudy unclustered(const std::vector<double>& p, const std::vector<double>& a) {
  sparsespect::ObserverStudy s;
  s.scores_present = p;
  s.scores_absent = a;
  for (std::size_t i = 0; i < p.size(); ++i) s.cluster_ids_present.push_back(static_cast<int>(i));
  for (std::size_t j = 0; j < a.size(); ++j) s.cluster_ids_absent.push_back(static_cast<int>(p.size() + j));
  return s;
}

/// Fraction of `trials` seeded trials in which DeLong and the bootstrap agree
/// on rejecting at alpha. Even trials are null (equal separation), odd ones
/// have arm b at separation 0.5.
inline int delong_bootstrap_agreement(int trials, int n, int replicates, double alpha = 0.05) {
  int agree = 0;
  for (int t = 0; t < trials; ++t) {
    const double shift_b = t % 2 == 0 ? 1.0 : 0.5;
    const PairedScores s = correlated_scores(n, shift_b, 0.5, 1000 + static_cast<std::uint64_t>(t));
    const auto d = sparsespect::delong_paired(unclustered(s.pa, s.aa), unclustered(s.pb, s.ab));
    const double pb = bootstrap_p(s, replicates, 9000 + static_cast<std::uint64_t>(t));
    agree += (d.p_two_sided < alpha) == (pb < alpha);
  }
  return agree;
}

}  // namespace oracle
