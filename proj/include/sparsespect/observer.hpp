#pragma once

#include <stdexcept>
#include <vector>

#include "sparsespect/channels.hpp"
#include "sparsespect/phantom.hpp"
#include "sparsespect/volume.hpp"

namespace sparsespect {

class SingularCovarianceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DegenerateVarianceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Scores and cluster ids of one arm, split by truth class.
struct ObserverStudy {
  std::vector<double> scores_present;
  std::vector<double> scores_absent;
  std::vector<int> cluster_ids_present;
  std::vector<int> cluster_ids_absent;

  void validate() const;
};

struct ChoTemplate {
  ChannelVector w;
  ChannelVector mean_present;
  ChannelVector mean_absent;
  std::vector<double> covariance;  // C x C, row-major
  int n_channels() const { return static_cast<int>(w.size()); }
};

/// Channel features of the short-axis slice through the signal location,
/// with the channels centered on that location.
ChannelVector extract_feature(const Volume3D& image, const SampleMeta& meta, const ChannelBank& bank);

/// Hotelling template from the average within-class covariance:
///   w = (K + ridge I)^-1 (mean_present - mean_absent)
/// Throws SingularCovarianceError if K + ridge I is not positive definite.
ChoTemplate cho_train(const std::vector<ChannelVector>& features_present,
                      const std::vector<ChannelVector>& features_absent, double ridge);

/// ridge = fraction * trace(K) / C for the pooled covariance of the features.
double default_ridge(const std::vector<ChannelVector>& features_present,
                     const std::vector<ChannelVector>& features_absent, double fraction = 1e-6);

std::vector<double> cho_apply(const ChoTemplate& tmpl, const std::vector<ChannelVector>& features);

/// Mann-Whitney AUC: pairs count 1 when present > absent, 0.5 on ties.
double auc(const std::vector<double>& scores_present, const std::vector<double>& scores_absent);

struct DeLongResult {
  double auc_a = 0.0;
  double auc_b = 0.0;
  double var_a = 0.0;
  double var_b = 0.0;
  double cov = 0.0;
  double z = 0.0;
  double p_two_sided = 1.0;
};

/// Paired comparison of two correlated AUCs from structural components,
/// aggregated per cluster (Obuchowski's clustered estimator). With one case
/// per cluster this is the ordinary DeLong estimator.
DeLongResult delong_paired(const ObserverStudy& a, const ObserverStudy& b);

/// Clustered variance of a single AUC (same estimator as delong_paired).
double auc_variance(const ObserverStudy& s);

/// Two-sided p-value of a standard normal statistic.
double two_sided_p(double z);

}  // namespace sparsespect
