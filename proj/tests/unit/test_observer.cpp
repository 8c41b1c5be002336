#include <doctest.h>

#include <complex>
#include <numbers>

#include "sparsespect/observer.hpp"
#include "unit/observer_oracles.hpp"
#include "unit/test_util.hpp"

using namespace sparsespect;

namespace {

std::vector<double> normals(int n, double mean, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = mean + rng.normal();
  return v;
}

std::vector<ChannelVector> gaussian_features(int n, const ChannelVector& mean, Rng& rng) {
  std::vector<ChannelVector> f(static_cast<std::size_t>(n), mean);
  for (auto& v : f)
    for (double& x : v) x += rng.normal();
  return f;
}

double cosine(const ChannelVector& a, const ChannelVector& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  return ab / std::sqrt(aa * bb);
}

SampleMeta meta_at(Point3 p) {
  SampleMeta m;
  m.defect_present = true;
  m.signal_location_vox = p;
  m.defect_centroid_vox = p;
  m.lv_center_vox = p;
  return m;
}

}  // namespace

TEST_CASE("AUC equals brute-force pair enumeration exactly") {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const int m = 1 + static_cast<int>(rng.below(200)), n = 1 + static_cast<int>(rng.below(200));
    std::vector<double> p(m), a(n);
    // Coarse values force plenty of ties.
    for (double& x : p) x = std::round(rng.uniform(0.0, 20.0)) / 4.0;
    for (double& x : a) x = std::round(rng.uniform(-2.0, 18.0)) / 4.0;
    CHECK(auc(p, a) == oracle::brute_auc(p, a));
  }
  std::vector<double> p(200), a(200);
  for (double& x : p) x = rng.normal();
  for (double& x : a) x = rng.normal();
  CHECK(auc(p, a) == oracle::brute_auc(p, a));
}

TEST_CASE("AUC worked examples and properties") {
  CHECK(auc({0.9, 0.4}, {0.5, 0.1}) == 0.75);
  CHECK(auc({3.0, 4.0}, {1.0, 2.0}) == 1.0);
  CHECK(auc({1.0, 2.0, 2.0}, {2.0, 1.0, 2.0}) == 0.5);
  CHECK_THROWS_AS(auc({}, {1.0}), std::invalid_argument);
  Rng rng(2);
  const auto p = normals(60, 0.8, rng), a = normals(70, 0.0, rng);
  std::vector<double> tp, ta;
  for (double x : p) tp.push_back(std::exp(3.0 * x) + x);
  for (double x : a) ta.push_back(std::exp(3.0 * x) + x);
  CHECK(auc(tp, ta) == auc(p, a));
  CHECK(auc(a, p) == 1.0 - auc(p, a));
}

TEST_CASE("CHO template for isotropic Gaussian classes is parallel to the mean difference") {
  Rng rng(3);
  const ChannelVector mp{1.0, -0.5, 0.25, 2.0}, ma{0.0, 0.0, 0.0, 0.0};
  const auto fp = gaussian_features(500, mp, rng), fa = gaussian_features(500, ma, rng);
  const ChoTemplate t = cho_train(fp, fa, 0.0);
  CHECK(cosine(t.w, mp) >= 0.99);
  CHECK(t.n_channels() == 4);
}

TEST_CASE("CHO with scalar features reduces to mean difference over variance") {
  const std::vector<ChannelVector> p{{1.0}, {2.0}, {4.0}}, a{{0.0}, {1.0}};
  // class variances 7/3 and 1/2, pooled 17/12; means 7/3 and 1/2
  const ChoTemplate t = cho_train(p, a, 0.0);
  CHECK(t.w[0] == doctest::Approx((7.0 / 3.0 - 0.5) / (17.0 / 12.0)).epsilon(1e-14));
  const ChoTemplate r = cho_train(p, a, 0.5);
  CHECK(r.w[0] == doctest::Approx((7.0 / 3.0 - 0.5) / (17.0 / 12.0 + 0.5)).epsilon(1e-14));
}

TEST_CASE("CHO on identical classes gives a near-zero template and chance AUC") {
  Rng rng(4);
  const auto f = gaussian_features(400, {0.0, 0.0, 0.0}, rng);
  const ChoTemplate t = cho_train(f, f, 0.0);
  for (double w : t.w) CHECK(std::abs(w) <= 1e-12);
  const auto s = cho_apply(t, f);
  CHECK(auc(s, s) == 0.5);
}

TEST_CASE("cho_apply is a dot product") {
  ChoTemplate t;
  t.w = {2.0, -1.0};
  const auto s = cho_apply(t, {{1.0, 1.0}, {0.5, 3.0}, {-2.0, 0.0}});
  CHECK(s == std::vector<double>{1.0, -2.0, -4.0});
  t.w = {0.0, 0.0};
  for (double x : cho_apply(t, {{1.0, 5.0}, {7.0, 3.0}})) CHECK(x == 0.0);
  CHECK_THROWS_AS(cho_apply(t, {{1.0}}), std::invalid_argument);
}

TEST_CASE("CHO pipeline: scaling features keeps AUC, swapping labels flips it") {
  Rng rng(5);
  const auto fp = gaussian_features(80, {0.5, 0.3, 0.0}, rng), fa = gaussian_features(90, {0.0, 0.0, 0.1}, rng);
  const ChoTemplate t = cho_train(fp, fa, 0.0);
  const double a = auc(cho_apply(t, fp), cho_apply(t, fa));
  auto scaled = [](std::vector<ChannelVector> f) {
    for (auto& v : f)
      for (double& x : v) x *= 3.5;
    return f;
  };
  CHECK(auc(cho_apply(t, scaled(fp)), cho_apply(t, scaled(fa))) == a);
  const ChoTemplate swapped = cho_train(fa, fp, 0.0);
  CHECK(auc(cho_apply(swapped, fp), cho_apply(swapped, fa)) == 1.0 - a);
}

TEST_CASE("singular covariance needs a ridge") {
  const std::vector<ChannelVector> p{{1.0, 2.0}, {2.0, 4.0}, {3.0, 6.0}}, a{{0.0, 0.0}, {1.0, 2.0}};
  CHECK_THROWS_AS(cho_train(p, a, 0.0), SingularCovarianceError);
  CHECK_NOTHROW(cho_train(p, a, default_ridge(p, a, 1e-3)));
  CHECK_THROWS_AS(cho_train(p, a, -1.0), std::invalid_argument);
}

TEST_CASE("feature extraction") {
  const ChannelBank bank(32, 32, {{0.05, 0.1}, {0.1, 0.2}, {0.2, 0.4}});
  const SampleMeta m = meta_at({12.4, 19.6, 3.0});
  SUBCASE("zero image gives zero features") {
    for (double x : extract_feature(Volume3D({32, 32, 6}, 1.0), m, bank)) CHECK(x == 0.0);
  }
  SUBCASE("a constant offset does not change features") {
    const Volume3D v = testutil::random_volume({32, 32, 6}, 6);
    Volume3D w = v;
    for (double& x : w.data()) x += 4.0;
    const auto a = extract_feature(v, m, bank), b = extract_feature(w, m, bank);
    for (std::size_t c = 0; c < a.size(); ++c) CHECK(std::abs(a[c] - b[c]) <= 1e-12);
  }
  SUBCASE("Gaussian blob at the signal location matches a frequency-domain oracle") {
    // For a blob centered exactly on the channel center the output is
    // 1/N sum_{f in band} |G(f)| where G is the blob's centered DFT.
    const int n = 32;
    Volume3D v({n, n, 6}, 1.0);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) v(x, y, 3) = std::exp(-((x - 12.0) * (x - 12.0) + (y - 20.0) * (y - 20.0)) / 10.0);
    const auto f = extract_feature(v, m, bank);
    for (int c = 0; c < bank.n_channels(); ++c) {
      std::complex<double> acc = 0.0;
      for (int ky = 0; ky < n; ++ky)
        for (int kx = 0; kx < n; ++kx) {
          const double r = radial_frequency(kx, ky, n, n);
          if (r < bank.passbands()[c].lo || r >= bank.passbands()[c].hi) continue;
          std::complex<double> g = 0.0;
          for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
              g += v(x, y, 3) *
                   std::polar(1.0, -2.0 * std::numbers::pi * (double(kx) * (x - 12) + double(ky) * (y - 20)) / n);
          acc += g;
        }
      CHECK(std::abs(f[c] - acc.real() / (n * n)) <= 1e-10);
    }
  }
  SUBCASE("out-of-range location") {
    CHECK_THROWS_AS(extract_feature(Volume3D({32, 32, 6}, 1.0), meta_at({12.0, 19.0, 6.0}), bank),
                    std::out_of_range);
  }
}

TEST_CASE("unclustered DeLong equals the textbook estimator") {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    const auto s = oracle::correlated_scores(40 + static_cast<int>(seed), 0.6, 0.4, seed);
    const auto d = delong_paired(oracle::unclustered(s.pa, s.aa), oracle::unclustered(s.pb, s.ab));
    const auto t = oracle::textbook_delong(s.pa, s.aa, s.pb, s.ab);
    CHECK(std::abs(d.auc_a - t.auc_a) <= 1e-12);
    CHECK(std::abs(d.var_a - t.var_a) <= 1e-12);
    CHECK(std::abs(d.var_b - t.var_b) <= 1e-12);
    CHECK(std::abs(d.cov - t.cov) <= 1e-12);
    CHECK(std::abs(d.z - t.z) <= 1e-9);
    CHECK(std::abs(auc_variance(oracle::unclustered(s.pa, s.aa)) - t.var_a) <= 1e-12);
  }
}

TEST_CASE("DeLong decisions agree with a paired bootstrap") {
  CHECK(oracle::delong_bootstrap_agreement(100, 50, 10000) >= 95);
}

TEST_CASE("DeLong symmetry and the identical-arm case") {
  const auto s = oracle::correlated_scores(30, 0.4, 0.3, 21);
  const auto a = oracle::unclustered(s.pa, s.aa), b = oracle::unclustered(s.pb, s.ab);
  const auto ab = delong_paired(a, b), ba = delong_paired(b, a);
  CHECK(ab.z == -ba.z);
  CHECK(ab.p_two_sided == ba.p_two_sided);
  const auto aa = delong_paired(a, a);
  CHECK(aa.z == 0.0);
  CHECK(aa.p_two_sided == 1.0);
}

TEST_CASE("clustered DeLong") {
  SUBCASE("duplicating every case inside its own cluster keeps the AUC") {
    const auto s = oracle::correlated_scores(25, 0.5, 0.3, 31);
    ObserverStudy one = oracle::unclustered(s.pa, s.aa), two;
    for (int rep = 0; rep < 2; ++rep) {
      two.scores_present.insert(two.scores_present.end(), s.pa.begin(), s.pa.end());
      two.scores_absent.insert(two.scores_absent.end(), s.aa.begin(), s.aa.end());
      two.cluster_ids_present.insert(two.cluster_ids_present.end(), one.cluster_ids_present.begin(),
                                     one.cluster_ids_present.end());
      two.cluster_ids_absent.insert(two.cluster_ids_absent.end(), one.cluster_ids_absent.begin(),
                                    one.cluster_ids_absent.end());
    }
    CHECK(delong_paired(two, two).auc_a == doctest::Approx(auc(s.pa, s.aa)).epsilon(1e-14));
    // Perfectly correlated duplicates carry no extra information.
    CHECK(auc_variance(two) > 0.9 * auc_variance(one));
  }
  SUBCASE("degenerate inputs") {
    const ObserverStudy tied = oracle::unclustered({1.0, 1.0}, {1.0, 1.0});
    CHECK_THROWS_AS(delong_paired(tied, tied), DegenerateVarianceError);
    ObserverStudy bad = oracle::unclustered({1.0, 2.0}, {0.0, 1.5});
    bad.cluster_ids_present.pop_back();
    CHECK_THROWS_AS(delong_paired(bad, bad), std::invalid_argument);
    ObserverStudy other = oracle::unclustered({1.0, 2.0}, {0.0, 1.5});
    other.cluster_ids_absent[0] = 77;
    CHECK_THROWS_AS(delong_paired(oracle::unclustered({1.0, 2.0}, {0.0, 1.5}), other), std::invalid_argument);
  }
}

TEST_CASE("two-sided p-values") {
  CHECK(two_sided_p(0.0) == 1.0);
  CHECK(two_sided_p(1.959963984540054) == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(two_sided_p(-2.5) == two_sided_p(2.5));
}
