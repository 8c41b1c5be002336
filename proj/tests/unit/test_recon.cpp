#include <doctest.h>

#include "sparsespect/osem.hpp"
#include "unit/test_util.hpp"

using namespace sparsespect;

namespace {

// Seeded blob on a warm background.
Volume3D blob(const ParallelProjector& P, std::uint64_t seed) {
  const Dims3 d = P.dims();
  Volume3D v(d, 1.0);
  Rng rng(seed);
  const double cx = rng.uniform(4.0, d.nx - 5.0), cy = rng.uniform(4.0, d.ny - 5.0);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        v(x, y, z) = 0.2 + 2.0 * std::exp(-r2 / 8.0);
      }
  return v;
}

ProjectionSet noiseless_counts(const ParallelProjector& P, std::uint64_t seed) {
  ProjectionSet y = P.forward(blob(P, seed));
  y.kind = ProjectionKind::counts;
  return y;
}

ProjectionSet noisy_counts(const ParallelProjector& P, std::uint64_t seed) {
  const ProjectionSet e = P.forward(blob(P, seed));
  return simulate_counts(e, 400.0, e, seed);
}

}  // namespace

TEST_CASE("MLEM increases the Poisson log-likelihood monotonically") {
  const ParallelProjector P({14, 14, 2}, uniform_angles(12, 180.0));
  const OsemConfig cfg{50, 1, 1.0, 1e-12};
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ProjectionSet y = noiseless_counts(P, seed);
    std::vector<double> ll;
    ll.push_back(poisson_loglik(y, Volume3D(P.dims(), 1.0, 1.0), P));
    osem(y, P, cfg, [&](int, const Volume3D& x) { ll.push_back(poisson_loglik(y, x, P)); });
    REQUIRE(ll.size() == 51);
    for (std::size_t i = 1; i < ll.size(); ++i) CHECK(ll[i] >= ll[i - 1] - 1e-9 * std::abs(ll[i - 1]));
    CHECK(ll.back() > ll.front());
  }
}

TEST_CASE("subsets are interleaved and partition the angles") {
  const auto s = partition_subsets(30, 6);
  REQUIRE(s.size() == 6);
  CHECK(s[0] == std::vector<int>{0, 6, 12, 18, 24});
  CHECK(s[5] == std::vector<int>{5, 11, 17, 23, 29});
  CHECK(partition_subsets(5, 5)[3] == std::vector<int>{3});
  for (int n = 1; n <= 20; ++n)
    for (int k = 1; k <= n; ++k) {
      std::vector<int> seen(n, 0);
      const auto subs = partition_subsets(n, k);
      REQUIRE(subs.size() == static_cast<std::size_t>(k));
      for (int j = 0; j < k; ++j) {
        CHECK(!subs[j].empty());
        for (int a : subs[j]) {
          CHECK(a % k == j);
          ++seen[a];
        }
      }
      for (int c : seen) CHECK(c == 1);
    }
  CHECK_THROWS_AS(partition_subsets(5, 6), std::invalid_argument);
  CHECK_THROWS_AS(partition_subsets(5, 0), std::invalid_argument);
}

TEST_CASE("default reconstruction settings") {
  const OsemConfig c;
  CHECK(c.n_iterations == 8);
  CHECK(c.n_subsets == 6);
  CHECK_NOTHROW((OsemConfig{8, 6}.validate(30)));
  CHECK_NOTHROW((OsemConfig{8, 5}.validate(5)));
  CHECK_THROWS_AS((OsemConfig{8, 6}.validate(5)), std::invalid_argument);
  CHECK_THROWS_AS((OsemConfig{0, 1}.validate(5)), std::invalid_argument);
}

TEST_CASE("OSEM output is nonnegative, finite and deterministic") {
  const ParallelProjector P({16, 16, 3}, uniform_angles(30, 180.0));
  ProjectionSet y = noisy_counts(P, 9);
  for (std::size_t i = 0; i < y.bins.size(); i += 7) y.bins[i] = 0.0;
  const Volume3D a = osem(y, P, OsemConfig{8, 6});
  const Volume3D b = osem(y, P.dims(), 1.0, OsemConfig{8, 6});
  CHECK(a == b);
  for (double x : a.data()) {
    CHECK(std::isfinite(x));
    CHECK(x >= 0.0);
  }
  const ProjectionSet sparse = y.subset(select_angles(30, 5));
  const Volume3D s = osem(sparse, P.dims(), 1.0, OsemConfig{8, 5});
  CHECK(s.min() >= 0.0);
}

TEST_CASE("OSEM rejects bad input") {
  const ParallelProjector P({8, 8, 2}, uniform_angles(6, 180.0));
  ProjectionSet e = P.forward(testutil::random_volume({8, 8, 2}, 1));
  CHECK_THROWS_AS(osem(e, P, OsemConfig{2, 2}), std::invalid_argument);
  e.kind = ProjectionKind::counts;
  const ParallelProjector Q({8, 8, 2}, uniform_angles(6, 180.0, 1.0));
  CHECK_THROWS_AS(osem(e, Q, OsemConfig{2, 2}), std::invalid_argument);
  CHECK_THROWS_AS(osem(e, P, OsemConfig{2, 7}), std::invalid_argument);
}
