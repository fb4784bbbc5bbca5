#include <doctest.h>

#include "fmrc/diagnostics.hpp"
#include "fmrc/random.hpp"

#include "chain_fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace fmrc;
using namespace fmrc::diag;
using namespace fmrc::fixtures;

namespace {

double brute_force_assignment(const Eigen::MatrixXd& cost) {
  std::vector<int> perm(cost.rows());
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) c += cost(static_cast<Eigen::Index>(i), perm[i]);
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST_CASE("residuals vanish on lumpable and decomposable chains") {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const auto lump = lumpable_chain(9, 3, rng);
    CHECK(lumpability_residual(lump) < 1e-12);
    const auto dec = decomposable_chain(9, 3, rng);
    CHECK(decomposability_residual(dec) < 1e-12);
    const auto prod = product_chain(3, 4, rng);
    CHECK(lumpability_residual(prod) < 1e-12);
    CHECK(decomposability_residual(prod) < 1e-12);
  }
}

TEST_CASE("residuals are positive after perturbation") {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    auto lump = lumpable_chain(8, 2, rng);
    perturb(lump, rng, 0.1);
    CHECK(lumpability_residual(lump) > 1e-6);
    auto dec = decomposable_chain(8, 2, rng);
    perturb(dec, rng, 0.1);
    CHECK(decomposability_residual(dec) > 1e-6);
  }
}

TEST_CASE("residual is the maximum within-block total variation") {
  DiscreteChain c;
  c.P = Eigen::Matrix3d{{0.5, 0.5, 0.0}, {0.2, 0.8, 0.0}, {0.0, 0.0, 1.0}};
  c.rho0 = Eigen::Vector3d::Constant(1.0 / 3);
  c.lump_map = {0, 0, 1};
  CHECK(lumpability_residual(c) == doctest::Approx(0.3));
  c.lump_map = {0, 1, 1};
  CHECK(lumpability_residual(c) == doctest::Approx(1.0));
}

TEST_CASE("zero residual is equivalent to the reduced operator equalling the full one") {
  Rng rng(3);
  int zero_cases = 0;
  for (int t = 0; t < 100; ++t) {
    const int n = 4 + static_cast<int>(rng.index(6));
    const int m = 1 + static_cast<int>(rng.index(n - 1));
    auto lump = lumpable_chain(n, m, rng);
    auto dec = decomposable_chain(n, m, rng);
    if (t % 2) {
      perturb(lump, rng, 0.05);
      perturb(dec, rng, 0.05);
    }
    const auto rl = reduced_operators(lump);
    const bool lump_zero = lumpability_residual(lump) < 1e-12;
    CHECK(lump_zero == ((rl.koopman_lumped - lump.P).cwiseAbs().maxCoeff() < 1e-12));
    const auto rd = reduced_operators(dec);
    const bool dec_zero = decomposability_residual(dec) < 1e-12;
    CHECK(dec_zero == ((rd.transfer_decomposed - dec.backward_matrix()).cwiseAbs().maxCoeff() < 1e-12));
    zero_cases += lump_zero + dec_zero;
  }
  CHECK(zero_cases >= 100);
}

TEST_CASE("backward matrix is row-stochastic where rho1 is positive") {
  Rng rng(4);
  const auto c = lumpable_chain(6, 2, rng);
  const auto B = c.backward_matrix();
  CHECK((B.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK((c.rho1() - c.P.transpose() * c.rho0).norm() < 1e-15);
}

TEST_CASE("chain validation") {
  DiscreteChain c;
  c.P = Eigen::Matrix2d{{0.5, 0.5}, {0.3, 0.6}};
  c.rho0 = Eigen::Vector2d(0.5, 0.5);
  c.lump_map = {0, 0};
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c.P(1, 1) = 0.7;
  c.lump_map = {0, 2};
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c.lump_map = {0, 1};
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("assignment solver matches brute force") {
  Rng rng(5);
  for (int n = 1; n <= 7; ++n)
    for (int t = 0; t < 5; ++t) {
      const Eigen::MatrixXd cost = Eigen::MatrixXd::NullaryExpr(n, n, [&] { return rng.uniform(); });
      const auto match = solve_assignment(cost);
      double total = 0.0;
      std::vector<int> seen(n, 0);
      for (int i = 0; i < n; ++i) {
        total += cost(i, match[i]);
        ++seen[match[i]];
      }
      CHECK(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
      CHECK(total == doctest::Approx(brute_force_assignment(cost)).epsilon(1e-12));
    }
}

TEST_CASE("exact W2 in one dimension equals the sorted coupling") {
  Rng rng(6);
  const Eigen::MatrixXd a = rng.normal_matrix(200, 1), b = 0.5 * rng.normal_matrix(200, 1).array() + 1.0;
  std::vector<double> sa(a.data(), a.data() + 200), sb(b.data(), b.data() + 200);
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  double acc = 0.0;
  for (int i = 0; i < 200; ++i) acc += (sa[i] - sb[i]) * (sa[i] - sb[i]);
  const double expected = std::sqrt(acc / 200);
  CHECK(empirical_w2(a, b) == doctest::Approx(expected).epsilon(1e-12));
  W2Options sliced;
  sliced.mode = W2Mode::Sliced;
  sliced.n_projections = 4;
  CHECK(empirical_w2(a, b, sliced) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("W2 properties") {
  Rng rng(7);
  const Eigen::MatrixXd a = rng.normal_matrix(64, 3);
  CHECK(empirical_w2(a, a) == 0.0);
  const Eigen::MatrixXd shifted = a.rowwise() + Eigen::RowVector3d(1.0, 2.0, 2.0);
  CHECK(empirical_w2(a, shifted) == doctest::Approx(3.0).epsilon(1e-12));
  W2Options sliced;
  sliced.mode = W2Mode::Sliced;
  const Eigen::MatrixXd b = rng.normal_matrix(64, 3);
  CHECK(empirical_w2(a, b, sliced) <= empirical_w2(a, b) + 1e-12);
  CHECK(empirical_w2(a, rng.normal_matrix(50, 3), sliced) > 0.0);
  CHECK_THROWS_AS(empirical_w2(a, b.topRows(10)), InvalidArgument);
  CHECK_THROWS_AS(empirical_w2(Eigen::MatrixXd::Zero(3000, 1), Eigen::MatrixXd::Zero(3000, 1)), InvalidArgument);
}

TEST_CASE("test-function dictionary is nested and H1-normalized") {
  Rng rng(8);
  const Eigen::MatrixXd support = rng.normal_matrix(300, 2);
  GridSpec small{4, 5, 2.0}, large{4, 12, 2.0};
  const auto d5 = gaussian_dictionary(support, support, small);
  const auto d12 = gaussian_dictionary(support, support, large);
  CHECK(d5.size() == 5);
  CHECK(d12.size() == 12);
  const Eigen::MatrixXd probe = rng.normal_matrix(20, 2);
  for (int k = 0; k < 5; ++k) CHECK(d5[k](probe) == d12[k](probe));

  const Eigen::VectorXd spacing =
      (support.colwise().maxCoeff() - support.colwise().minCoeff()).transpose() / 4.0;
  for (const auto& f : d12) CHECK(h1_norm(f, support, 0.5 * spacing) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(gaussian_dictionary(support, support, GridSpec{2, 5, 2.0}), InvalidArgument);
}

TEST_CASE("H1 norm of a linear function") {
  Rng rng(9);
  const Eigen::MatrixXd rho = rng.normal_matrix(500, 2);
  TestFunction f = [](const Eigen::MatrixXd& x) -> Eigen::VectorXd { return 2.0 * x.col(0) - x.col(1); };
  const double expected = std::sqrt(f(rho).squaredNorm() / 500 + 4.0 + 1.0);
  CHECK(h1_norm(f, rho, Eigen::Vector2d(0.1, 0.1)) == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("weak error vanishes for exact samples and detects a shift") {
  Rng rng(10);
  const Eigen::MatrixXd x = rng.normal_matrix(1000, 2);
  const Eigen::MatrixXd y = 0.8 * x + 0.3 * rng.normal_matrix(1000, 2);
  const auto g = gaussian_dictionary(x, x, GridSpec{});
  const auto f = gaussian_dictionary(y, y, GridSpec{});
  const auto exact = weak_operator_error(x, y, y, g, f);
  CHECK(exact.weak_error == 0.0);
  CHECK(exact.noise_floor == 0.0);
  const Eigen::MatrixXd shifted = y.array() + 1.0;
  const auto off = weak_operator_error(x, y, shifted, g, f);
  CHECK(off.weak_error > 5.0 * off.noise_floor);
  CHECK(off.per_test_function.size() == g.size());
  CHECK(*std::max_element(off.per_test_function.begin(), off.per_test_function.end()) == off.weak_error);
  const auto j = off.to_json();
  CHECK(j.contains("restriction"));
  CHECK(j.at("dictionary_size") == 25);
}

TEST_CASE("weak error of an independent redraw is within a few noise floors") {
  Rng rng(11);
  const Eigen::MatrixXd x = rng.normal_matrix(4000, 1);
  const Eigen::MatrixXd y = 0.5 * x + rng.normal_matrix(4000, 1);
  const Eigen::MatrixXd y2 = 0.5 * x + rng.normal_matrix(4000, 1);
  const auto g = gaussian_dictionary(x, x, GridSpec{5, 5, 2.0});
  const auto f = gaussian_dictionary(y, y, GridSpec{5, 5, 2.0});
  const auto rep = weak_operator_error(x, y, y2, g, f);
  CHECK(rep.noise_floor > 0.0);
  // 25 pairings; a max over 25 roughly Gaussian deviations stays below ~4 standard errors
  CHECK(rep.weak_error < 4.0 * rep.noise_floor);
}

TEST_CASE("W2 between equal-variance Gaussians is the mean shift") {
  Rng rng(12);
  const Eigen::MatrixXd a = rng.normal_matrix(1024, 1);
  const Eigen::MatrixXd b = (rng.normal_matrix(1024, 1).array() + 2.0).matrix();
  const double exact = empirical_w2(a, b);
  CHECK(std::abs(exact - 2.0) < 0.15);
  W2Options sliced;
  sliced.mode = W2Mode::Sliced;
  CHECK(std::abs(empirical_w2(a, b, sliced) - exact) < 0.1 * exact);
}
