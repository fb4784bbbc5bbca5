#include <doctest.h>

#include "fmrc/msm.hpp"
#include "fmrc/random.hpp"

#include <algorithm>
#include <cmath>
#include <set>

using namespace fmrc;
using namespace fmrc::msm;

namespace {

// Row-stochastic block-diagonal matrix with random positive blocks.
Eigen::MatrixXd block_diagonal(const std::vector<int>& sizes, Rng& rng) {
  int n = 0;
  for (int s : sizes) n += s;
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(n, n);
  int off = 0;
  for (int s : sizes) {
    for (int i = 0; i < s; ++i) {
      for (int j = 0; j < s; ++j) P(off + i, off + j) = 0.1 + rng.uniform();
      P.row(off + i) /= P.row(off + i).sum();
    }
    off += s;
  }
  return P;
}

// Crisp assignments agree up to a relabeling.
bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j)
      if ((a[i] == a[j]) != (b[i] == b[j])) return false;
  return true;
}

}  // namespace

TEST_CASE("k-means separates well-spaced blobs and is seeded") {
  Rng rng(1);
  const Eigen::Matrix<double, 4, 2> centers{{0, 0}, {10, 0}, {0, 10}, {10, 10}};
  Eigen::MatrixXd pts(400, 2);
  std::vector<int> truth(400);
  for (int i = 0; i < 400; ++i) {
    truth[i] = i % 4;
    pts.row(i) = centers.row(i % 4) + 0.5 * rng.normal_matrix(1, 2);
  }
  const auto a = kmeans_discretize(pts, 4, 3);
  const auto b = kmeans_discretize(pts, 4, 3);
  CHECK(a.labels == b.labels);
  CHECK(a.discretization.centers == b.discretization.centers);
  CHECK(same_partition(a.labels, truth));
  CHECK(a.discretization.assign(pts) == a.labels);
  CHECK(a.discretization.inertia == doctest::Approx(inertia(pts, a.discretization.centers, a.labels)));
  CHECK_THROWS_AS(kmeans_discretize(pts.topRows(3), 4, 1), InvalidArgument);
}

TEST_CASE("Lloyd iterations never increase inertia relative to the seeding") {
  Rng rng(2);
  const Eigen::MatrixXd pts = rng.normal_matrix(500, 2);
  KMeansOptions one;
  one.max_iterations = 1;
  const auto coarse = kmeans_discretize(pts, 10, 5, one);
  const auto fine = kmeans_discretize(pts, 10, 5);
  CHECK(fine.discretization.inertia <= coarse.discretization.inertia + 1e-12);
}

TEST_CASE("transition counts match a brute-force count") {
  Rng rng(3);
  std::vector<std::vector<int>> seqs(3);
  for (auto& s : seqs) {
    s.resize(200);
    for (auto& v : s) v = static_cast<int>(rng.index(5));
  }
  const int lag = 3;
  const auto T = count_transition_matrix(seqs, 5, lag);
  Eigen::MatrixXi ref = Eigen::MatrixXi::Zero(5, 5);
  for (const auto& s : seqs)
    for (std::size_t k = 0; k + lag < s.size(); ++k) ++ref(s[k], s[k + lag]);
  CHECK(T.counts == ref);
  CHECK(T.active.size() == 5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      CHECK(T.P(i, j) == doctest::Approx(static_cast<double>(ref(i, j)) / ref.row(i).sum()));
}

TEST_CASE("states without outgoing transitions are excluded") {
  // state 2 only appears at the end, so it has no outgoing lag-1 counts
  const std::vector<std::vector<int>> seqs{{0, 1, 0, 1, 0, 2}};
  const auto T = count_transition_matrix(seqs, 4, 1);
  CHECK(T.excluded == std::vector<int>{2, 3});
  CHECK(T.active == std::vector<int>{0, 1});
  CHECK(T.active_index(2) == -1);
  CHECK(T.P.rows() == 2);
  CHECK((T.P.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-15);
  const std::vector<std::vector<int>> dead{{0, 1}};
  CHECK_THROWS_AS(count_transition_matrix(dead, 2, 5), InvalidArgument);
}

TEST_CASE("stationary distribution is invariant") {
  Rng rng(4);
  Eigen::MatrixXd P(6, 6);
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) P(i, j) = rng.uniform();
    P.row(i) /= P.row(i).sum();
  }
  const auto pi = stationary_distribution(P);
  CHECK(pi.sum() == doctest::Approx(1.0));
  CHECK((P.transpose() * pi - pi).norm() < 1e-12);
}

TEST_CASE("PCCA+ recovers block-diagonal chains exactly") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<int> sizes;
    const int k = 2 + trial % 5;
    for (int b = 0; b < k; ++b) sizes.push_back(2 + static_cast<int>(rng.index(5)));
    const Eigen::MatrixXd P = block_diagonal(sizes, rng);
    std::vector<int> truth;
    for (int b = 0; b < k; ++b)
      for (int i = 0; i < sizes[b]; ++i) truth.push_back(b);
    const auto res = pcca_plus(P, k);
    CHECK(same_partition(res.crisp, truth));
    CHECK((res.chi.array() >= -1e-12).all());
    CHECK((res.chi.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-10);
    CHECK(std::set<int>(res.crisp.begin(), res.crisp.end()).size() == static_cast<std::size_t>(k));
    CHECK((res.chi.rowwise().maxCoeff().array() - 1.0).abs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("PCCA+ finds metastable sets of a weakly coupled chain") {
  Rng rng(6);
  Eigen::MatrixXd P = block_diagonal({5, 4, 6}, rng);
  const Eigen::MatrixXd U = Eigen::MatrixXd::Constant(15, 15, 1.0 / 15);
  P = 0.98 * P + 0.02 * U;
  std::vector<int> truth;
  for (int i = 0; i < 15; ++i) truth.push_back(i < 5 ? 0 : (i < 9 ? 1 : 2));
  const auto res = pcca_plus(P, 3);
  CHECK(same_partition(res.crisp, truth));
  CHECK(res.eigenvalues(0) == doctest::Approx(1.0));
  CHECK(res.eigenvalues(2) > 0.9);
  PccaOptions nonrev;
  nonrev.reversibilize = false;
  CHECK(same_partition(pcca_plus(P, 3, nonrev).crisp, truth));
}

TEST_CASE("non-reversible PCCA+ rejects complex dominant spectra") {
  // A 3-cycle has complex eigenvalues exp(+-2 pi i / 3).
  Eigen::Matrix3d P{{0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}, {1.0, 0.0, 0.0}};
  PccaOptions nonrev;
  nonrev.reversibilize = false;
  CHECK_THROWS_AS(pcca_plus(P, 2, nonrev), NumericalFailure);
  CHECK_THROWS_AS(pcca_plus(P, 4), InvalidArgument);
}

TEST_CASE("separation of perfectly ordered clusters") {
  std::vector<double> rc;
  std::vector<int> labels;
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 50; ++i) {
      rc.push_back(3.0 * c + 0.01 * (i - 25));
      labels.push_back((c * 7) % 4);
    }
  const auto rep = rc_cluster_separation(rc, labels);
  CHECK(rep.accuracy == 1.0);
  CHECK(rep.clusters.size() == 4);
  CHECK(rep.thresholds.size() == 3);
  CHECK(rep.gaps.size() == 3);
  for (std::size_t i = 1; i < rep.clusters.size(); ++i) CHECK(rep.clusters[i].mean > rep.clusters[i - 1].mean);
  CHECK(rep.min_gap_ratio > 10.0);
  CHECK(!rep.merged);
  const auto j = rep.to_json();
  CHECK(j.at("accuracy") == 1.0);
}

TEST_CASE("a single merge rescues two clusters mapped to the same RC value") {
  std::vector<double> rc;
  std::vector<int> labels;
  const double centers[] = {0.0, 2.0, 4.0, 0.0};  // labels 0 and 3 collide
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 40; ++i) {
      rc.push_back(centers[c] + 0.05 * ((i % 9) - 4));
      labels.push_back(c);
    }
  const auto plain = rc_cluster_separation(rc, labels);
  CHECK(plain.accuracy < 0.9);
  SeparationOptions opt;
  opt.allow_single_merge = true;
  const auto merged = rc_cluster_separation(rc, labels, opt);
  CHECK(merged.merged);
  CHECK(merged.accuracy == 1.0);
  CHECK(std::min(merged.merged_from, merged.merged_into) == 0);
  CHECK(std::max(merged.merged_from, merged.merged_into) == 3);
  CHECK(merged.to_json().contains("merge"));
}

TEST_CASE("separation reports small clusters and rejects bad input") {
  std::vector<double> rc{0.0, 0.1, 5.0, 5.1, 5.2, 9.0};
  std::vector<int> labels{0, 0, 1, 1, 1, 2};
  SeparationOptions opt;
  opt.min_cluster_size = 2;
  const auto rep = rc_cluster_separation(rc, labels, opt);
  CHECK(rep.small_clusters == std::vector<int>{2});
  std::vector<int> one(6, 0);
  CHECK_THROWS_AS(rc_cluster_separation(rc, one), InvalidArgument);
  std::vector<int> shorter{0, 1};
  CHECK_THROWS_AS(rc_cluster_separation(rc, shorter), InvalidArgument);
}
