#include "fmrc/msm.hpp"

#include "fmrc/random.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

namespace fmrc::msm {

std::vector<int> Discretization::assign(const Eigen::MatrixXd& points) const {
  if (points.cols() != centers.cols()) throw InvalidArgument("discretization: point width mismatch");
  std::vector<int> labels(points.rows());
  const Eigen::VectorXd cnorm = centers.rowwise().squaredNorm();
  constexpr Eigen::Index kChunk = 8192;
  for (Eigen::Index start = 0; start < points.rows(); start += kChunk) {
    const Eigen::Index n = std::min(kChunk, points.rows() - start);
    // |p - c|^2 = |p|^2 - 2 p.c + |c|^2; |p|^2 is constant per row
    const Eigen::MatrixXd d = (-2.0 * points.middleRows(start, n) * centers.transpose()).rowwise() + cnorm.transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best;
      d.row(i).minCoeff(&best);
      labels[start + i] = static_cast<int>(best);
    }
  }
  return labels;
}

double inertia(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centers, const std::vector<int>& labels) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) s += (points.row(i) - centers.row(labels[i])).squaredNorm();
  return s;
}

KMeansResult kmeans_discretize(const Eigen::MatrixXd& points, int k, std::uint64_t seed, KMeansOptions options) {
  const Eigen::Index n = points.rows();
  if (k < 1) throw InvalidArgument("k-means needs K >= 1");
  if (n < k) throw InvalidArgument("k-means needs at least K points (N = " + std::to_string(n) + ", K = " +
                                   std::to_string(k) + ")");
  if (!points.allFinite()) throw InvalidArgument("k-means input is not finite");
  Rng rng(seed);

  // k-means++
  Eigen::MatrixXd centers(k, points.cols());
  centers.row(0) = points.row(static_cast<Eigen::Index>(rng.index(n)));
  Eigen::VectorXd d2 = (points.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (pick = 0; pick < n - 1; ++pick) {
        u -= d2(pick);
        if (u < 0.0) break;
      }
      while (d2(pick) == 0.0 && pick > 0) --pick;
    } else {
      pick = static_cast<Eigen::Index>(rng.index(n));
    }
    centers.row(c) = points.row(pick);
    d2 = d2.cwiseMin((points.rowwise() - centers.row(c)).rowwise().squaredNorm());
  }

  KMeansResult res;
  res.discretization.seed = seed;
  double prev = std::numeric_limits<double>::infinity();
  std::vector<int> labels;
  int it = 0;
  for (it = 1; it <= options.max_iterations; ++it) {
    Discretization tmp{centers};
    labels = tmp.assign(points);
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, points.cols());
    Eigen::VectorXi counts = Eigen::VectorXi::Zero(k);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(labels[i]) += points.row(i);
      ++counts(labels[i]);
    }
    for (int c = 0; c < k; ++c) {
      if (counts(c) > 0) {
        centers.row(c) = sums.row(c) / counts(c);
      } else {
        // re-seed from the point farthest from its center
        Eigen::Index far = 0;
        double best = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double d = (points.row(i) - centers.row(labels[i])).squaredNorm();
          if (d > best) {
            best = d;
            far = i;
          }
        }
        centers.row(c) = points.row(far);
        labels[far] = c;
      }
    }
    const double cur = inertia(points, centers, labels);
    const bool done = std::isfinite(prev) && std::abs(prev - cur) <= options.tolerance * std::max(prev, 1e-300);
    prev = cur;
    if (done || cur == 0.0) break;
  }
  res.discretization.centers = centers;
  res.labels = res.discretization.assign(points);
  res.discretization.inertia = inertia(points, centers, res.labels);
  res.discretization.iterations = std::min(it, options.max_iterations);
  return res;
}

// --- transition matrices --------------------------------------------------------------

int TransitionMatrix::active_index(int state) const {
  auto it = std::lower_bound(active.begin(), active.end(), state);
  return (it != active.end() && *it == state) ? static_cast<int>(it - active.begin()) : -1;
}

TransitionMatrix count_transition_matrix(std::span<const std::vector<int>> label_sequences, int n_states,
                                         int lag_steps) {
  if (lag_steps < 1) throw InvalidArgument("MSM lag must be >= 1");
  if (n_states < 1) throw InvalidArgument("MSM needs at least one state");
  TransitionMatrix T;
  T.lag_steps = lag_steps;
  T.counts = Eigen::MatrixXi::Zero(n_states, n_states);
  for (const auto& seq : label_sequences) {
    if (static_cast<int>(seq.size()) <= lag_steps)
      throw InvalidArgument("label sequence of length " + std::to_string(seq.size()) + " is not longer than the lag");
    for (std::size_t k = 0; k + lag_steps < seq.size(); ++k) {
      const int i = seq[k], j = seq[k + lag_steps];
      if (i < 0 || i >= n_states || j < 0 || j >= n_states) throw InvalidArgument("label out of range");
      ++T.counts(i, j);
    }
  }
  // Drop states with no outgoing counts into the retained set until stable.
  std::vector<bool> keep(n_states, true);
  bool changed = true;
  while (changed) {
    changed = false;
    for (int i = 0; i < n_states; ++i) {
      if (!keep[i]) continue;
      long long out = 0;
      for (int j = 0; j < n_states; ++j)
        if (keep[j]) out += T.counts(i, j);
      if (out == 0) {
        keep[i] = false;
        changed = true;
      }
    }
  }
  for (int i = 0; i < n_states; ++i) (keep[i] ? T.active : T.excluded).push_back(i);
  if (T.active.empty()) {
    std::ostringstream ss;
    ss << "no state has outgoing transitions; unreachable states:";
    for (int i : T.excluded) ss << ' ' << i;
    throw InvalidArgument(ss.str());
  }
  const auto m = static_cast<Eigen::Index>(T.active.size());
  T.P.resize(m, m);
  for (Eigen::Index a = 0; a < m; ++a) {
    for (Eigen::Index b = 0; b < m; ++b) T.P(a, b) = T.counts(T.active[a], T.active[b]);
    T.P.row(a) /= T.P.row(a).sum();
  }
  return T;
}

Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd& P) {
  if (P.rows() != P.cols() || P.rows() == 0) throw InvalidArgument("stationary distribution needs a square matrix");
  // Uniform start pushed through a high power of the lazy chain (I + P) / 2: converges for
  // periodic and reducible chains alike (closed classes weighted by their share of states).
  Eigen::MatrixXd Q = 0.5 * (Eigen::MatrixXd::Identity(P.rows(), P.cols()) + P);
  for (int k = 0; k < 64; ++k) {
    Eigen::MatrixXd Q2 = Q * Q;
    for (Eigen::Index i = 0; i < Q2.rows(); ++i) Q2.row(i) /= Q2.row(i).sum();
    const double change = (Q2 - Q).cwiseAbs().maxCoeff();
    Q = std::move(Q2);
    if (change < 1e-15) break;
  }
  Eigen::VectorXd pi = Q.colwise().mean().transpose();
  return pi / pi.sum();
}

// --- PCCA+ ---------------------------------------------------------------------------

namespace {

// Inner simplex algorithm: rows of the eigenvector matrix spanning the largest simplex.
std::vector<Eigen::Index> inner_simplex_vertices(const Eigen::MatrixXd& X) {
  const Eigen::Index n = X.rows(), m = X.cols();
  std::vector<Eigen::Index> idx(m, 0);
  X.rowwise().norm().maxCoeff(&idx[0]);
  Eigen::MatrixXd ortho = X.rowwise() - X.row(idx[0]);
  for (Eigen::Index k = 1; k < m; ++k) {
    double best = -1.0;
    if (k > 1) {
      const Eigen::RowVectorXd t = ortho.row(idx[k - 1]);
      ortho -= (ortho * t.transpose()) * t;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      if (std::find(idx.begin(), idx.begin() + k, i) != idx.begin() + k) continue;
      const double d = ortho.row(i).norm();
      if (d > best) {
        best = d;
        idx[k] = i;
      }
    }
    if (!(best > 0.0)) throw NumericalFailure("PCCA+: degenerate eigenvector simplex (defective eigenproblem)");
    ortho /= best;
  }
  return idx;
}

}  // namespace

PccaResult pcca_plus(const Eigen::MatrixXd& P, int n_clusters, PccaOptions options) {
  const Eigen::Index n = P.rows();
  if (P.cols() != n) throw InvalidArgument("PCCA+: matrix must be square");
  if (n_clusters < 2) throw InvalidArgument("PCCA+ needs n_clusters >= 2");
  if (n_clusters > n) throw InvalidArgument("PCCA+: more clusters than states");

  Eigen::MatrixXd vecs;
  Eigen::VectorXd vals;
  if (options.reversibilize) {
    const Eigen::VectorXd pi = stationary_distribution(P);
    if ((pi.array() <= 0.0).any()) throw InvalidArgument("PCCA+: chain is not irreducible (zero stationary weight)");
    const Eigen::VectorXd sq = pi.cwiseSqrt();
    // D^{1/2} P_rev D^{-1/2} is symmetric for P_rev = (P + D^{-1} P^T D) / 2
    const Eigen::MatrixXd S0 = sq.asDiagonal() * P * sq.cwiseInverse().asDiagonal();
    const Eigen::MatrixXd S = 0.5 * (S0 + S0.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
    if (es.info() != Eigen::Success) throw NumericalFailure("PCCA+: eigen decomposition failed");
    vals = es.eigenvalues().reverse().head(n_clusters);
    const Eigen::MatrixXd v = sq.cwiseInverse().asDiagonal() * es.eigenvectors().rowwise().reverse().leftCols(n_clusters);
    // Rotate the pi-orthonormal basis so its first column is the constant vector; this matters
    // when eigenvalue 1 is degenerate (decoupled blocks).
    const Eigen::VectorXd a = v.transpose() * pi;
    if (!(a.norm() > 0.5)) throw NumericalFailure("PCCA+: constant vector is not in the dominant eigenspace");
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(Eigen::MatrixXd(a / a.norm()));
    vecs = v * Eigen::MatrixXd(qr.householderQ());
  } else {
    Eigen::EigenSolver<Eigen::MatrixXd> es(P);
    if (es.info() != Eigen::Success) throw NumericalFailure("PCCA+: eigen decomposition failed");
    std::vector<Eigen::Index> order(n);
    std::iota(order.begin(), order.end(), 0);
    const Eigen::VectorXcd ev = es.eigenvalues();
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return ev(a).real() > ev(b).real(); });
    vals.resize(n_clusters);
    vecs.resize(n, n_clusters);
    for (int k = 0; k < n_clusters; ++k) {
      const auto lam = ev(order[k]);
      if (std::abs(lam.imag()) > options.complex_tolerance)
        throw NumericalFailure("PCCA+: dominant eigenvalue has imaginary part " + std::to_string(lam.imag()) +
                               "; try a larger lag time");
      vals(k) = lam.real();
      vecs.col(k) = es.eigenvectors().col(order[k]).real();
    }
  }
  // make the leading (stationary) vector the constant 1
  const double c0 = vecs.col(0).mean();
  if (std::abs(c0) < 1e-300) throw NumericalFailure("PCCA+: leading eigenvector is degenerate");
  vecs.col(0) /= c0;

  const auto vertices = inner_simplex_vertices(vecs);
  Eigen::MatrixXd simplex(n_clusters, n_clusters);
  for (int k = 0; k < n_clusters; ++k) simplex.row(k) = vecs.row(vertices[k]);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(simplex);
  if (!lu.isInvertible()) throw NumericalFailure("PCCA+: simplex vertex matrix is singular (defective eigenproblem)");

  PccaResult res;
  res.eigenvalues = vals;
  res.chi = (vecs * lu.inverse()).cwiseMax(0.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double s = res.chi.row(i).sum();
    if (s > 0.0)
      res.chi.row(i) /= s;
    else
      res.chi.row(i).setConstant(1.0 / n_clusters);
  }
  res.crisp.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index best;
    res.chi.row(i).maxCoeff(&best);
    res.crisp[i] = static_cast<int>(best);
  }
  return res;
}

PccaResult pcca_plus(const TransitionMatrix& T, int n_clusters, PccaOptions options) {
  return pcca_plus(T.P, n_clusters, options);
}

// --- separation ------------------------------------------------------------------------

nlohmann::json SeparationReport::to_json() const {
  nlohmann::json cl = nlohmann::json::array();
  for (const auto& c : clusters) cl.push_back({{"label", c.label}, {"count", c.count}, {"mean", c.mean}, {"std", c.std}});
  nlohmann::json j = {{"clusters", cl},
                      {"gaps", gaps},
                      {"thresholds", thresholds},
                      {"accuracy", accuracy},
                      {"pooled_std", pooled_std},
                      {"min_gap_ratio", min_gap_ratio},
                      {"merged", merged},
                      {"small_clusters", small_clusters}};
  if (merged) j["merge"] = {{"from", merged_from}, {"into", merged_into}};
  return j;
}

namespace {

SeparationReport separation_once(std::span<const double> rc, std::span<const int> labels, Eigen::Index min_size) {
  std::map<int, std::vector<double>> groups;
  for (std::size_t i = 0; i < rc.size(); ++i) groups[labels[i]].push_back(rc[i]);
  if (groups.size() < 2) throw InvalidArgument("separation needs at least two clusters");
  SeparationReport rep;
  double pooled = 0.0;
  for (const auto& [label, vals] : groups) {
    ClusterStats s;
    s.label = label;
    s.count = static_cast<Eigen::Index>(vals.size());
    s.mean = std::accumulate(vals.begin(), vals.end(), 0.0) / s.count;
    double ss = 0.0;
    for (double v : vals) ss += (v - s.mean) * (v - s.mean);
    s.std = s.count > 1 ? std::sqrt(ss / (s.count - 1)) : 0.0;
    pooled += ss;
    rep.clusters.push_back(s);
    if (s.count < min_size) rep.small_clusters.push_back(label);
  }
  const auto n = static_cast<double>(rc.size());
  const auto c = static_cast<double>(groups.size());
  rep.pooled_std = n > c ? std::sqrt(pooled / (n - c)) : 0.0;
  std::sort(rep.clusters.begin(), rep.clusters.end(), [](const auto& a, const auto& b) { return a.mean < b.mean; });
  rep.min_gap_ratio = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k + 1 < rep.clusters.size(); ++k) {
    const double gap = rep.clusters[k + 1].mean - rep.clusters[k].mean;
    rep.gaps.push_back(gap);
    rep.thresholds.push_back(0.5 * (rep.clusters[k + 1].mean + rep.clusters[k].mean));
    const double ratio = rep.pooled_std > 0.0 ? gap / rep.pooled_std : std::numeric_limits<double>::infinity();
    rep.min_gap_ratio = std::min(rep.min_gap_ratio, ratio);
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < rc.size(); ++i) {
    const auto k = static_cast<std::size_t>(std::upper_bound(rep.thresholds.begin(), rep.thresholds.end(), rc[i]) -
                                            rep.thresholds.begin());
    if (rep.clusters[k].label == labels[i]) ++correct;
  }
  rep.accuracy = static_cast<double>(correct) / n;
  return rep;
}

}  // namespace

SeparationReport rc_cluster_separation(std::span<const double> rc_values, std::span<const int> labels,
                                       SeparationOptions options) {
  if (rc_values.size() != labels.size()) throw InvalidArgument("separation: rc/label length mismatch");
  SeparationReport best = separation_once(rc_values, labels, options.min_cluster_size);
  if (!options.allow_single_merge) return best;
  std::vector<int> ids;
  for (const auto& c : best.clusters) ids.push_back(c.label);
  std::sort(ids.begin(), ids.end());
  if (ids.size() < 3) return best;
  std::vector<int> relabeled(labels.begin(), labels.end());
  for (std::size_t a = 0; a < ids.size(); ++a) {
    for (std::size_t b = a + 1; b < ids.size(); ++b) {
      for (std::size_t i = 0; i < labels.size(); ++i) relabeled[i] = labels[i] == ids[b] ? ids[a] : labels[i];
      auto rep = separation_once(rc_values, relabeled, options.min_cluster_size);
      if (rep.accuracy > best.accuracy ||
          (rep.accuracy == best.accuracy && rep.min_gap_ratio > best.min_gap_ratio)) {
        rep.merged = true;
        rep.merged_from = ids[b];
        rep.merged_into = ids[a];
        best = std::move(rep);
      }
    }
  }
  return best;
}

}  // namespace fmrc::msm
