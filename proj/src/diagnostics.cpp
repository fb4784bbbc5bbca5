#include "fmrc/diagnostics.hpp"

#include "fmrc/io.hpp"
#include "fmrc/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace fmrc::diag {

int DiscreteChain::n_blocks() const {
  return lump_map.empty() ? 0 : *std::max_element(lump_map.begin(), lump_map.end()) + 1;
}

void DiscreteChain::validate() const {
  const Eigen::Index n = P.rows();
  if (n < 1 || P.cols() != n) throw InvalidArgument("chain matrix must be square and nonempty");
  if ((P.array() < 0.0).any()) throw InvalidArgument("chain matrix has negative entries");
  if (((P.rowwise().sum().array() - 1.0).abs() > 1e-12).any()) throw InvalidArgument("chain rows must sum to 1");
  if (rho0.size() != n || (rho0.array() < 0.0).any() || std::abs(rho0.sum() - 1.0) > 1e-12)
    throw InvalidArgument("rho0 must be a probability vector over the states");
  if (static_cast<Eigen::Index>(lump_map.size()) != n) throw InvalidArgument("lump map must cover every state");
  const int m = n_blocks();
  std::vector<bool> hit(m, false);
  for (int b : lump_map) {
    if (b < 0) throw InvalidArgument("lump map ids must be non-negative");
    hit[b] = true;
  }
  if (std::find(hit.begin(), hit.end(), false) != hit.end())
    throw InvalidArgument("lump map must be surjective onto 0..m-1");
}

Eigen::VectorXd DiscreteChain::rho1() const { return P.transpose() * rho0; }

Eigen::MatrixXd DiscreteChain::backward_matrix() const {
  const Eigen::VectorXd r1 = rho1();
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(P.rows(), P.cols());
  for (Eigen::Index j = 0; j < P.cols(); ++j)
    if (r1(j) > 0.0)
      for (Eigen::Index i = 0; i < P.rows(); ++i) B(j, i) = rho0(i) * P(i, j) / r1(j);
  return B;
}

namespace {

double max_within_block_tv(const Eigen::MatrixXd& rows, const std::vector<int>& lump_map,
                           const std::vector<bool>& include) {
  double worst = 0.0;
  const auto n = static_cast<Eigen::Index>(lump_map.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!include[i]) continue;
    for (Eigen::Index k = i + 1; k < n; ++k)
      if (include[k] && lump_map[i] == lump_map[k])
        worst = std::max(worst, 0.5 * (rows.row(i) - rows.row(k)).cwiseAbs().sum());
  }
  return worst;
}

}  // namespace

double lumpability_residual(const DiscreteChain& chain) {
  chain.validate();
  return max_within_block_tv(chain.P, chain.lump_map, std::vector<bool>(chain.n_states(), true));
}

double decomposability_residual(const DiscreteChain& chain) {
  chain.validate();
  const Eigen::VectorXd r1 = chain.rho1();
  // visited = reachable under rho0 in one lag, or carrying initial mass
  std::vector<bool> visited(chain.n_states());
  for (int j = 0; j < chain.n_states(); ++j) {
    visited[j] = r1(j) > 0.0 || chain.rho0(j) > 0.0;
    if (chain.rho0(j) > 0.0 && !(r1(j) > 0.0))
      throw InvalidArgument("rho1 vanishes on visited state " + std::to_string(j));
  }
  return max_within_block_tv(chain.backward_matrix(), chain.lump_map, visited);
}

ReducedOperators reduced_operators(const DiscreteChain& chain) {
  chain.validate();
  const int n = chain.n_states(), m = chain.n_blocks();
  const Eigen::VectorXd r1 = chain.rho1();
  const Eigen::MatrixXd B = chain.backward_matrix();
  Eigen::MatrixXd fwd = Eigen::MatrixXd::Zero(m, n), bwd = Eigen::MatrixXd::Zero(m, n);
  Eigen::VectorXd w0 = Eigen::VectorXd::Zero(m), w1 = Eigen::VectorXd::Zero(m);
  for (int i = 0; i < n; ++i) {
    const int b = chain.lump_map[i];
    fwd.row(b) += chain.rho0(i) * chain.P.row(i);
    bwd.row(b) += r1(i) * B.row(i);
    w0(b) += chain.rho0(i);
    w1(b) += r1(i);
  }
  for (int b = 0; b < m; ++b) {
    if (!(w0(b) > 0.0)) throw InvalidArgument("block " + std::to_string(b) + " carries no rho0 mass");
    fwd.row(b) /= w0(b);
    if (w1(b) > 0.0) bwd.row(b) /= w1(b);
  }
  ReducedOperators out{Eigen::MatrixXd(n, n), Eigen::MatrixXd(n, n)};
  for (int i = 0; i < n; ++i) {
    out.koopman_lumped.row(i) = fwd.row(chain.lump_map[i]);
    out.transfer_decomposed.row(i) = bwd.row(chain.lump_map[i]);
  }
  return out;
}

// --- Wasserstein -------------------------------------------------------------------------

std::vector<int> solve_assignment(const Eigen::MatrixXd& cost) {
  // Shortest augmenting path with potentials (Hungarian method), 1-based internals.
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw InvalidArgument("assignment needs a square cost matrix");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> match(n);
  for (int j = 1; j <= n; ++j) match[p[j] - 1] = j - 1;
  return match;
}

namespace {

// W2^2 between two 1-D empirical measures of possibly different sizes (quantile coupling).
double w2_squared_1d(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double t = 0.0, acc = 0.0;
  while (i < a.size() && j < b.size()) {
    const double next = std::min((i + 1) / na, (j + 1) / nb);
    acc += (next - t) * (a[i] - b[j]) * (a[i] - b[j]);
    t = next;
    if ((i + 1) / na <= next) ++i;
    if ((j + 1) / nb <= next) ++j;
  }
  return acc;
}

}  // namespace

double empirical_w2(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, W2Options options) {
  if (a.cols() != b.cols()) throw InvalidArgument("W2: sample widths differ");
  if (a.rows() < 1 || b.rows() < 1) throw InvalidArgument("W2: empty sample set");
  if (options.mode == W2Mode::Exact) {
    if (a.rows() != b.rows()) throw InvalidArgument("exact W2 needs equal sample counts");
    if (a.rows() > kExactW2Cap) throw InvalidArgument("exact W2 is capped at 2048 samples; use sliced mode");
    const Eigen::Index n = a.rows();
    const Eigen::MatrixXd cost = ((-2.0 * a * b.transpose()).colwise() + a.rowwise().squaredNorm()).rowwise() +
                                 b.rowwise().squaredNorm().transpose();
    const auto match = solve_assignment(cost);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) acc += (a.row(i) - b.row(match[i])).squaredNorm();
    return std::sqrt(acc / static_cast<double>(n));
  }
  if (options.n_projections < 1) throw InvalidArgument("sliced W2 needs at least one projection");
  Rng rng(options.seed);
  double acc = 0.0;
  for (int p = 0; p < options.n_projections; ++p) {
    Eigen::VectorXd dir = rng.normal_matrix(a.cols(), 1);
    dir /= dir.norm();
    const Eigen::VectorXd pa = a * dir, pb = b * dir;
    acc += w2_squared_1d({pa.data(), pa.data() + pa.size()}, {pb.data(), pb.data() + pb.size()});
  }
  return std::sqrt(acc / options.n_projections);
}

// --- weak operator error ---------------------------------------------------------------

double h1_norm(const TestFunction& f, const Eigen::MatrixXd& rho_samples, const Eigen::VectorXd& fd_step) {
  const Eigen::VectorXd v = f(rho_samples);
  double acc = v.squaredNorm();
  for (Eigen::Index d = 0; d < rho_samples.cols(); ++d) {
    Eigen::MatrixXd up = rho_samples, down = rho_samples;
    up.col(d).array() += fd_step(d);
    down.col(d).array() -= fd_step(d);
    acc += ((f(up) - f(down)) / (2.0 * fd_step(d))).squaredNorm();
  }
  return std::sqrt(acc / static_cast<double>(rho_samples.rows()));
}

namespace {

struct Grid {
  Eigen::VectorXd lo, spacing;
  int bins = 0;
  int dim = 0;

  Grid(const Eigen::MatrixXd& support, int bins_per_dim) : bins(bins_per_dim), dim(static_cast<int>(support.cols())) {
    lo = support.colwise().minCoeff().transpose();
    const Eigen::VectorXd hi = support.colwise().maxCoeff().transpose();
    spacing = ((hi - lo) / bins).cwiseMax(1e-12);
  }

  Eigen::Index node_count() const { return static_cast<Eigen::Index>(std::pow(bins, dim)); }

  Eigen::VectorXd node(Eigen::Index flat) const {
    Eigen::VectorXd c(dim);
    for (int d = 0; d < dim; ++d) {
      c(d) = lo(d) + (static_cast<double>(flat % bins) + 0.5) * spacing(d);
      flat /= bins;
    }
    return c;
  }

  Eigen::Index cell(const Eigen::RowVectorXd& x) const {
    Eigen::Index flat = 0, stride = 1;
    for (int d = 0; d < dim; ++d) {
      auto i = static_cast<Eigen::Index>(std::floor((x(d) - lo(d)) / spacing(d)));
      i = std::clamp<Eigen::Index>(i, 0, bins - 1);
      flat += i * stride;
      stride *= bins;
    }
    return flat;
  }
};

// Greedy farthest-point order starting from the node nearest the box center.
std::vector<Eigen::Index> coarse_to_fine(const Grid& grid) {
  const Eigen::Index n = grid.node_count();
  Eigen::MatrixXd nodes(n, grid.dim);
  for (Eigen::Index i = 0; i < n; ++i) nodes.row(i) = grid.node(i).cwiseQuotient(grid.spacing).transpose();
  const Eigen::RowVectorXd center = nodes.colwise().mean();
  std::vector<Eigen::Index> order;
  Eigen::Index first;
  (nodes.rowwise() - center).rowwise().squaredNorm().minCoeff(&first);
  order.push_back(first);
  Eigen::VectorXd dist = (nodes.rowwise() - nodes.row(first)).rowwise().squaredNorm();
  while (static_cast<Eigen::Index>(order.size()) < n) {
    Eigen::Index next;
    dist.maxCoeff(&next);
    order.push_back(next);
    dist = dist.cwiseMin((nodes.rowwise() - nodes.row(next)).rowwise().squaredNorm());
  }
  return order;
}

}  // namespace

std::vector<TestFunction> gaussian_dictionary(const Eigen::MatrixXd& support, const Eigen::MatrixXd& rho_samples,
                                              const GridSpec& grid_spec) {
  if (grid_spec.bins_per_dim < 1 || grid_spec.dictionary_size < 1) throw InvalidArgument("bad dictionary grid");
  if (support.rows() < 1 || rho_samples.cols() != support.cols()) throw InvalidArgument("dictionary support mismatch");
  const Grid grid(support, grid_spec.bins_per_dim);
  if (grid_spec.dictionary_size > grid.node_count())
    throw InvalidArgument("dictionary size exceeds the number of grid nodes");
  const auto order = coarse_to_fine(grid);
  const Eigen::VectorXd width = grid_spec.bandwidth_factor * grid.spacing;
  const Eigen::VectorXd fd_step = 0.5 * grid.spacing;
  std::vector<TestFunction> dict;
  for (int k = 0; k < grid_spec.dictionary_size; ++k) {
    const Eigen::RowVectorXd c = grid.node(order[k]).transpose();
    TestFunction raw = [c, width](const Eigen::MatrixXd& x) -> Eigen::VectorXd {
      const Eigen::ArrayXXd z = (x.rowwise() - c).array().rowwise() / width.transpose().array();
      return (-0.5 * z.square().rowwise().sum()).exp().matrix();
    };
    const double norm = h1_norm(raw, rho_samples, fd_step);
    const double scale = norm > 0.0 ? 1.0 / norm : 0.0;
    dict.push_back([raw, scale](const Eigen::MatrixXd& x) -> Eigen::VectorXd { return scale * raw(x); });
  }
  return dict;
}

nlohmann::json OperatorErrorReport::to_json() const {
  return {{"weak_error", weak_error},
          {"noise_floor", noise_floor},
          {"dictionary_size", dictionary_size},
          {"bins_per_dim", bins_per_dim},
          {"samples", samples},
          {"per_test_function", per_test_function},
          {"restriction", "maximum over a finite Gaussian test dictionary (lower surrogate of the operator norm)"},
          {"warnings", warnings}};
}

OperatorErrorReport weak_operator_error(const Eigen::MatrixXd& cond, const Eigen::MatrixXd& target,
                                        const Eigen::MatrixXd& generated, const std::vector<TestFunction>& g_side,
                                        const std::vector<TestFunction>& f_side) {
  const Eigen::Index n = cond.rows();
  if (n < 1 || target.rows() != n || generated.rows() != n || target.cols() != generated.cols())
    throw InvalidArgument("weak operator error: sample shapes disagree");
  if (g_side.empty() || f_side.empty()) throw InvalidArgument("weak operator error: empty dictionary");
  Eigen::MatrixXd G(n, g_side.size()), D(n, f_side.size());
  for (std::size_t j = 0; j < g_side.size(); ++j) G.col(j) = g_side[j](cond);
  for (std::size_t k = 0; k < f_side.size(); ++k) D.col(k) = f_side[k](target) - f_side[k](generated);
  const double nn = static_cast<double>(n);
  const Eigen::MatrixXd pairing = G.transpose() * D / nn;
  const Eigen::MatrixXd second = G.array().square().matrix().transpose() * D.array().square().matrix() / nn;
  const Eigen::MatrixXd se = ((second.array() - pairing.array().square()).cwiseMax(0.0) / nn).sqrt();

  OperatorErrorReport rep;
  rep.samples = n;
  rep.dictionary_size = static_cast<int>(g_side.size());
  rep.weak_error = pairing.cwiseAbs().maxCoeff();
  rep.noise_floor = se.maxCoeff();
  for (Eigen::Index j = 0; j < pairing.rows(); ++j) rep.per_test_function.push_back(pairing.row(j).cwiseAbs().maxCoeff());
  return rep;
}

OperatorErrorPair weak_operator_error(const TransitionPairSet& pairs, const flow::TrainedModels& models,
                                      const WeakErrorConfig& cfg) {
  pairs.validate();
  Eigen::MatrixXd x = pairs.x, y = pairs.y;
  if (pairs.size() > cfg.max_samples) {
    const auto sub = subsample_pairs(pairs, cfg.max_samples, derive_seed(cfg.seed, "weak-error-samples"));
    x = sub.x;
    y = sub.y;
  }
  flow::OdeSolverConfig solver = cfg.solver;
  solver.seed = derive_seed(cfg.seed, "forward-flow");
  const Eigen::MatrixXd y_hat = flow::generate(models, flow::Direction::Forward, x, solver);
  solver.seed = derive_seed(cfg.seed, "backward-flow");
  const Eigen::MatrixXd x_hat = flow::generate(models, flow::Direction::Backward, y, solver);

  Eigen::MatrixXd support(2 * x.rows(), x.cols());
  support << x, y;
  const auto dict_x = gaussian_dictionary(support, x, cfg.grid);
  const auto dict_y = gaussian_dictionary(support, y, cfg.grid);

  OperatorErrorPair out;
  out.forward = weak_operator_error(x, y, y_hat, dict_x, dict_y);
  out.backward = weak_operator_error(y, x, x_hat, dict_y, dict_x);
  for (auto* rep : {&out.forward, &out.backward}) {
    rep->bins_per_dim = cfg.grid.bins_per_dim;
  }
  // sparse-cell warning on the conditioning samples
  const Grid grid(support, cfg.grid.bins_per_dim);
  auto cell_warning = [&](const Eigen::MatrixXd& pts, OperatorErrorReport& rep) {
    std::map<Eigen::Index, int> counts;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) ++counts[grid.cell(pts.row(i))];
    int sparse = 0;
    for (const auto& [cell, c] : counts)
      if (c < 10) ++sparse;
    if (sparse > 0)
      rep.warnings.push_back(std::to_string(sparse) + " occupied grid cell(s) hold fewer than 10 samples");
  };
  cell_warning(x, out.forward);
  cell_warning(y, out.backward);

  Eigen::MatrixXd truth(x.rows(), 2 * x.cols()), gen(x.rows(), 2 * x.cols());
  truth << x, y;
  gen << x, y_hat;
  W2Options w2;
  if (truth.rows() > kExactW2Cap) {
    w2.mode = W2Mode::Sliced;
    w2.seed = derive_seed(cfg.seed, "w2");
  }
  out.w2_pairs = empirical_w2(truth, gen, w2);
  return out;
}

std::vector<SweepRow> fmrc_vs_operator_error_sweep(const TransitionPairSet& pairs, const std::vector<SweepEntry>& entries,
                                                   const WeakErrorConfig& cfg) {
  if (entries.empty()) throw InvalidArgument("sweep needs at least one snapshot");
  for (std::size_t k = 1; k < entries.size(); ++k)
    if (!(entries[k].train_loss < entries[k - 1].train_loss))
      throw InvalidArgument("sweep snapshots must be ordered by strictly decreasing training loss");
  std::vector<SweepRow> rows;
  for (const auto& e : entries) {
    if (!e.models) throw InvalidArgument("sweep entry without models");
    const auto res = weak_operator_error(pairs, *e.models, cfg);
    rows.push_back({e.budget, e.train_loss, res.forward.weak_error, res.backward.weak_error, res.w2_pairs,
                    res.forward.noise_floor, res.backward.noise_floor});
  }
  return rows;
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), 5);
  for (std::size_t i = 0; i < rows.size(); ++i)
    m.row(static_cast<Eigen::Index>(i)) << rows[i].budget, rows[i].train_loss, rows[i].weak_error_forward,
        rows[i].weak_error_backward, rows[i].w2_pairs;
  io::write_matrix_csv(path, m, {"budget", "train_loss", "weak_error_forward", "weak_error_backward", "w2_pairs"});
}

}  // namespace fmrc::diag
