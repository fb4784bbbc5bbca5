#include "fmrc/dynamics.hpp"

#include "fmrc/random.hpp"

#include <algorithm>
#include <numeric>
#include <thread>

namespace fmrc {

std::string to_string(PotentialKind kind) {
  switch (kind) {
    case PotentialKind::SevenWell3D: return "seven_well_3d";
    case PotentialKind::DoubleWell1D: return "double_well_1d";
    case PotentialKind::Quadratic: return "quadratic";
    case PotentialKind::Composite: return "composite";
  }
  return "unknown";
}

PotentialKind potential_kind_from_string(const std::string& name) {
  if (name == "seven_well_3d") return PotentialKind::SevenWell3D;
  if (name == "double_well_1d") return PotentialKind::DoubleWell1D;
  if (name == "quadratic") return PotentialKind::Quadratic;
  if (name == "composite") return PotentialKind::Composite;
  throw InvalidArgument("unknown potential kind '" + name + "'");
}

double PotentialSpec::parameter(const std::string& key) const {
  auto it = parameters.find(key);
  if (it == parameters.end()) throw InvalidArgument("potential " + name() + " has no parameter '" + key + "'");
  return it->second;
}

std::string PotentialSpec::name() const {
  if (kind != PotentialKind::Composite) return to_string(kind);
  std::string out = "composite(";
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += "+";
    out += parts[i].potential.name();
  }
  return out + ")";
}

PotentialSpec PotentialSpec::seven_well(double radial_stiffness, double multiplicity, double ou_stiffness) {
  PotentialSpec spec;
  spec.kind = PotentialKind::SevenWell3D;
  spec.dim = 3;
  spec.parameters = {{"radial_stiffness", radial_stiffness},
                     {"multiplicity", multiplicity},
                     {"ou_stiffness", ou_stiffness}};
  return spec;
}

PotentialSpec PotentialSpec::double_well(double barrier) {
  PotentialSpec spec;
  spec.kind = PotentialKind::DoubleWell1D;
  spec.dim = 1;
  spec.parameters = {{"barrier", barrier}};
  return spec;
}

PotentialSpec PotentialSpec::quadratic(int dim, double stiffness) {
  PotentialSpec spec;
  spec.kind = PotentialKind::Quadratic;
  spec.dim = dim;
  spec.parameters = {{"stiffness", stiffness}};
  return spec;
}

PotentialSpec PotentialSpec::double_well_toy(double barrier, double fast_stiffness) {
  PotentialSpec spec;
  spec.kind = PotentialKind::Composite;
  spec.dim = 2;
  spec.parts.push_back({double_well(barrier), {0}});
  spec.parts.push_back({quadratic(1, fast_stiffness), {1}});
  return spec;
}

void SdeConfig::validate() const {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw InvalidArgument("sde dt must be positive and finite");
  if (!(beta > 0.0)) throw InvalidArgument("sde beta must be positive");
  if (burn_in < 0) throw InvalidArgument("sde burn_in must be non-negative");
  if (n_steps <= burn_in) throw InvalidArgument("sde n_steps must exceed burn_in");
  if (n_steps - burn_in < 2) throw InvalidArgument("sde run must keep at least two states");
  if (!(blowup_cap > 0.0)) throw InvalidArgument("sde blowup_cap must be positive");
}

Trajectory euler_maruyama_simulate(const PotentialSpec& spec, const SdeConfig& cfg, const Eigen::VectorXd& x0) {
  cfg.validate();
  if (x0.size() != spec.dim)
    throw InvalidArgument("initial state has dimension " + std::to_string(x0.size()) + ", potential expects " +
                          std::to_string(spec.dim));
  if (!x0.allFinite()) throw InvalidArgument("initial state is not finite");

  const double amplitude = std::isinf(cfg.beta) ? 0.0 : std::sqrt(2.0 * cfg.dt / cfg.beta);
  Rng rng(cfg.seed);

  Trajectory traj;
  traj.dt = cfg.dt;
  traj.origin.seed = cfg.seed;
  traj.origin.potential = spec.name();
  traj.points.resize(cfg.n_steps - cfg.burn_in, spec.dim);

  Eigen::VectorXd x = x0;
  Eigen::VectorXd noise(spec.dim);
  for (std::int64_t k = 0; k < cfg.n_steps; ++k) {
    if (k >= cfg.burn_in) traj.points.row(k - cfg.burn_in) = x.transpose();
    if (k + 1 == cfg.n_steps) break;
    const auto pv = evaluate_potential(spec, x);
    for (int i = 0; i < spec.dim; ++i) noise(i) = rng.normal();
    x += -pv.gradient * cfg.dt + amplitude * noise;
    if (!x.allFinite() || x.cwiseAbs().maxCoeff() > cfg.blowup_cap)
      throw BlowUp(k + 1, "a coordinate exceeded the cap " + std::to_string(cfg.blowup_cap));
  }
  return traj;
}

std::vector<Trajectory> simulate_ensemble(const PotentialSpec& spec, const SdeConfig& cfg,
                                          const std::vector<Eigen::VectorXd>& initial_states, int max_threads) {
  const std::size_t n = initial_states.size();
  std::vector<Trajectory> out(n);
  std::vector<std::exception_ptr> errors(n);
  auto run_one = [&](std::size_t i) {
    try {
      SdeConfig c = cfg;
      c.seed = cfg.seed + i;
      out[i] = euler_maruyama_simulate(spec, c, initial_states[i]);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(max_threads, 1)), 1, n ? n : 1);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) run_one(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += workers) run_one(i);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::vector<Eigen::VectorXd> default_initial_states(const PotentialSpec& spec, int count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Eigen::VectorXd> out;
  for (int i = 0; i < count; ++i) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(spec.dim);
    if (spec.kind == PotentialKind::SevenWell3D) {
      const double angle = 2.0 * std::numbers::pi * rng.uniform();
      x(0) = std::cos(angle);
      x(1) = std::sin(angle);
    } else if (spec.kind == PotentialKind::Composite || spec.kind == PotentialKind::DoubleWell1D) {
      x(0) = rng.uniform() < 0.5 ? -1.0 : 1.0;
    }
    out.push_back(std::move(x));
  }
  return out;
}

// --- Swiss roll -------------------------------------------------------------

void SwissRollMap::validate() const {
  if (!(angle_scale > 0.0) || !(thickness_scale > 0.0)) throw InvalidArgument("swiss roll scales must be positive");
  if (!(angle_scale * max_x1 < std::numbers::pi))
    throw InvalidArgument("swiss roll angular span must stay below one turn");
  if (!(angle_offset - angle_scale * max_x1 - thickness_scale * max_x3 > 0.0))
    throw InvalidArgument("swiss roll radius must stay positive on the declared box");
}

bool SwissRollMap::in_domain(double x1, double x3) const {
  return std::abs(x1) <= max_x1 && std::abs(x3) <= max_x3;
}

Eigen::Vector3d SwissRollMap::forward(const Eigen::Vector3d& x) const {
  if (!x.allFinite() || !in_domain(x(0), x(2)))
    throw InvalidArgument("swiss roll forward: point outside the injectivity box");
  const double t = angle_offset + angle_scale * x(0);
  const double rho = t + thickness_scale * x(2);
  return {rho * std::cos(t), x(1), rho * std::sin(t)};
}

Eigen::Vector3d SwissRollMap::inverse(const Eigen::Vector3d& y) const {
  const double rho = std::hypot(y(0), y(2));
  if (!y.allFinite() || rho == 0.0) throw NotInImage("swiss roll inverse: point is not in the image");
  const double phi = std::atan2(y(2), y(0));
  const double t = angle_offset + std::remainder(phi - angle_offset, 2.0 * std::numbers::pi);
  const Eigen::Vector3d x((t - angle_offset) / angle_scale, y(1), (rho - t) / thickness_scale);
  if (!in_domain(x(0), x(2))) throw NotInImage("swiss roll inverse: preimage lies outside the injectivity box");
  return x;
}

Eigen::Matrix3d SwissRollMap::jacobian(const Eigen::Vector3d& x) const {
  const double t = angle_offset + angle_scale * x(0);
  const double rho = t + thickness_scale * x(2);
  const double c = std::cos(t), s = std::sin(t);
  Eigen::Matrix3d j;
  j << angle_scale * (c - rho * s), 0.0, thickness_scale * c,  //
      0.0, 1.0, 0.0,                                            //
      angle_scale * (s + rho * c), 0.0, thickness_scale * s;
  return j;
}

double SwissRollMap::jacobian_determinant(const Eigen::Vector3d& x) const {
  const double t = angle_offset + angle_scale * x(0);
  return -angle_scale * thickness_scale * (t + thickness_scale * x(2));
}

Eigen::MatrixXd SwissRollMap::forward_rows(const Eigen::MatrixXd& points) const {
  if (points.cols() != 3) throw InvalidArgument("swiss roll acts on 3-D points");
  Eigen::MatrixXd out(points.rows(), 3);
  for (Eigen::Index i = 0; i < points.rows(); ++i) out.row(i) = forward(points.row(i).transpose()).transpose();
  return out;
}

Eigen::MatrixXd SwissRollMap::inverse_rows(const Eigen::MatrixXd& points) const {
  if (points.cols() != 3) throw InvalidArgument("swiss roll acts on 3-D points");
  Eigen::MatrixXd out(points.rows(), 3);
  for (Eigen::Index i = 0; i < points.rows(); ++i) out.row(i) = inverse(points.row(i).transpose()).transpose();
  return out;
}

Eigen::Vector3d swiss_roll_forward(const SwissRollMap& map, const Eigen::Vector3d& x) { return map.forward(x); }
Eigen::Vector3d swiss_roll_inverse(const SwissRollMap& map, const Eigen::Vector3d& y) { return map.inverse(y); }

Trajectory apply_swiss_roll(const SwissRollMap& map, const Trajectory& traj) {
  Trajectory out = traj;
  out.points = map.forward_rows(traj.points);
  out.origin.transform = "swiss_roll";
  return out;
}

// --- pairs -------------------------------------------------------------------

Standardizer Standardizer::identity(int dim) {
  return {Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Ones(dim)};
}

Standardizer Standardizer::fit(const Eigen::MatrixXd& rows) {
  if (rows.rows() == 0) throw InvalidArgument("cannot standardize an empty set");
  Standardizer s;
  s.mean = rows.colwise().mean().transpose();
  s.std = ((rows.rowwise() - s.mean.transpose()).array().square().colwise().mean()).sqrt().transpose();
  for (Eigen::Index i = 0; i < s.std.size(); ++i)
    if (!(s.std(i) > 0.0)) s.std(i) = 1.0;
  return s;
}

Eigen::MatrixXd Standardizer::apply(const Eigen::MatrixXd& rows) const {
  if (rows.cols() != mean.size()) throw InvalidArgument("standardizer width mismatch");
  return ((rows.rowwise() - mean.transpose()).array().rowwise() / std.transpose().array()).matrix();
}

Eigen::MatrixXd Standardizer::invert(const Eigen::MatrixXd& rows) const {
  if (rows.cols() != mean.size()) throw InvalidArgument("standardizer width mismatch");
  return ((rows.array().rowwise() * std.transpose().array()).rowwise() + mean.transpose().array()).matrix();
}

Standardizer joint_standardizer(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  Eigen::MatrixXd both(x.rows() + y.rows(), x.cols());
  both << x, y;
  return Standardizer::fit(both);
}

void TransitionPairSet::validate() const {
  if (lag_steps < 1) throw InvalidArgument("pair set lag must be >= 1");
  if (x.rows() != y.rows() || x.rows() < 1) throw InvalidArgument("pair set must hold N >= 1 matched pairs");
  if (x.cols() != dim || y.cols() != dim) throw InvalidArgument("pair set width mismatch");
  if (normalization.dim() != dim || (normalization.std.array() <= 0.0).any())
    throw InvalidArgument("pair set standardization is not invertible");
}

TransitionPairSet extract_pairs(const Trajectory& traj, int lag_steps) {
  return extract_pairs(std::span<const Trajectory>(&traj, 1), lag_steps);
}

TransitionPairSet extract_pairs(std::span<const Trajectory> trajs, int lag_steps) {
  if (lag_steps < 1) throw InvalidArgument("lag must be >= 1");
  if (trajs.empty()) throw InvalidArgument("no trajectories given");
  const int dim = trajs.front().dim();
  Eigen::Index total = 0;
  for (const auto& t : trajs) {
    if (t.dim() != dim) throw InvalidArgument("trajectories differ in dimension");
    if (lag_steps >= t.length())
      throw InvalidArgument("lag " + std::to_string(lag_steps) + " is not shorter than trajectory length " +
                            std::to_string(t.length()));
    total += t.length() - lag_steps;
  }
  TransitionPairSet out;
  out.dim = dim;
  out.lag_steps = lag_steps;
  out.x.resize(total, dim);
  out.y.resize(total, dim);
  Eigen::Index row = 0;
  for (const auto& t : trajs) {
    const Eigen::Index n = t.length() - lag_steps;
    out.x.middleRows(row, n) = t.points.topRows(n);
    out.y.middleRows(row, n) = t.points.bottomRows(n);
    row += n;
  }
  out.normalization = joint_standardizer(out.x, out.y);
  return out;
}

TransitionPairSet subsample_pairs(const TransitionPairSet& pairs, Eigen::Index max_pairs, std::uint64_t seed) {
  if (max_pairs < 1) throw InvalidArgument("max_pairs must be >= 1");
  if (pairs.size() <= max_pairs) return pairs;
  std::vector<Eigen::Index> idx(pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  // partial Fisher-Yates
  for (Eigen::Index i = 0; i < max_pairs; ++i) {
    const auto j = i + static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(pairs.size() - i)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(max_pairs);
  std::sort(idx.begin(), idx.end());
  TransitionPairSet out;
  out.dim = pairs.dim;
  out.lag_steps = pairs.lag_steps;
  out.x = pairs.x(idx, Eigen::all);
  out.y = pairs.y(idx, Eigen::all);
  out.normalization = joint_standardizer(out.x, out.y);
  return out;
}

}  // namespace fmrc
