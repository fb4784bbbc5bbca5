#pragma once

#include "fmrc/errors.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

namespace fmrc {

enum class PotentialKind { SevenWell3D, DoubleWell1D, Quadratic, Composite };

std::string to_string(PotentialKind kind);
PotentialKind potential_kind_from_string(const std::string& name);

// A potential energy V: R^D -> R.
//
//   SevenWell3D   V = cos(m * atan2(x2, x1)) + k_r (|(x1,x2)| - 1)^2 + k_ou x3^2
//                 parameters: multiplicity m (7), radial_stiffness k_r (10), ou_stiffness k_ou (10)
//   DoubleWell1D  V = h (x^2 - 1)^2, parameter barrier h
//   Quadratic     V = k * sum_i x_i^2, parameter stiffness k, any dimension
//   Composite     sum of parts, each acting on a subset of coordinates
struct PotentialSpec {
  struct Part;

  PotentialKind kind = PotentialKind::SevenWell3D;
  int dim = 3;
  std::map<std::string, double> parameters;
  std::vector<Part> parts;

  double parameter(const std::string& key) const;
  std::string name() const;

  static PotentialSpec seven_well(double radial_stiffness = 10.0, double multiplicity = 7.0,
                                  double ou_stiffness = 10.0);
  static PotentialSpec double_well(double barrier);
  static PotentialSpec quadratic(int dim, double stiffness);
  // Slow double well on x1, independent fast OU on x2.
  static PotentialSpec double_well_toy(double barrier = 3.0, double fast_stiffness = 20.0);
};

struct PotentialSpec::Part {
  PotentialSpec potential;
  std::vector<int> coordinates;
};

template <typename Scalar>
struct PotentialValue {
  Scalar value;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> gradient;
};

namespace detail {

template <typename Scalar>
void accumulate_potential(const PotentialSpec& spec, const Scalar* x, Scalar& value, Scalar* grad) {
  using std::atan2;
  using std::cos;
  using std::sin;
  using std::sqrt;
  switch (spec.kind) {
    case PotentialKind::SevenWell3D: {
      const Scalar m = spec.parameter("multiplicity");
      const Scalar kr = spec.parameter("radial_stiffness");
      const Scalar kou = spec.parameter("ou_stiffness");
      const Scalar r2 = x[0] * x[0] + x[1] * x[1];
      if (r2 == Scalar(0)) throw SingularPoint("seven-well potential is singular at x1 = x2 = 0");
      const Scalar r = sqrt(r2);
      const Scalar theta = atan2(x[1], x[0]);
      value += cos(m * theta) + kr * (r - 1) * (r - 1) + kou * x[2] * x[2];
      // d/dx cos(m theta) = -m sin(m theta) * dtheta/dx, dtheta/dx = (-x2, x1) / r^2
      const Scalar ang = -m * sin(m * theta) / r2;
      const Scalar rad = Scalar(2) * kr * (r - 1) / r;
      grad[0] += ang * (-x[1]) + rad * x[0];
      grad[1] += ang * x[0] + rad * x[1];
      grad[2] += Scalar(2) * kou * x[2];
      break;
    }
    case PotentialKind::DoubleWell1D: {
      const Scalar h = spec.parameter("barrier");
      const Scalar q = x[0] * x[0] - 1;
      value += h * q * q;
      grad[0] += Scalar(4) * h * q * x[0];
      break;
    }
    case PotentialKind::Quadratic: {
      const Scalar k = spec.parameter("stiffness");
      for (int i = 0; i < spec.dim; ++i) {
        value += k * x[i] * x[i];
        grad[i] += Scalar(2) * k * x[i];
      }
      break;
    }
    case PotentialKind::Composite: {
      for (const auto& part : spec.parts) {
        const int n = static_cast<int>(part.coordinates.size());
        Scalar sub_x[8];
        Scalar sub_g[8] = {};
        for (int i = 0; i < n; ++i) sub_x[i] = x[part.coordinates[i]];
        accumulate_potential(part.potential, sub_x, value, sub_g);
        for (int i = 0; i < n; ++i) grad[part.coordinates[i]] += sub_g[i];
      }
      break;
    }
  }
}

}  // namespace detail

// Value and analytic gradient of the potential at a single point.
template <typename Derived>
PotentialValue<typename Derived::Scalar> evaluate_potential(const PotentialSpec& spec,
                                                            const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if (x.size() != spec.dim)
    throw InvalidArgument("potential " + spec.name() + " expects dimension " + std::to_string(spec.dim) +
                          ", got " + std::to_string(x.size()));
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> xv = x;
  if (!xv.allFinite()) throw InvalidArgument("potential evaluated at a non-finite point");
  PotentialValue<Scalar> out{Scalar(0), Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(spec.dim)};
  detail::accumulate_potential(spec, xv.data(), out.value, out.gradient.data());
  return out;
}

struct SdeConfig {
  double dt = 0.001;
  // Inverse temperature; +infinity switches the noise off.
  double beta = 1.0;
  std::int64_t n_steps = 100000;
  std::int64_t burn_in = 1000;
  std::uint64_t seed = 0;
  double blowup_cap = 1e6;

  void validate() const;
};

struct TrajectoryOrigin {
  std::uint64_t seed = 0;
  std::string potential;
  std::string transform = "none";
};

// Time-ordered states, one per row.
struct Trajectory {
  Eigen::MatrixXd points;
  double dt = 0.0;
  TrajectoryOrigin origin;

  Eigen::Index length() const { return points.rows(); }
  int dim() const { return static_cast<int>(points.cols()); }
};

// Overdamped Langevin dynamics dX = -grad V dt + sqrt(2/beta) dW, Euler-Maruyama.
// The chain starts at x0 and has n_steps states; the first burn_in are dropped.
Trajectory euler_maruyama_simulate(const PotentialSpec& spec, const SdeConfig& cfg, const Eigen::VectorXd& x0);

// Independent trajectories with seeds cfg.seed + i, run on up to max_threads threads.
std::vector<Trajectory> simulate_ensemble(const PotentialSpec& spec, const SdeConfig& cfg,
                                          const std::vector<Eigen::VectorXd>& initial_states, int max_threads = 1);

// Starting points on the unit ring (x3 = 0), or at a random well of the toy double well.
std::vector<Eigen::VectorXd> default_initial_states(const PotentialSpec& spec, int count, std::uint64_t seed);

// t = a + b x1, rho = t + gamma x3, y = (rho cos t, x2, rho sin t).
struct SwissRollMap {
  double angle_offset = 1.5 * std::numbers::pi;
  double angle_scale = 0.375 * std::numbers::pi;
  double thickness_scale = 1.0;
  // Injectivity box |x1| <= max_x1, |x3| <= max_x3.
  double max_x1 = 2.5;
  double max_x3 = 1.5;

  void validate() const;
  bool in_domain(double x1, double x3) const;

  Eigen::Vector3d forward(const Eigen::Vector3d& x) const;
  Eigen::Vector3d inverse(const Eigen::Vector3d& y) const;
  Eigen::Matrix3d jacobian(const Eigen::Vector3d& x) const;
  // Closed form: -b * gamma * rho.
  double jacobian_determinant(const Eigen::Vector3d& x) const;

  Eigen::MatrixXd forward_rows(const Eigen::MatrixXd& points) const;
  Eigen::MatrixXd inverse_rows(const Eigen::MatrixXd& points) const;
};

Eigen::Vector3d swiss_roll_forward(const SwissRollMap& map, const Eigen::Vector3d& x);
Eigen::Vector3d swiss_roll_inverse(const SwissRollMap& map, const Eigen::Vector3d& y);

Trajectory apply_swiss_roll(const SwissRollMap& map, const Trajectory& traj);

// Per-coordinate affine standardization z = (x - mean) / std.
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  static Standardizer identity(int dim);
  static Standardizer fit(const Eigen::MatrixXd& rows);

  int dim() const { return static_cast<int>(mean.size()); }
  Eigen::MatrixXd apply(const Eigen::MatrixXd& rows) const;
  Eigen::MatrixXd invert(const Eigen::MatrixXd& rows) const;
};

// Lag-tau transition pairs (x_n, y_n), stored in physical units.
struct TransitionPairSet {
  int dim = 0;
  int lag_steps = 1;
  Eigen::MatrixXd x;
  Eigen::MatrixXd y;
  Standardizer normalization;

  Eigen::Index size() const { return x.rows(); }
  void validate() const;
};

TransitionPairSet extract_pairs(const Trajectory& traj, int lag_steps);
// Concatenates per-trajectory pair lists; no pair spans two trajectories.
TransitionPairSet extract_pairs(std::span<const Trajectory> trajs, int lag_steps);
// Uniform subsample without replacement (original order kept); statistics recomputed.
TransitionPairSet subsample_pairs(const TransitionPairSet& pairs, Eigen::Index max_pairs, std::uint64_t seed);

Standardizer joint_standardizer(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

}  // namespace fmrc
