#pragma once

#include "fmrc/dynamics.hpp"
#include "fmrc/errors.hpp"
#include "fmrc/flowmatch.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <vector>

namespace fmrc::diag {

// Finite-state chain with a lumping map r: {0..n-1} -> {0..m-1}.
struct DiscreteChain {
  Eigen::MatrixXd P;
  Eigen::VectorXd rho0;
  std::vector<int> lump_map;

  int n_states() const { return static_cast<int>(P.rows()); }
  int n_blocks() const;
  void validate() const;

  // rho1 = rho0^T P
  Eigen::VectorXd rho1() const;
  // B(j, i) = rho0(i) P(i, j) / rho1(j); rows with rho1(j) = 0 are left zero.
  Eigen::MatrixXd backward_matrix() const;
};

// Max total-variation distance between forward rows of states sharing a block.
double lumpability_residual(const DiscreteChain& chain);
// Same for rows of the backward matrix.
double decomposability_residual(const DiscreteChain& chain);

struct ReducedOperators {
  Eigen::MatrixXd koopman_lumped;       // K_L
  Eigen::MatrixXd transfer_decomposed;  // T_D
};

ReducedOperators reduced_operators(const DiscreteChain& chain);

enum class W2Mode { Exact, Sliced };

struct W2Options {
  W2Mode mode = W2Mode::Exact;
  int n_projections = 128;
  std::uint64_t seed = 0;
};

inline constexpr Eigen::Index kExactW2Cap = 2048;

// Empirical quadratic Wasserstein distance between two sample sets (rows).
double empirical_w2(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, W2Options options = {});

// Squared cost optimal assignment (rows -> columns), O(n^3).
std::vector<int> solve_assignment(const Eigen::MatrixXd& cost);

// Test functions evaluated rowwise on a sample matrix.
using TestFunction = std::function<Eigen::VectorXd(const Eigen::MatrixXd&)>;

struct GridSpec {
  int bins_per_dim = 5;
  int dictionary_size = 25;
  // Gaussian bandwidth in units of the grid spacing.
  double bandwidth_factor = 2.0;
};

// Tensor-product Gaussians on grid nodes spanning the bounding box of `support`, taken in a
// nested coarse-to-fine order (a smaller dictionary is a prefix of a larger one), each scaled
// to unit discrete H^1 norm under the empirical measure of `rho_samples`.
std::vector<TestFunction> gaussian_dictionary(const Eigen::MatrixXd& support, const Eigen::MatrixXd& rho_samples,
                                              const GridSpec& grid);

// Discrete H^1_rho norm: sample averages of f^2 plus central-difference |grad f|^2.
double h1_norm(const TestFunction& f, const Eigen::MatrixXd& rho_samples, const Eigen::VectorXd& fd_step);

struct OperatorErrorReport {
  double weak_error = 0.0;
  double noise_floor = 0.0;  // largest standard error among the pairings
  int dictionary_size = 0;
  int bins_per_dim = 0;
  Eigen::Index samples = 0;
  std::vector<double> per_test_function;  // max over f for each g
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

// max_{g,f} | mean g(cond_n) f(target_n) - mean g(cond_n) f(generated_n) |.
OperatorErrorReport weak_operator_error(const Eigen::MatrixXd& cond, const Eigen::MatrixXd& target,
                                        const Eigen::MatrixXd& generated, const std::vector<TestFunction>& g_side,
                                        const std::vector<TestFunction>& f_side);

struct WeakErrorConfig {
  GridSpec grid;
  flow::OdeSolverConfig solver;
  Eigen::Index max_samples = 2000;
  std::uint64_t seed = 0;
};

struct OperatorErrorPair {
  OperatorErrorReport forward;
  OperatorErrorReport backward;
  double w2_pairs = 0.0;
};

// Forward: pairings of x-side g with f(y) vs f(generated y from v0, r(x)).
// Backward: y-side g with f(x) vs f(generated x from v1, r(y)). Also W2 between the true
// joint pair sample and (x, generated y).
OperatorErrorPair weak_operator_error(const TransitionPairSet& pairs, const flow::TrainedModels& models,
                                      const WeakErrorConfig& cfg);

struct SweepEntry {
  double budget = 0.0;
  double train_loss = 0.0;
  const flow::TrainedModels* models = nullptr;
};

struct SweepRow {
  double budget = 0.0;
  double train_loss = 0.0;
  double weak_error_forward = 0.0;
  double weak_error_backward = 0.0;
  double w2_pairs = 0.0;
  double noise_forward = 0.0;
  double noise_backward = 0.0;
};

// Entries must have strictly decreasing train_loss.
std::vector<SweepRow> fmrc_vs_operator_error_sweep(const TransitionPairSet& pairs, const std::vector<SweepEntry>& entries,
                                                   const WeakErrorConfig& cfg);

// Columns: budget, train_loss, weak_error_forward, weak_error_backward, w2_pairs
void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows);

}  // namespace fmrc::diag
