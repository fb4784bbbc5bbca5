#pragma once

#include "fmrc/errors.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <vector>

namespace fmrc::msm {

struct Discretization {
  Eigen::MatrixXd centers;  // K x dim
  std::uint64_t seed = 0;
  double inertia = 0.0;
  int iterations = 0;

  int size() const { return static_cast<int>(centers.rows()); }
  // Nearest center (Euclidean) per row.
  std::vector<int> assign(const Eigen::MatrixXd& points) const;
};

struct KMeansOptions {
  int max_iterations = 200;
  double tolerance = 1e-6;  // relative inertia change
};

struct KMeansResult {
  Discretization discretization;
  std::vector<int> labels;
};

// k-means++ seeding then Lloyd iterations; empty clusters are re-seeded from the farthest point.
KMeansResult kmeans_discretize(const Eigen::MatrixXd& points, int k, std::uint64_t seed, KMeansOptions options = {});

double inertia(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centers, const std::vector<int>& labels);

struct TransitionMatrix {
  Eigen::MatrixXi counts;        // K x K over all states
  Eigen::MatrixXd P;             // row-stochastic over active states
  std::vector<int> active;       // original state ids of P's rows/columns
  std::vector<int> excluded;     // states with no usable outgoing counts
  int lag_steps = 1;

  int n_states() const { return static_cast<int>(counts.rows()); }
  // Index into P for an original state id, or -1 when excluded.
  int active_index(int state) const;
};

// counts_ij = #{k : l_k = i, l_{k+lag} = j}, summed over the given sequences.
TransitionMatrix count_transition_matrix(std::span<const std::vector<int>> label_sequences, int n_states,
                                         int lag_steps);

Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd& P);

struct PccaOptions {
  // Work with (P + D^-1 P^T D) / 2, D = diag(pi).
  bool reversibilize = true;
  double complex_tolerance = 1e-8;
};

struct PccaResult {
  Eigen::MatrixXd chi;           // active states x n_clusters
  std::vector<int> crisp;        // argmax per row
  Eigen::VectorXd eigenvalues;   // the retained ones, descending
};

PccaResult pcca_plus(const Eigen::MatrixXd& P, int n_clusters, PccaOptions options = {});
PccaResult pcca_plus(const TransitionMatrix& T, int n_clusters, PccaOptions options = {});

struct ClusterStats {
  int label = 0;
  Eigen::Index count = 0;
  double mean = 0.0;
  double std = 0.0;
};

struct SeparationOptions {
  bool allow_single_merge = false;
  Eigen::Index min_cluster_size = 10;
};

struct SeparationReport {
  std::vector<ClusterStats> clusters;   // sorted by RC mean
  std::vector<double> gaps;             // adjacent mean differences in that order
  std::vector<double> thresholds;
  double accuracy = 0.0;
  double pooled_std = 0.0;
  double min_gap_ratio = 0.0;
  bool merged = false;
  int merged_from = -1;  // label folded into merged_into
  int merged_into = -1;
  std::vector<int> small_clusters;  // labels with fewer than min_cluster_size points

  nlohmann::json to_json() const;
};

// Thresholds at midpoints between adjacent cluster means (ordered by mean); accuracy is the
// fraction of points whose threshold class equals their label. With allow_single_merge, the best
// report over "no merge" and every single merge of two labels is returned.
SeparationReport rc_cluster_separation(std::span<const double> rc_values, std::span<const int> labels,
                                       SeparationOptions options = {});

}  // namespace fmrc::msm
