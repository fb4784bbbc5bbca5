#pragma once

#include "fmrc/dynamics.hpp"
#include "fmrc/errors.hpp"
#include "fmrc/neural.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fmrc::flow {

// Linear (rectified-flow) interpolant I(s; y0, y1) = (1 - s) y0 + s y1.
template <typename Derived0, typename Derived1>
auto interpolate(double s, const Eigen::MatrixBase<Derived0>& y0, const Eigen::MatrixBase<Derived1>& y1) {
  if (!(s >= 0.0 && s <= 1.0)) throw InvalidArgument("interpolation time must lie in [0, 1]");
  if (y0.rows() != y1.rows() || y0.cols() != y1.cols()) throw InvalidArgument("interpolation endpoints differ in shape");
  using Plain = typename Derived0::PlainObject;
  return Plain((1.0 - s) * y0 + s * y1);
}

// Row-wise interpolation with one time per row.
Eigen::MatrixXd interpolate_rows(const Eigen::VectorXd& s, const Eigen::MatrixXd& y0, const Eigen::MatrixXd& y1);

// sin/cos(2^k pi s), k = 0..n_frequencies-1; N x 2 n_frequencies.
Eigen::MatrixXd time_features(const Eigen::VectorXd& s, int n_frequencies);

enum class Direction { Forward, Backward };

// v(s, state, condition). Forward fields transport noise to y conditioned on x;
// backward fields transport noise to x conditioned on y.
struct VelocityFieldModel {
  nn::Mlp net;
  int state_dim = 0;
  int condition_dim = 0;
  int s_frequencies = 4;
  Direction direction = Direction::Forward;

  static VelocityFieldModel make(int state_dim, int condition_dim, Direction direction, const std::vector<int>& hidden,
                                 nn::Activation activation, int s_frequencies, std::uint64_t seed);

  int input_width() const { return 2 * s_frequencies + state_dim + condition_dim; }
  void validate() const;

  Eigen::MatrixXd evaluate(const Eigen::VectorXd& s, const Eigen::MatrixXd& state, const Eigen::MatrixXd& condition) const;
  Eigen::MatrixXd evaluate(double s, const Eigen::MatrixXd& state, const Eigen::MatrixXd& condition) const;
};

// Reaction coordinate r: R^D -> R^d. The net sees standardized inputs; reported RC
// values are additionally standardized by statistics frozen after training.
struct EncoderModel {
  nn::Mlp net;
  Standardizer input_norm;
  Eigen::VectorXd output_mean;
  Eigen::VectorXd output_std;

  static EncoderModel make(int input_dim, int rc_dim, const std::vector<int>& hidden, nn::Activation activation,
                           std::uint64_t seed);
  // Frozen linear projection onto one input coordinate (in standardized units).
  static EncoderModel coordinate_projection(int input_dim, int coordinate);

  int input_dim() const { return net.input_width(); }
  int rc_dim() const { return net.output_width(); }
  void validate() const;

  Eigen::MatrixXd raw(const Eigen::MatrixXd& standardized_points) const;
  void freeze_output_statistics(const Eigen::MatrixXd& standardized_points);
};

// Rowwise r applied to physical points, output standardization included.
Eigen::MatrixXd evaluate_rc(const EncoderModel& encoder, const Eigen::MatrixXd& points);

struct FlowNoise {
  Eigen::MatrixXd x_noise;  // x'
  Eigen::MatrixXd y_noise;  // y'
  Eigen::VectorXd s;

  static FlowNoise draw(Eigen::Index batch, int dim, std::uint64_t seed);
};

struct FmrcLossReport {
  double l0 = 0.0;
  double l1 = 0.0;
  double total = 0.0;
  Eigen::Index batch_size = 0;
  double s_min = 0.0;
  double s_max = 0.0;
};

struct FlowGradients {
  nn::MlpGrad encoder;
  nn::MlpGrad v0;
  nn::MlpGrad v1;
};

struct LossWeights {
  double l0 = 1.0;
  double l1 = 1.0;
};

// Bottlenecked loss: v0 sees r(x), v1 sees r(y). Batches are in the models' standardized
// coordinates. When grads is set, gradients of w0 L0 + w1 L1 are accumulated into it;
// encoder gradients are skipped when train_encoder is false.
FmrcLossReport fmrc_minibatch_loss(const EncoderModel& encoder, const VelocityFieldModel& v0,
                                   const VelocityFieldModel& v1, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                                   const FlowNoise& noise, FlowGradients* grads = nullptr, bool train_encoder = true,
                                   LossWeights weights = {});

// Unbottlenecked baseline: v0 sees x, v1 sees y.
FmrcLossReport full_fm_minibatch_loss(const VelocityFieldModel& v0, const VelocityFieldModel& v1,
                                      const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const FlowNoise& noise,
                                      FlowGradients* grads = nullptr, LossWeights weights = {});
// Flow matching without a condition (condition_dim 0): mean |v(s, I_s) - (data - noise)|^2.
// When grad is set, the parameter gradient is accumulated into it.
double unconditional_fm_minibatch_loss(const VelocityFieldModel& v, const Eigen::MatrixXd& data,
                                       const Eigen::MatrixXd& noise, const Eigen::VectorXd& s,
                                       nn::MlpGrad* grad = nullptr);

enum class TrainMode { Fmrc, Full, FixedEncoder };

std::string to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

struct ModelConfig {
  int rc_dim = 1;
  std::vector<int> encoder_hidden{64, 64};
  std::vector<int> velocity_hidden{128, 128};
  int s_frequencies = 4;
  nn::Activation encoder_activation = nn::Activation::Tanh;
  nn::Activation velocity_activation = nn::Activation::Silu;
};

struct TrainConfig {
  std::int64_t iterations = 20000;
  Eigen::Index batch_size = 512;
  double learning_rate = 1e-3;
  bool use_sgd = false;
  double validation_fraction = 0.1;
  Eigen::Index validation_size = 4096;
  std::int64_t log_every = 100;
  double ema = 0.05;
  LossWeights weights;
  std::uint64_t seed = 0;
  // When false the data are used in physical units.
  bool standardize = true;
  int nonfinite_patience = 5;
  ModelConfig model;
};

struct TrainedModels {
  TrainMode mode = TrainMode::Fmrc;
  Standardizer norm;
  EncoderModel encoder;
  VelocityFieldModel v0;
  VelocityFieldModel v1;

  Eigen::MatrixXd condition(Direction direction, const Eigen::MatrixXd& standardized_points) const;
};

struct LossRecord {
  std::int64_t iteration = 0;
  double l0 = 0.0;
  double l1 = 0.0;
  double total = 0.0;
  double validation_total = 0.0;
};

struct TrainResult {
  TrainedModels models;
  std::vector<LossRecord> history;
  double best_validation = 0.0;
  std::int64_t best_iteration = 0;
};

TrainedModels initialize_models(int dim, TrainMode mode, const TrainConfig& cfg, const Standardizer& norm);

// Minibatch training of v0, v1 (and the encoder in Fmrc mode). FixedEncoder needs a frozen encoder.
// Returns the snapshot with the best validation loss.
TrainResult train(const TransitionPairSet& data, TrainMode mode, const TrainConfig& cfg,
                  const EncoderModel* frozen_encoder = nullptr);

// Loss of trained models over a pair set (physical units), averaged over `repeats`
// independent noise draws fixed by seed. Common seeds give common random numbers.
FmrcLossReport evaluate_loss(const TrainedModels& models, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                             std::uint64_t seed, int repeats = 1);

enum class OdeMethod { Euler, Rk4 };

struct OdeSolverConfig {
  OdeMethod method = OdeMethod::Rk4;
  int n_steps = 20;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_steps < 1) throw InvalidArgument("ODE solver needs n_steps >= 1");
  }
};

std::string to_string(OdeMethod m);
OdeMethod ode_method_from_string(const std::string& s);

// Integrates dY/ds = field(s, Y) from s = 0 to 1. field maps (double, N x D) -> N x D.
template <typename Field>
Eigen::MatrixXd integrate_flow(Field&& field, Eigen::MatrixXd y, const OdeSolverConfig& solver) {
  solver.validate();
  const double h = 1.0 / solver.n_steps;
  for (int k = 0; k < solver.n_steps; ++k) {
    const double s = k * h;
    if (solver.method == OdeMethod::Euler) {
      y += h * field(s, y);
    } else {
      const Eigen::MatrixXd k1 = field(s, y);
      const Eigen::MatrixXd k2 = field(s + 0.5 * h, y + 0.5 * h * k1);
      const Eigen::MatrixXd k3 = field(s + 0.5 * h, y + 0.5 * h * k2);
      const Eigen::MatrixXd k4 = field(s + h, y + h * k3);
      y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    if (!y.allFinite()) throw NumericalFailure("flow ODE state became non-finite at step " + std::to_string(k + 1));
  }
  return y;
}

// n samples of Y^1 for one condition (1 x c), starting from seeded standard normals.
Eigen::MatrixXd sample_flow(const VelocityFieldModel& v, const Eigen::RowVectorXd& condition, Eigen::Index n,
                            const OdeSolverConfig& solver);
// One sample per condition row.
Eigen::MatrixXd sample_flow(const VelocityFieldModel& v, const Eigen::MatrixXd& conditions,
                            const OdeSolverConfig& solver);

// Generated y given x (Forward) or x given y (Backward), both in physical units.
Eigen::MatrixXd generate(const TrainedModels& models, Direction direction, const Eigen::MatrixXd& points,
                         const OdeSolverConfig& solver);

// Checkpoint bundle: one file per model plus a manifest tying them to the dataset.
struct Manifest {
  std::string mode;
  std::string encoder = "encoder.ckpt";
  std::string v0 = "v0.ckpt";
  std::string v1 = "v1.ckpt";
  std::string pairs;
  std::string dataset_hash;
  double final_loss = 0.0;
  std::int64_t iterations = 0;
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
};

void save_encoder(const std::filesystem::path& path, const EncoderModel& encoder);
EncoderModel load_encoder(const std::filesystem::path& path);
void save_velocity(const std::filesystem::path& path, const VelocityFieldModel& v, const Standardizer& norm);
VelocityFieldModel load_velocity(const std::filesystem::path& path, Standardizer* norm = nullptr);

// Writes the three checkpoints (unless skip_encoder) and manifest.json into dir.
void save_models(const std::filesystem::path& dir, const TrainedModels& models, const Manifest& manifest,
                 bool skip_encoder = false);
TrainedModels load_models(const std::filesystem::path& manifest_path, Manifest* manifest = nullptr);

std::string hash_file(const std::filesystem::path& path);

}  // namespace fmrc::flow
