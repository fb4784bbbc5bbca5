#pragma once

#include "fmrc/errors.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fmrc::nn {

enum class Activation { Tanh, Silu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out

  static DenseLayer zeros_like(const DenseLayer& other);
};

// Feed-forward net; hidden layers use the activation, the output layer is affine.
// Batches are row-major in the sense of one sample per row.
class Mlp {
 public:
  Mlp() = default;
  // Weights ~ N(0, 1/fan_in), biases zero.
  Mlp(std::vector<int> layer_sizes, Activation activation, std::uint64_t init_seed);

  Eigen::MatrixXd forward(const Eigen::MatrixXd& batch) const;

  const std::vector<int>& layer_sizes() const { return sizes_; }
  int input_width() const { return sizes_.front(); }
  int output_width() const { return sizes_.back(); }
  Activation activation() const { return activation_; }
  std::uint64_t init_seed() const { return seed_; }

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  Eigen::Index parameter_count() const;
  // Layers in order; each layer's weight row-major, then its bias.
  Eigen::VectorXd parameters() const;
  void set_parameters(const Eigen::VectorXd& flat);
  void set_zero();
  bool all_finite() const;

 private:
  std::vector<int> sizes_;
  Activation activation_ = Activation::Tanh;
  std::uint64_t seed_ = 0;
  std::vector<DenseLayer> layers_;
};

// Gradient buffers shaped like an Mlp.
struct MlpGrad {
  std::vector<DenseLayer> layers;

  explicit MlpGrad(const Mlp& net);
  MlpGrad() = default;
  Eigen::VectorXd flatten() const;
  void set_zero();
};

// Reverse-mode tape over a fixed whitelist of primitives. Every node holds a
// dense matrix (batch rows x features); scalars are 1x1.
enum class Primitive {
  Input,
  Affine,
  Tanh,
  Silu,
  Concat,
  Add,
  Sub,
  Scale,
  RowSquaredNorm,
  Sum,
  Mean,
  Slice,
};

std::string_view primitive_name(Primitive p);
// Throws UnsupportedPrimitive for names outside the whitelist.
Primitive primitive_from_name(std::string_view name);

class Tape {
 public:
  struct Var {
    int id = -1;
  };

  Var input(Eigen::MatrixXd value);
  // y = x W^T + b; gradients accumulate into grad when it is non-null.
  Var affine(Var x, const DenseLayer& layer, DenseLayer* grad);
  Var tanh(Var x);
  Var silu(Var x);
  Var activate(Var x, Activation a) { return a == Activation::Tanh ? tanh(x) : silu(x); }
  // Column-wise concatenation of equal-height blocks.
  Var concat(std::span<const Var> parts);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var x, double factor);
  Var row_squared_norm(Var x);
  Var sum(Var x);
  Var mean(Var x);
  Var slice_cols(Var x, Eigen::Index first, Eigen::Index count);

  Var mlp(Var x, const Mlp& net, MlpGrad* grad);

  // Name-based construction; rejects anything outside the whitelist.
  // Parameterized primitives (affine, scale, slice) need the typed entry points.
  Var apply(std::string_view primitive, std::span<const Var> args);

  const Eigen::MatrixXd& value(Var v) const { return nodes_.at(v.id).value; }
  const Eigen::MatrixXd& gradient(Var v) const { return nodes_.at(v.id).grad; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(root)/d(root) = 1; root must be 1x1.
  void backward(Var root);

 private:
  struct Node {
    Primitive op;
    std::vector<int> inputs;
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;
    const DenseLayer* layer = nullptr;
    DenseLayer* layer_grad = nullptr;
    double factor = 1.0;
    Eigen::Index first = 0;
  };

  Var push(Node node);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

// Adam with bias correction, or plain gradient descent when use_sgd is set.
struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool use_sgd = false;
  std::int64_t step_count = 0;
  Eigen::VectorXd first_moment;
  Eigen::VectorXd second_moment;

  explicit AdamState(Eigen::Index n = 0, double lr = 1e-3);
};

void adam_step(AdamState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grads);

struct GradCheckReport {
  double max_relative_error = 0.0;
  Eigen::Index worst_index = -1;
  double step = 0.0;
  Eigen::Index checked = 0;
};

// Five-point central differences of loss(params) at the given coordinates against an analytic
// gradient. Relative error is |g - fd| / max(|g|, |fd|, floor).
GradCheckReport gradient_check(const std::function<double(const Eigen::VectorXd&)>& loss,
                               const Eigen::VectorXd& params, const Eigen::VectorXd& analytic,
                               std::span<const Eigen::Index> coordinates, double step = 1e-3,
                               double floor = 1e-8);

// Checkpoint: "FMCK" | u32 version | u64 header_length | JSON header | f64 parameters (LE).
void save_checkpoint(const std::filesystem::path& path, const Mlp& net, const nlohmann::json& metadata);
std::pair<Mlp, nlohmann::json> load_checkpoint(const std::filesystem::path& path);
std::string encode_checkpoint(const Mlp& net, const nlohmann::json& metadata);
std::pair<Mlp, nlohmann::json> decode_checkpoint(const std::string& bytes);

}  // namespace fmrc::nn
