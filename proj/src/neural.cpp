#include "fmrc/neural.hpp"

#include "fmrc/io.hpp"
#include "fmrc/random.hpp"

#include <bit>
#include <cmath>
#include <cstring>

namespace fmrc::nn {

std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "silu"; }

Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "silu") return Activation::Silu;
  throw InvalidArgument("unknown activation '" + name + "'");
}

DenseLayer DenseLayer::zeros_like(const DenseLayer& other) {
  return {Eigen::MatrixXd::Zero(other.weight.rows(), other.weight.cols()), Eigen::VectorXd::Zero(other.bias.size())};
}

Mlp::Mlp(std::vector<int> layer_sizes, Activation activation, std::uint64_t init_seed)
    : sizes_(std::move(layer_sizes)), activation_(activation), seed_(init_seed) {
  if (sizes_.size() < 2) throw InvalidArgument("an MLP needs at least input and output sizes");
  for (int s : sizes_)
    if (s < 1) throw InvalidArgument("MLP layer sizes must be positive");
  Rng rng(init_seed);
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const int in = sizes_[l], out = sizes_[l + 1];
    DenseLayer layer{rng.normal_matrix(out, in) / std::sqrt(static_cast<double>(in)), Eigen::VectorXd::Zero(out)};
    layers_.push_back(std::move(layer));
  }
}

namespace {

Eigen::MatrixXd activate(const Eigen::MatrixXd& z, Activation a) {
  if (a == Activation::Tanh) return z.array().tanh().matrix();
  return (z.array() / (1.0 + (-z.array()).exp())).matrix();
}

}  // namespace

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& batch) const {
  if (layers_.empty()) throw InvalidArgument("forward on an empty MLP");
  if (batch.cols() != input_width())
    throw InvalidArgument("MLP input width " + std::to_string(batch.cols()) + " != " + std::to_string(input_width()));
  if (!batch.allFinite()) throw InvalidArgument("MLP input contains non-finite values");
  Eigen::MatrixXd h = batch;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Eigen::MatrixXd z = (h * layers_[l].weight.transpose()).rowwise() + layers_[l].bias.transpose();
    h = (l + 1 < layers_.size()) ? activate(z, activation_) : std::move(z);
  }
  return h;
}

Eigen::Index Mlp::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

Eigen::VectorXd Mlp::parameters() const {
  Eigen::VectorXd flat(parameter_count());
  Eigen::Index k = 0;
  for (const auto& l : layers_) {
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) flat(k++) = l.weight(i, j);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) flat(k++) = l.bias(i);
  }
  return flat;
}

void Mlp::set_parameters(const Eigen::VectorXd& flat) {
  if (flat.size() != parameter_count()) throw InvalidArgument("parameter vector length mismatch");
  Eigen::Index k = 0;
  for (auto& l : layers_) {
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) l.weight(i, j) = flat(k++);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = flat(k++);
  }
}

void Mlp::set_zero() {
  for (auto& l : layers_) {
    l.weight.setZero();
    l.bias.setZero();
  }
}

bool Mlp::all_finite() const {
  for (const auto& l : layers_)
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  return true;
}

MlpGrad::MlpGrad(const Mlp& net) {
  for (const auto& l : net.layers()) layers.push_back(DenseLayer::zeros_like(l));
}

Eigen::VectorXd MlpGrad::flatten() const {
  Eigen::Index n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  Eigen::VectorXd flat(n);
  Eigen::Index k = 0;
  for (const auto& l : layers) {
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) flat(k++) = l.weight(i, j);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) flat(k++) = l.bias(i);
  }
  return flat;
}

void MlpGrad::set_zero() {
  for (auto& l : layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
}

// --- tape ----------------------------------------------------------------------

std::string_view primitive_name(Primitive p) {
  switch (p) {
    case Primitive::Input: return "input";
    case Primitive::Affine: return "affine";
    case Primitive::Tanh: return "tanh";
    case Primitive::Silu: return "silu";
    case Primitive::Concat: return "concat";
    case Primitive::Add: return "add";
    case Primitive::Sub: return "sub";
    case Primitive::Scale: return "scale";
    case Primitive::RowSquaredNorm: return "row_squared_norm";
    case Primitive::Sum: return "sum";
    case Primitive::Mean: return "mean";
    case Primitive::Slice: return "slice";
  }
  return "?";
}

Primitive primitive_from_name(std::string_view name) {
  for (int p = 0; p <= static_cast<int>(Primitive::Slice); ++p)
    if (primitive_name(static_cast<Primitive>(p)) == name) return static_cast<Primitive>(p);
  throw UnsupportedPrimitive("primitive '" + std::string(name) + "' is not supported by the loss graph");
}

Tape::Var Tape::push(Node node) {
  node.grad = Eigen::MatrixXd::Zero(node.value.rows(), node.value.cols());
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw InvalidArgument("tape variable out of range");
  return nodes_[v.id];
}

Tape::Var Tape::input(Eigen::MatrixXd value) {
  Node n{Primitive::Input, {}, std::move(value)};
  return push(std::move(n));
}

Tape::Var Tape::affine(Var x, const DenseLayer& layer, DenseLayer* grad) {
  const auto& xv = node(x).value;
  if (xv.cols() != layer.weight.cols()) throw InvalidArgument("affine: input width mismatch");
  Node n{Primitive::Affine, {x.id}, (xv * layer.weight.transpose()).rowwise() + layer.bias.transpose()};
  n.layer = &layer;
  n.layer_grad = grad;
  return push(std::move(n));
}

Tape::Var Tape::tanh(Var x) { return push(Node{Primitive::Tanh, {x.id}, node(x).value.array().tanh().matrix()}); }

Tape::Var Tape::silu(Var x) {
  const auto& z = node(x).value;
  return push(Node{Primitive::Silu, {x.id}, (z.array() / (1.0 + (-z.array()).exp())).matrix()});
}

Tape::Var Tape::concat(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidArgument("concat of nothing");
  const Eigen::Index rows = node(parts[0]).value.rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  for (Var p : parts) {
    if (node(p).value.rows() != rows) throw InvalidArgument("concat: row count mismatch");
    cols += node(p).value.cols();
    ids.push_back(p.id);
  }
  Eigen::MatrixXd v(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    const auto& pv = node(p).value;
    v.middleCols(c, pv.cols()) = pv;
    c += pv.cols();
  }
  return push(Node{Primitive::Concat, std::move(ids), std::move(v)});
}

Tape::Var Tape::add(Var a, Var b) {
  if (node(a).value.rows() != node(b).value.rows() || node(a).value.cols() != node(b).value.cols())
    throw InvalidArgument("add: shape mismatch");
  return push(Node{Primitive::Add, {a.id, b.id}, node(a).value + node(b).value});
}

Tape::Var Tape::sub(Var a, Var b) {
  if (node(a).value.rows() != node(b).value.rows() || node(a).value.cols() != node(b).value.cols())
    throw InvalidArgument("sub: shape mismatch");
  return push(Node{Primitive::Sub, {a.id, b.id}, node(a).value - node(b).value});
}

Tape::Var Tape::scale(Var x, double factor) {
  Node n{Primitive::Scale, {x.id}, node(x).value * factor};
  n.factor = factor;
  return push(std::move(n));
}

Tape::Var Tape::row_squared_norm(Var x) {
  return push(Node{Primitive::RowSquaredNorm, {x.id}, node(x).value.rowwise().squaredNorm()});
}

Tape::Var Tape::sum(Var x) {
  Eigen::MatrixXd v(1, 1);
  v(0, 0) = node(x).value.sum();
  return push(Node{Primitive::Sum, {x.id}, std::move(v)});
}

Tape::Var Tape::mean(Var x) {
  const auto& xv = node(x).value;
  if (xv.size() == 0) throw InvalidArgument("mean of an empty block");
  Eigen::MatrixXd v(1, 1);
  v(0, 0) = xv.mean();
  return push(Node{Primitive::Mean, {x.id}, std::move(v)});
}

Tape::Var Tape::slice_cols(Var x, Eigen::Index first, Eigen::Index count) {
  const auto& xv = node(x).value;
  if (first < 0 || count < 0 || first + count > xv.cols()) throw InvalidArgument("slice: column range out of bounds");
  Node n{Primitive::Slice, {x.id}, xv.middleCols(first, count)};
  n.first = first;
  return push(std::move(n));
}

Tape::Var Tape::mlp(Var x, const Mlp& net, MlpGrad* grad) {
  Var h = x;
  const auto& layers = net.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    h = affine(h, layers[l], grad ? &grad->layers[l] : nullptr);
    if (l + 1 < layers.size()) h = activate(h, net.activation());
  }
  return h;
}

Tape::Var Tape::apply(std::string_view primitive, std::span<const Var> args) {
  const Primitive p = primitive_from_name(primitive);
  auto arity = [&](std::size_t n) {
    if (args.size() != n)
      throw InvalidArgument(std::string(primitive) + " takes " + std::to_string(n) + " argument(s)");
  };
  switch (p) {
    case Primitive::Tanh: arity(1); return tanh(args[0]);
    case Primitive::Silu: arity(1); return silu(args[0]);
    case Primitive::Concat: return concat(args);
    case Primitive::Add: arity(2); return add(args[0], args[1]);
    case Primitive::Sub: arity(2); return sub(args[0], args[1]);
    case Primitive::RowSquaredNorm: arity(1); return row_squared_norm(args[0]);
    case Primitive::Sum: arity(1); return sum(args[0]);
    case Primitive::Mean: arity(1); return mean(args[0]);
    default:
      throw InvalidArgument("primitive '" + std::string(primitive) + "' needs its typed constructor");
  }
}

void Tape::backward(Var root) {
  auto& r = nodes_.at(root.id);
  if (r.value.size() != 1) throw InvalidArgument("backward needs a scalar root");
  for (auto& n : nodes_) n.grad.setZero();
  r.grad(0, 0) = 1.0;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[id];
    const Eigen::MatrixXd& g = n.grad;
    switch (n.op) {
      case Primitive::Input: break;
      case Primitive::Affine: {
        Node& in = nodes_[n.inputs[0]];
        if (n.layer_grad) {
          n.layer_grad->weight.noalias() += g.transpose() * in.value;
          n.layer_grad->bias += g.colwise().sum().transpose();
        }
        in.grad.noalias() += g * n.layer->weight;
        break;
      }
      case Primitive::Tanh: {
        Node& in = nodes_[n.inputs[0]];
        in.grad.array() += g.array() * (1.0 - n.value.array().square());
        break;
      }
      case Primitive::Silu: {
        Node& in = nodes_[n.inputs[0]];
        const auto sig = (1.0 / (1.0 + (-in.value.array()).exp())).eval();
        in.grad.array() += g.array() * (sig + in.value.array() * sig * (1.0 - sig));
        break;
      }
      case Primitive::Concat: {
        Eigen::Index c = 0;
        for (int child : n.inputs) {
          Node& in = nodes_[child];
          in.grad += g.middleCols(c, in.value.cols());
          c += in.value.cols();
        }
        break;
      }
      case Primitive::Add:
        nodes_[n.inputs[0]].grad += g;
        nodes_[n.inputs[1]].grad += g;
        break;
      case Primitive::Sub:
        nodes_[n.inputs[0]].grad += g;
        nodes_[n.inputs[1]].grad -= g;
        break;
      case Primitive::Scale: nodes_[n.inputs[0]].grad += n.factor * g; break;
      case Primitive::RowSquaredNorm: {
        Node& in = nodes_[n.inputs[0]];
        in.grad += 2.0 * (in.value.array().colwise() * g.col(0).array()).matrix();
        break;
      }
      case Primitive::Sum: nodes_[n.inputs[0]].grad.array() += g(0, 0); break;
      case Primitive::Mean: {
        Node& in = nodes_[n.inputs[0]];
        in.grad.array() += g(0, 0) / static_cast<double>(in.value.size());
        break;
      }
      case Primitive::Slice: nodes_[n.inputs[0]].grad.middleCols(n.first, n.value.cols()) += g; break;
    }
  }
}

// --- optimizer -------------------------------------------------------------------

AdamState::AdamState(Eigen::Index n, double lr)
    : learning_rate(lr), first_moment(Eigen::VectorXd::Zero(n)), second_moment(Eigen::VectorXd::Zero(n)) {}

void adam_step(AdamState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grads) {
  if (params.size() != grads.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size())
    throw InvalidArgument("adam: parameter/gradient/moment shapes disagree");
  if (!grads.allFinite()) throw NumericalFailure("non-finite gradient");
  ++state.step_count;
  if (state.use_sgd) {
    params -= state.learning_rate * grads;
    return;
  }
  state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads;
  state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads.cwiseAbs2();
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  params.array() -= state.learning_rate * (state.first_moment.array() / c1) /
                    ((state.second_moment.array() / c2).sqrt() + state.epsilon);
}

GradCheckReport gradient_check(const std::function<double(const Eigen::VectorXd&)>& loss,
                               const Eigen::VectorXd& params, const Eigen::VectorXd& analytic,
                               std::span<const Eigen::Index> coordinates, double step, double floor) {
  if (analytic.size() != params.size()) throw InvalidArgument("gradient_check: shape mismatch");
  GradCheckReport rep;
  rep.step = step;
  Eigen::VectorXd p = params;
  for (Eigen::Index i : coordinates) {
    const double orig = p(i);
    auto at = [&](double offset) {
      p(i) = orig + offset;
      return loss(p);
    };
    // fourth-order central stencil
    const double fd = (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
    p(i) = orig;
    const double denom = std::max({std::abs(fd), std::abs(analytic(i)), floor});
    const double rel = std::abs(fd - analytic(i)) / denom;
    if (rep.worst_index < 0 || rel > rep.max_relative_error) {
      rep.max_relative_error = rel;
      rep.worst_index = i;
    }
    ++rep.checked;
  }
  return rep;
}

// --- checkpoints -------------------------------------------------------------------

namespace {
constexpr char kCheckpointMagic[4] = {'F', 'M', 'C', 'K'};
}

std::string encode_checkpoint(const Mlp& net, const nlohmann::json& metadata) {
  static_assert(std::endian::native == std::endian::little);
  nlohmann::json header = {{"layer_sizes", net.layer_sizes()},
                           {"activation", to_string(net.activation())},
                           {"init_seed", net.init_seed()},
                           {"parameter_order", "layers in order; weight row-major (out x in) then bias"},
                           {"parameter_count", net.parameter_count()},
                           {"metadata", metadata}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 4);
  const std::uint32_t version = 1;
  const std::uint64_t len = h.size();
  out.append(reinterpret_cast<const char*>(&version), 4);
  out.append(reinterpret_cast<const char*>(&len), 8);
  out += h;
  const Eigen::VectorXd p = net.parameters();
  out.append(reinterpret_cast<const char*>(p.data()), sizeof(double) * static_cast<std::size_t>(p.size()));
  return out;
}

std::pair<Mlp, nlohmann::json> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 4, std::string(kCheckpointMagic, 4)) != 0)
    throw IoError("checkpoint: bad magic");
  std::uint32_t version;
  std::uint64_t len;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&len, bytes.data() + 8, 8);
  if (version != 1) throw IoError("checkpoint: unsupported version");
  if (len > bytes.size() - 16) throw IoError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad header: ") + e.what());
  }
  Mlp net(header.at("layer_sizes").get<std::vector<int>>(),
          activation_from_string(header.at("activation").get<std::string>()), header.at("init_seed").get<std::uint64_t>());
  const std::size_t n = static_cast<std::size_t>(net.parameter_count());
  if (bytes.size() - 16 - len != n * sizeof(double)) throw IoError("checkpoint: parameter block size mismatch");
  Eigen::VectorXd p(static_cast<Eigen::Index>(n));
  std::memcpy(p.data(), bytes.data() + 16 + len, n * sizeof(double));
  net.set_parameters(p);
  return {std::move(net), header.value("metadata", nlohmann::json::object())};
}

void save_checkpoint(const std::filesystem::path& path, const Mlp& net, const nlohmann::json& metadata) {
  io::write_file(path, encode_checkpoint(net, metadata));
}

std::pair<Mlp, nlohmann::json> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace fmrc::nn
