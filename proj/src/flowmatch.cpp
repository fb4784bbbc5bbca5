#include "fmrc/flowmatch.hpp"

#include "fmrc/io.hpp"
#include "fmrc/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace fmrc::flow {

Eigen::MatrixXd interpolate_rows(const Eigen::VectorXd& s, const Eigen::MatrixXd& y0, const Eigen::MatrixXd& y1) {
  if (y0.rows() != y1.rows() || y0.cols() != y1.cols() || s.size() != y0.rows())
    throw InvalidArgument("interpolate_rows: shape mismatch");
  if ((s.array() < 0.0).any() || (s.array() > 1.0).any()) throw InvalidArgument("interpolation time must lie in [0, 1]");
  return (y0.array().colwise() * (1.0 - s.array()) + y1.array().colwise() * s.array()).matrix();
}

Eigen::MatrixXd time_features(const Eigen::VectorXd& s, int n_frequencies) {
  Eigen::MatrixXd f(s.size(), 2 * n_frequencies);
  for (int k = 0; k < n_frequencies; ++k) {
    const double w = std::ldexp(std::numbers::pi, k);
    f.col(2 * k) = (w * s.array()).sin().matrix();
    f.col(2 * k + 1) = (w * s.array()).cos().matrix();
  }
  return f;
}

// --- models ------------------------------------------------------------------------

VelocityFieldModel VelocityFieldModel::make(int state_dim, int condition_dim, Direction direction,
                                            const std::vector<int>& hidden, nn::Activation activation,
                                            int s_frequencies, std::uint64_t seed) {
  if (state_dim < 1 || condition_dim < 0 || s_frequencies < 0) throw InvalidArgument("bad velocity field shape");
  VelocityFieldModel v;
  v.state_dim = state_dim;
  v.condition_dim = condition_dim;
  v.s_frequencies = s_frequencies;
  v.direction = direction;
  std::vector<int> sizes{v.input_width()};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(state_dim);
  v.net = nn::Mlp(sizes, activation, seed);
  return v;
}

void VelocityFieldModel::validate() const {
  if (net.layer_sizes().empty() || net.input_width() != input_width() || net.output_width() != state_dim)
    throw InvalidArgument("velocity field net shape does not match 2*s_frequencies + D + c -> D");
}

Eigen::MatrixXd VelocityFieldModel::evaluate(const Eigen::VectorXd& s, const Eigen::MatrixXd& state,
                                             const Eigen::MatrixXd& condition) const {
  if (state.cols() != state_dim || condition.cols() != condition_dim || s.size() != state.rows() ||
      condition.rows() != state.rows())
    throw InvalidArgument("velocity field: input shape mismatch");
  Eigen::MatrixXd in(state.rows(), input_width());
  in << time_features(s, s_frequencies), state, condition;
  return net.forward(in);
}

Eigen::MatrixXd VelocityFieldModel::evaluate(double s, const Eigen::MatrixXd& state,
                                             const Eigen::MatrixXd& condition) const {
  return evaluate(Eigen::VectorXd::Constant(state.rows(), s), state, condition);
}

EncoderModel EncoderModel::make(int input_dim, int rc_dim, const std::vector<int>& hidden, nn::Activation activation,
                                std::uint64_t seed) {
  if (rc_dim < 1 || rc_dim >= input_dim) throw InvalidArgument("encoder needs 1 <= d < D");
  EncoderModel e;
  std::vector<int> sizes{input_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(rc_dim);
  e.net = nn::Mlp(sizes, activation, seed);
  e.input_norm = Standardizer::identity(input_dim);
  e.output_mean = Eigen::VectorXd::Zero(rc_dim);
  e.output_std = Eigen::VectorXd::Ones(rc_dim);
  return e;
}

EncoderModel EncoderModel::coordinate_projection(int input_dim, int coordinate) {
  if (coordinate < 0 || coordinate >= input_dim) throw InvalidArgument("projection coordinate out of range");
  EncoderModel e = make(input_dim, 1, {}, nn::Activation::Tanh, 0);
  e.net.set_zero();
  e.net.layers()[0].weight(0, coordinate) = 1.0;
  return e;
}

void EncoderModel::validate() const {
  if (rc_dim() >= input_dim()) throw InvalidArgument("encoder needs d < D");
  if (input_norm.dim() != input_dim() || output_mean.size() != rc_dim() || output_std.size() != rc_dim())
    throw InvalidArgument("encoder standardization shape mismatch");
}

Eigen::MatrixXd EncoderModel::raw(const Eigen::MatrixXd& standardized_points) const {
  return net.forward(standardized_points);
}

void EncoderModel::freeze_output_statistics(const Eigen::MatrixXd& standardized_points) {
  const Standardizer s = Standardizer::fit(raw(standardized_points));
  output_mean = s.mean;
  output_std = s.std;
  for (Eigen::Index i = 0; i < output_std.size(); ++i)
    if (output_std(i) < 1e-12) output_std(i) = 1.0;
}

Eigen::MatrixXd evaluate_rc(const EncoderModel& encoder, const Eigen::MatrixXd& points) {
  if (points.cols() != encoder.input_dim())
    throw InvalidArgument("evaluate_rc: points have width " + std::to_string(points.cols()) + ", encoder expects " +
                          std::to_string(encoder.input_dim()));
  const Eigen::MatrixXd r = encoder.raw(encoder.input_norm.apply(points));
  return ((r.rowwise() - encoder.output_mean.transpose()).array().rowwise() / encoder.output_std.transpose().array())
      .matrix();
}

FlowNoise FlowNoise::draw(Eigen::Index batch, int dim, std::uint64_t seed) {
  Rng rng(seed);
  FlowNoise n;
  n.x_noise = rng.normal_matrix(batch, dim);
  n.y_noise = rng.normal_matrix(batch, dim);
  n.s = rng.uniform_vector(batch);
  return n;
}

// --- losses ------------------------------------------------------------------------

namespace {

struct ConditionVars {
  std::optional<nn::Tape::Var> c0;
  std::optional<nn::Tape::Var> c1;
};

// Squared residual of one conditional flow: mean_b |v(s_b, I(s_b, noise_b, data_b), c_b) - (data_b - noise_b)|^2.
nn::Tape::Var side_loss(nn::Tape& tape, const VelocityFieldModel& v, const Eigen::MatrixXd& data,
                        const Eigen::MatrixXd& noise, const Eigen::VectorXd& s, std::optional<nn::Tape::Var> cond,
                        nn::MlpGrad* grad) {
  v.validate();
  if (data.cols() != v.state_dim) throw InvalidArgument("batch width does not match the velocity field state");
  std::vector<nn::Tape::Var> parts{tape.input(time_features(s, v.s_frequencies)),
                                   tape.input(interpolate_rows(s, noise, data))};
  if (v.condition_dim > 0) {
    if (!cond || tape.value(*cond).cols() != v.condition_dim)
      throw InvalidArgument("condition width does not match the velocity field");
    parts.push_back(*cond);
  }
  const auto out = tape.mlp(tape.concat(parts), v.net, grad);
  const auto residual = tape.sub(out, tape.input(data - noise));
  return tape.mean(tape.row_squared_norm(residual));
}

FmrcLossReport run_loss(nn::Tape& tape, const VelocityFieldModel& v0, const VelocityFieldModel& v1,
                        const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const FlowNoise& noise, ConditionVars cond,
                        FlowGradients* grads, LossWeights weights) {
  const auto l0 = side_loss(tape, v0, y, noise.y_noise, noise.s, cond.c0, grads ? &grads->v0 : nullptr);
  const auto l1 = side_loss(tape, v1, x, noise.x_noise, noise.s, cond.c1, grads ? &grads->v1 : nullptr);
  FmrcLossReport rep;
  rep.l0 = tape.value(l0)(0, 0);
  rep.l1 = tape.value(l1)(0, 0);
  rep.total = rep.l0 + rep.l1;
  rep.batch_size = x.rows();
  rep.s_min = noise.s.minCoeff();
  rep.s_max = noise.s.maxCoeff();
  if (!std::isfinite(rep.total)) {
    nlohmann::json diag = {{"batch_size", rep.batch_size}, {"l0", io::format_double(rep.l0)},
                           {"l1", io::format_double(rep.l1)}};
    throw NumericalFailure("non-finite flow-matching loss", diag.dump());
  }
  if (grads) tape.backward(tape.add(tape.scale(l0, weights.l0), tape.scale(l1, weights.l1)));
  return rep;
}

void check_batch(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const FlowNoise& noise) {
  if (x.rows() < 1) throw InvalidArgument("empty minibatch");
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw InvalidArgument("minibatch x/y shape mismatch");
  if (noise.s.size() != x.rows() || noise.x_noise.rows() != x.rows() || noise.y_noise.rows() != x.rows() ||
      noise.x_noise.cols() != x.cols() || noise.y_noise.cols() != x.cols())
    throw InvalidArgument("noise does not match the minibatch");
}

}  // namespace

FmrcLossReport fmrc_minibatch_loss(const EncoderModel& encoder, const VelocityFieldModel& v0,
                                   const VelocityFieldModel& v1, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                                   const FlowNoise& noise, FlowGradients* grads, bool train_encoder,
                                   LossWeights weights) {
  check_batch(x, y, noise);
  if (v0.condition_dim != encoder.rc_dim() || v1.condition_dim != encoder.rc_dim())
    throw InvalidArgument("velocity condition width must equal the RC dimension");
  nn::Tape tape;
  nn::MlpGrad* eg = (grads && train_encoder) ? &grads->encoder : nullptr;
  ConditionVars cond;
  cond.c0 = tape.mlp(tape.input(x), encoder.net, eg);
  cond.c1 = tape.mlp(tape.input(y), encoder.net, eg);
  return run_loss(tape, v0, v1, x, y, noise, cond, grads, weights);
}

FmrcLossReport full_fm_minibatch_loss(const VelocityFieldModel& v0, const VelocityFieldModel& v1,
                                      const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const FlowNoise& noise,
                                      FlowGradients* grads, LossWeights weights) {
  check_batch(x, y, noise);
  if (v0.condition_dim != x.cols() || v1.condition_dim != y.cols())
    throw InvalidArgument("full baseline conditions on the raw state: condition_dim must equal D");
  nn::Tape tape;
  ConditionVars cond;
  cond.c0 = tape.input(x);
  cond.c1 = tape.input(y);
  return run_loss(tape, v0, v1, x, y, noise, cond, grads, weights);
}

double unconditional_fm_minibatch_loss(const VelocityFieldModel& v, const Eigen::MatrixXd& data,
                                       const Eigen::MatrixXd& noise, const Eigen::VectorXd& s, nn::MlpGrad* grad) {
  if (v.condition_dim != 0) throw InvalidArgument("unconditional flow matching needs condition_dim 0");
  if (data.rows() < 1 || noise.rows() != data.rows() || noise.cols() != data.cols() || s.size() != data.rows())
    throw InvalidArgument("unconditional minibatch shape mismatch");
  nn::Tape tape;
  const auto loss = side_loss(tape, v, data, noise, s, std::nullopt, grad);
  const double value = tape.value(loss)(0, 0);
  if (!std::isfinite(value)) throw NumericalFailure("non-finite flow-matching loss");
  if (grad) tape.backward(loss);
  return value;
}

// --- training ----------------------------------------------------------------------

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Fmrc: return "fmrc";
    case TrainMode::Full: return "full";
    case TrainMode::FixedEncoder: return "assess";
  }
  return "?";
}

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "fmrc") return TrainMode::Fmrc;
  if (s == "full") return TrainMode::Full;
  if (s == "assess" || s == "fixed_encoder") return TrainMode::FixedEncoder;
  throw InvalidArgument("unknown training mode '" + s + "'");
}

namespace {

bool same_norm(const Standardizer& a, const Standardizer& b) { return a.mean == b.mean && a.std == b.std; }

// Equivalent encoder whose first layer expects points standardized with `norm`.
EncoderModel rebase_encoder(const EncoderModel& e, const Standardizer& norm) {
  EncoderModel out = e;
  auto& first = out.net.layers().front();
  const Eigen::VectorXd scale = norm.std.cwiseQuotient(e.input_norm.std);
  const Eigen::VectorXd shift = (norm.mean - e.input_norm.mean).cwiseQuotient(e.input_norm.std);
  first.bias += first.weight * shift;
  first.weight = first.weight * scale.asDiagonal();
  out.input_norm = norm;
  return out;
}

}  // namespace

Eigen::MatrixXd TrainedModels::condition(Direction direction, const Eigen::MatrixXd& standardized_points) const {
  (void)direction;
  if (mode == TrainMode::Full) return standardized_points;
  if (same_norm(encoder.input_norm, norm)) return encoder.raw(standardized_points);
  return encoder.raw(encoder.input_norm.apply(norm.invert(standardized_points)));
}

TrainedModels initialize_models(int dim, TrainMode mode, const TrainConfig& cfg, const Standardizer& norm) {
  const auto& m = cfg.model;
  TrainedModels models;
  models.mode = mode;
  models.norm = norm;
  models.encoder = EncoderModel::make(dim, m.rc_dim, m.encoder_hidden, m.encoder_activation,
                                      derive_seed(cfg.seed, "encoder"));
  models.encoder.input_norm = norm;
  const int c = mode == TrainMode::Full ? dim : m.rc_dim;
  models.v0 = VelocityFieldModel::make(dim, c, Direction::Forward, m.velocity_hidden, m.velocity_activation,
                                       m.s_frequencies, derive_seed(cfg.seed, "v0"));
  models.v1 = VelocityFieldModel::make(dim, c, Direction::Backward, m.velocity_hidden, m.velocity_activation,
                                       m.s_frequencies, derive_seed(cfg.seed, "v1"));
  return models;
}

namespace {

FmrcLossReport batch_loss(const TrainedModels& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                          const FlowNoise& noise, FlowGradients* grads, LossWeights w) {
  if (m.mode == TrainMode::Full) return full_fm_minibatch_loss(m.v0, m.v1, x, y, noise, grads, w);
  return fmrc_minibatch_loss(m.encoder, m.v0, m.v1, x, y, noise, grads, m.mode == TrainMode::Fmrc, w);
}

std::vector<nn::Mlp*> trainable(TrainedModels& m) {
  std::vector<nn::Mlp*> nets;
  if (m.mode == TrainMode::Fmrc) nets.push_back(&m.encoder.net);
  nets.push_back(&m.v0.net);
  nets.push_back(&m.v1.net);
  return nets;
}

Eigen::VectorXd gather(const std::vector<nn::Mlp*>& nets) {
  Eigen::Index n = 0;
  for (auto* net : nets) n += net->parameter_count();
  Eigen::VectorXd p(n);
  Eigen::Index k = 0;
  for (auto* net : nets) {
    const auto q = net->parameters();
    p.segment(k, q.size()) = q;
    k += q.size();
  }
  return p;
}

void scatter(const std::vector<nn::Mlp*>& nets, const Eigen::VectorXd& p) {
  Eigen::Index k = 0;
  for (auto* net : nets) {
    const auto n = net->parameter_count();
    net->set_parameters(p.segment(k, n));
    k += n;
  }
}

Eigen::VectorXd gather_grads(TrainMode mode, const FlowGradients& g) {
  std::vector<Eigen::VectorXd> parts;
  if (mode == TrainMode::Fmrc) parts.push_back(g.encoder.flatten());
  parts.push_back(g.v0.flatten());
  parts.push_back(g.v1.flatten());
  Eigen::Index n = 0;
  for (const auto& p : parts) n += p.size();
  Eigen::VectorXd out(n);
  Eigen::Index k = 0;
  for (const auto& p : parts) {
    out.segment(k, p.size()) = p;
    k += p.size();
  }
  return out;
}

}  // namespace

TrainResult train(const TransitionPairSet& data, TrainMode mode, const TrainConfig& cfg,
                  const EncoderModel* frozen_encoder) {
  data.validate();
  if (cfg.batch_size < 1) throw InvalidArgument("batch size must be >= 1");
  if (cfg.iterations < 0) throw InvalidArgument("iterations must be >= 0");
  if (!(cfg.validation_fraction >= 0.0 && cfg.validation_fraction < 1.0))
    throw InvalidArgument("validation fraction must lie in [0, 1)");
  if (mode == TrainMode::FixedEncoder && !frozen_encoder)
    throw InvalidArgument("fixed-encoder training needs an encoder");

  const Standardizer norm = cfg.standardize ? data.normalization : Standardizer::identity(data.dim);
  TrainResult result;
  result.models = initialize_models(data.dim, mode, cfg, norm);
  TrainedModels& models = result.models;
  if (mode == TrainMode::FixedEncoder) {
    models.encoder = *frozen_encoder;
    models.encoder.validate();
    if (models.encoder.input_dim() != data.dim) throw InvalidArgument("frozen encoder input width mismatch");
    if (!same_norm(models.encoder.input_norm, norm)) models.encoder = rebase_encoder(models.encoder, norm);
    if (models.encoder.rc_dim() != models.v0.condition_dim) {
      TrainConfig c2 = cfg;
      c2.model.rc_dim = models.encoder.rc_dim();
      auto fresh = initialize_models(data.dim, mode, c2, norm);
      models.v0 = fresh.v0;
      models.v1 = fresh.v1;
    }
  }

  const Eigen::MatrixXd xs = norm.apply(data.x);
  const Eigen::MatrixXd ys = norm.apply(data.y);

  // train/validation split
  std::vector<Eigen::Index> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), std::mt19937_64(derive_seed(cfg.seed, "split")));
  Eigen::Index n_val = static_cast<Eigen::Index>(std::ceil(cfg.validation_fraction * data.size()));
  if (data.size() < 2) n_val = 0;
  n_val = std::min(n_val, data.size() - 1);
  std::vector<Eigen::Index> val_idx(order.begin(), order.begin() + n_val);
  std::vector<Eigen::Index> train_idx(order.begin() + n_val, order.end());
  if (val_idx.empty()) val_idx = train_idx;
  if (static_cast<Eigen::Index>(val_idx.size()) > cfg.validation_size) val_idx.resize(cfg.validation_size);
  std::sort(val_idx.begin(), val_idx.end());
  const Eigen::MatrixXd xv = xs(val_idx, Eigen::all);
  const Eigen::MatrixXd yv = ys(val_idx, Eigen::all);
  const FlowNoise val_noise = FlowNoise::draw(xv.rows(), data.dim, derive_seed(cfg.seed, "validation"));

  auto validation_loss = [&]() { return batch_loss(models, xv, yv, val_noise, nullptr, cfg.weights).total; };

  if (cfg.iterations == 0) {
    if (mode == TrainMode::Fmrc) models.encoder.freeze_output_statistics(xs(train_idx, Eigen::all));
    result.best_validation = validation_loss();
    if (mode == TrainMode::FixedEncoder) models.encoder = *frozen_encoder;
    return result;
  }

  auto nets = trainable(models);
  Eigen::VectorXd params = gather(nets);
  nn::AdamState adam(params.size(), cfg.learning_rate);
  adam.use_sgd = cfg.use_sgd;

  Rng rng(derive_seed(cfg.seed, "batches"));
  TrainedModels best = models;
  result.best_validation = std::numeric_limits<double>::infinity();
  double ema0 = 0.0, ema1 = 0.0;
  bool ema_init = false;
  int nonfinite_run = 0;
  std::vector<Eigen::Index> batch(cfg.batch_size);

  for (std::int64_t it = 1; it <= cfg.iterations; ++it) {
    for (auto& b : batch) b = train_idx[rng.index(train_idx.size())];
    const Eigen::MatrixXd xb = xs(batch, Eigen::all);
    const Eigen::MatrixXd yb = ys(batch, Eigen::all);
    const FlowNoise noise = FlowNoise::draw(cfg.batch_size, data.dim, rng.engine()());

    FlowGradients grads{nn::MlpGrad(models.encoder.net), nn::MlpGrad(models.v0.net), nn::MlpGrad(models.v1.net)};
    FmrcLossReport rep;
    bool finite = true;
    try {
      rep = batch_loss(models, xb, yb, noise, &grads, cfg.weights);
    } catch (const NumericalFailure&) {
      finite = false;
    }
    Eigen::VectorXd g;
    if (finite) {
      g = gather_grads(mode, grads);
      finite = g.allFinite();
    }
    if (!finite) {
      if (++nonfinite_run >= cfg.nonfinite_patience) {
        nlohmann::json diag = {{"iteration", it},
                               {"batch_index", it - 1},
                               {"consecutive_nonfinite_batches", nonfinite_run},
                               {"last_finite_smoothed_total", ema0 + ema1}};
        throw NumericalFailure("training aborted: non-finite loss for " + std::to_string(nonfinite_run) +
                                   " consecutive batches (batch " + std::to_string(it - 1) + ")",
                               diag.dump());
      }
      continue;
    }
    nonfinite_run = 0;
    adam_step(adam, params, g);
    scatter(nets, params);

    if (!ema_init) {
      ema0 = rep.l0;
      ema1 = rep.l1;
      ema_init = true;
    } else {
      ema0 += cfg.ema * (rep.l0 - ema0);
      ema1 += cfg.ema * (rep.l1 - ema1);
    }

    if (it % cfg.log_every == 0 || it == cfg.iterations) {
      const double val = validation_loss();
      result.history.push_back({it, ema0, ema1, ema0 + ema1, val});
      if (val < result.best_validation) {
        result.best_validation = val;
        result.best_iteration = it;
        best = models;
      }
    }
  }
  if (!std::isfinite(result.best_validation)) throw NumericalFailure("training produced no finite validation loss");
  models = std::move(best);
  if (mode == TrainMode::Fmrc) models.encoder.freeze_output_statistics(xs(train_idx, Eigen::all));
  if (mode == TrainMode::FixedEncoder) models.encoder = *frozen_encoder;
  return result;
}

FmrcLossReport evaluate_loss(const TrainedModels& trained, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                             std::uint64_t seed, int repeats) {
  if (repeats < 1) throw InvalidArgument("repeats must be >= 1");
  TrainedModels models = trained;
  if (models.mode != TrainMode::Full && !same_norm(models.encoder.input_norm, models.norm))
    models.encoder = rebase_encoder(models.encoder, models.norm);
  const Eigen::MatrixXd xs = models.norm.apply(x);
  const Eigen::MatrixXd ys = models.norm.apply(y);
  constexpr Eigen::Index kChunk = 4096;
  FmrcLossReport acc;
  Rng rng(seed);
  for (int r = 0; r < repeats; ++r) {
    for (Eigen::Index start = 0; start < xs.rows(); start += kChunk) {
      const Eigen::Index n = std::min(kChunk, xs.rows() - start);
      const FlowNoise noise = FlowNoise::draw(n, static_cast<int>(xs.cols()), rng.engine()());
      const auto rep = batch_loss(models, xs.middleRows(start, n), ys.middleRows(start, n), noise, nullptr, {});
      acc.l0 += rep.l0 * static_cast<double>(n);
      acc.l1 += rep.l1 * static_cast<double>(n);
    }
  }
  const double denom = static_cast<double>(xs.rows()) * repeats;
  acc.l0 /= denom;
  acc.l1 /= denom;
  acc.total = acc.l0 + acc.l1;
  acc.batch_size = xs.rows();
  return acc;
}

// --- sampling ----------------------------------------------------------------------

std::string to_string(OdeMethod m) { return m == OdeMethod::Euler ? "euler" : "rk4"; }

OdeMethod ode_method_from_string(const std::string& s) {
  if (s == "euler") return OdeMethod::Euler;
  if (s == "rk4") return OdeMethod::Rk4;
  throw InvalidArgument("unknown ODE method '" + s + "'");
}

Eigen::MatrixXd sample_flow(const VelocityFieldModel& v, const Eigen::MatrixXd& conditions,
                            const OdeSolverConfig& solver) {
  if (conditions.cols() != v.condition_dim) throw InvalidArgument("sample_flow: condition width mismatch");
  Rng rng(solver.seed);
  Eigen::MatrixXd y0 = rng.normal_matrix(conditions.rows(), v.state_dim);
  return integrate_flow([&](double s, const Eigen::MatrixXd& y) { return v.evaluate(s, y, conditions); },
                        std::move(y0), solver);
}

Eigen::MatrixXd sample_flow(const VelocityFieldModel& v, const Eigen::RowVectorXd& condition, Eigen::Index n,
                            const OdeSolverConfig& solver) {
  if (condition.size() != v.condition_dim) throw InvalidArgument("sample_flow: condition width mismatch");
  return sample_flow(v, Eigen::MatrixXd(condition.replicate(n, 1)), solver);
}

Eigen::MatrixXd generate(const TrainedModels& models, Direction direction, const Eigen::MatrixXd& points,
                         const OdeSolverConfig& solver) {
  const Eigen::MatrixXd zs = models.norm.apply(points);
  const auto& v = direction == Direction::Forward ? models.v0 : models.v1;
  return models.norm.invert(sample_flow(v, models.condition(direction, zs), solver));
}

// --- persistence -------------------------------------------------------------------

namespace {

nlohmann::json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

nlohmann::json norm_json(const Standardizer& s) { return {{"mean", vec_json(s.mean)}, {"std", vec_json(s.std)}}; }

Standardizer json_norm(const nlohmann::json& j) { return {json_vec(j.at("mean")), json_vec(j.at("std"))}; }

}  // namespace

nlohmann::json Manifest::to_json() const {
  return {{"mode", mode},       {"encoder", encoder},           {"v0", v0},
          {"v1", v1},           {"pairs", pairs},               {"dataset_hash", dataset_hash},
          {"final_loss", final_loss}, {"iterations", iterations}, {"extra", extra}};
}

Manifest Manifest::from_json(const nlohmann::json& j) {
  Manifest m;
  m.mode = j.at("mode").get<std::string>();
  m.encoder = j.at("encoder").get<std::string>();
  m.v0 = j.at("v0").get<std::string>();
  m.v1 = j.at("v1").get<std::string>();
  m.pairs = j.value("pairs", std::string{});
  m.dataset_hash = j.value("dataset_hash", std::string{});
  m.final_loss = j.value("final_loss", 0.0);
  m.iterations = j.value("iterations", std::int64_t{0});
  m.extra = j.value("extra", nlohmann::json::object());
  return m;
}

void save_encoder(const std::filesystem::path& path, const EncoderModel& encoder) {
  nn::save_checkpoint(path, encoder.net,
                      {{"role", "encoder"},
                       {"input_norm", norm_json(encoder.input_norm)},
                       {"output_mean", vec_json(encoder.output_mean)},
                       {"output_std", vec_json(encoder.output_std)}});
}

EncoderModel load_encoder(const std::filesystem::path& path) {
  auto [net, meta] = nn::load_checkpoint(path);
  if (meta.value("role", std::string{}) != "encoder") throw IoError(path.string() + ": not an encoder checkpoint");
  EncoderModel e;
  e.net = std::move(net);
  e.input_norm = json_norm(meta.at("input_norm"));
  e.output_mean = json_vec(meta.at("output_mean"));
  e.output_std = json_vec(meta.at("output_std"));
  e.validate();
  return e;
}

void save_velocity(const std::filesystem::path& path, const VelocityFieldModel& v, const Standardizer& norm) {
  nn::save_checkpoint(path, v.net,
                      {{"role", "velocity"},
                       {"direction", v.direction == Direction::Forward ? "forward" : "backward"},
                       {"state_dim", v.state_dim},
                       {"condition_dim", v.condition_dim},
                       {"s_frequencies", v.s_frequencies},
                       {"state_norm", norm_json(norm)}});
}

VelocityFieldModel load_velocity(const std::filesystem::path& path, Standardizer* norm) {
  auto [net, meta] = nn::load_checkpoint(path);
  if (meta.value("role", std::string{}) != "velocity") throw IoError(path.string() + ": not a velocity checkpoint");
  VelocityFieldModel v;
  v.net = std::move(net);
  v.direction = meta.at("direction").get<std::string>() == "forward" ? Direction::Forward : Direction::Backward;
  v.state_dim = meta.at("state_dim").get<int>();
  v.condition_dim = meta.at("condition_dim").get<int>();
  v.s_frequencies = meta.at("s_frequencies").get<int>();
  v.validate();
  if (norm) *norm = json_norm(meta.at("state_norm"));
  return v;
}

void save_models(const std::filesystem::path& dir, const TrainedModels& models, const Manifest& manifest,
                 bool skip_encoder) {
  std::filesystem::create_directories(dir);
  if (!skip_encoder && !manifest.encoder.empty()) save_encoder(dir / manifest.encoder, models.encoder);
  save_velocity(dir / manifest.v0, models.v0, models.norm);
  save_velocity(dir / manifest.v1, models.v1, models.norm);
  io::write_json(dir / "manifest.json", manifest.to_json());
}

TrainedModels load_models(const std::filesystem::path& manifest_path, Manifest* manifest) {
  const Manifest m = Manifest::from_json(io::read_json(manifest_path));
  const auto dir = manifest_path.parent_path();
  TrainedModels models;
  models.mode = train_mode_from_string(m.mode);
  if (!m.encoder.empty()) models.encoder = load_encoder(dir / m.encoder);
  models.v0 = load_velocity(dir / m.v0, &models.norm);
  models.v1 = load_velocity(dir / m.v1);
  if (manifest) *manifest = m;
  return models;
}

std::string hash_file(const std::filesystem::path& path) {
  std::ostringstream ss;
  ss << std::hex << fnv1a64(io::read_file(path));
  return ss.str();
}

}  // namespace fmrc::flow
