#include <doctest.h>

#include "fmrc/flowmatch.hpp"
#include "fmrc/random.hpp"

#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>

using namespace fmrc;
using namespace fmrc::flow;

namespace {

TransitionPairSet toy_pairs(Eigen::Index n, std::uint64_t seed) {
  SdeConfig cfg;
  cfg.n_steps = n + 1100;
  cfg.seed = seed;
  const auto traj = euler_maruyama_simulate(PotentialSpec::double_well_toy(), cfg, Eigen::Vector2d(1.0, 0.0));
  return extract_pairs(traj, 100);
}

TrainConfig small_config(std::int64_t iterations, std::uint64_t seed) {
  TrainConfig c;
  c.iterations = iterations;
  c.batch_size = 64;
  c.log_every = 10;
  c.seed = seed;
  c.model.encoder_hidden = {8};
  c.model.velocity_hidden = {16};
  return c;
}

std::vector<Eigen::Index> indices(Eigen::Index n) {
  std::vector<Eigen::Index> idx(n);
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  return idx;
}

}  // namespace

TEST_CASE("interpolant hits its endpoints and is linear") {
  Rng rng(1);
  const Eigen::MatrixXd a = rng.normal_matrix(4, 3), b = rng.normal_matrix(4, 3);
  CHECK(interpolate(0.0, a, b) == a);
  CHECK(interpolate(1.0, a, b) == b);
  CHECK((interpolate(0.25, a, b) - (0.75 * a + 0.25 * b)).norm() < 1e-15);
  CHECK_THROWS_AS(interpolate(1.5, a, b), InvalidArgument);
  const Eigen::VectorXd s = Eigen::Vector4d(0.0, 0.5, 1.0, 0.1);
  const auto rows = interpolate_rows(s, a, b);
  CHECK(rows.row(0) == a.row(0));
  CHECK(rows.row(2) == b.row(2));
}

TEST_CASE("time features are sinusoids at doubling frequencies") {
  const Eigen::VectorXd s = Eigen::Vector2d(0.25, 0.0);
  const auto f = time_features(s, 4);
  CHECK(f.cols() == 8);
  for (int k = 0; k < 4; ++k) {
    CHECK(f(0, 2 * k) == doctest::Approx(std::sin(std::pow(2.0, k) * std::numbers::pi * 0.25)));
    CHECK(f(0, 2 * k + 1) == doctest::Approx(std::cos(std::pow(2.0, k) * std::numbers::pi * 0.25)));
    CHECK(f(1, 2 * k + 1) == 1.0);
  }
}

TEST_CASE("velocity field input width is 2F + D + c") {
  const auto v = VelocityFieldModel::make(3, 1, Direction::Forward, {16}, nn::Activation::Silu, 4, 0);
  CHECK(v.input_width() == 12);
  CHECK(v.net.input_width() == 12);
  CHECK(v.net.output_width() == 3);
  CHECK_THROWS_AS(EncoderModel::make(3, 3, {4}, nn::Activation::Tanh, 0), InvalidArgument);
}

TEST_CASE("loss of zero fields equals the mean squared displacement") {
  Rng rng(2);
  const Eigen::MatrixXd x = rng.normal_matrix(32, 3), y = rng.normal_matrix(32, 3);
  const auto noise = FlowNoise::draw(32, 3, 5);
  auto enc = EncoderModel::make(3, 1, {4}, nn::Activation::Tanh, 1);
  auto v0 = VelocityFieldModel::make(3, 1, Direction::Forward, {8}, nn::Activation::Silu, 4, 2);
  auto v1 = VelocityFieldModel::make(3, 1, Direction::Backward, {8}, nn::Activation::Silu, 4, 3);
  v0.net.set_zero();
  v1.net.set_zero();
  const auto rep = fmrc_minibatch_loss(enc, v0, v1, x, y, noise);
  CHECK(rep.l0 == doctest::Approx((y - noise.y_noise).rowwise().squaredNorm().mean()).epsilon(1e-14));
  CHECK(rep.l1 == doctest::Approx((x - noise.x_noise).rowwise().squaredNorm().mean()).epsilon(1e-14));
  CHECK(rep.total == doctest::Approx(rep.l0 + rep.l1));
}

TEST_CASE("loss matches a per-row evaluation") {
  Rng rng(3);
  const Eigen::MatrixXd x = rng.normal_matrix(16, 2), y = rng.normal_matrix(16, 2);
  const auto noise = FlowNoise::draw(16, 2, 6);
  const auto enc = EncoderModel::make(2, 1, {5}, nn::Activation::Tanh, 1);
  const auto v0 = VelocityFieldModel::make(2, 1, Direction::Forward, {8}, nn::Activation::Silu, 4, 2);
  const auto v1 = VelocityFieldModel::make(2, 1, Direction::Backward, {8}, nn::Activation::Silu, 4, 3);
  double l0 = 0.0, l1 = 0.0;
  for (Eigen::Index n = 0; n < 16; ++n) {
    const double s = noise.s(n);
    const Eigen::MatrixXd rx = enc.net.forward(x.row(n)), ry = enc.net.forward(y.row(n));
    const Eigen::MatrixXd iy = (1 - s) * noise.y_noise.row(n) + s * y.row(n);
    const Eigen::MatrixXd ix = (1 - s) * noise.x_noise.row(n) + s * x.row(n);
    l0 += (v0.evaluate(s, iy, rx) - (y.row(n) - noise.y_noise.row(n))).squaredNorm();
    l1 += (v1.evaluate(s, ix, ry) - (x.row(n) - noise.x_noise.row(n))).squaredNorm();
  }
  const auto rep = fmrc_minibatch_loss(enc, v0, v1, x, y, noise);
  CHECK(rep.l0 == doctest::Approx(l0 / 16).epsilon(1e-13));
  CHECK(rep.l1 == doctest::Approx(l1 / 16).epsilon(1e-13));
}

TEST_CASE("FMRC loss gradients agree with central differences") {
  Rng rng(4);
  const Eigen::MatrixXd x = rng.normal_matrix(8, 3), y = rng.normal_matrix(8, 3);
  const auto noise = FlowNoise::draw(8, 3, 7);
  const auto enc = EncoderModel::make(3, 1, {6}, nn::Activation::Tanh, 1);
  const auto v0 = VelocityFieldModel::make(3, 1, Direction::Forward, {10}, nn::Activation::Silu, 4, 2);
  const auto v1 = VelocityFieldModel::make(3, 1, Direction::Backward, {10}, nn::Activation::Silu, 4, 3);
  const LossWeights w{0.7, 1.3};
  FlowGradients g{nn::MlpGrad(enc.net), nn::MlpGrad(v0.net), nn::MlpGrad(v1.net)};
  fmrc_minibatch_loss(enc, v0, v1, x, y, noise, &g, true, w);

  const auto ne = enc.net.parameter_count(), n0 = v0.net.parameter_count(), n1 = v1.net.parameter_count();
  Eigen::VectorXd p(ne + n0 + n1), analytic(ne + n0 + n1);
  p << enc.net.parameters(), v0.net.parameters(), v1.net.parameters();
  analytic << g.encoder.flatten(), g.v0.flatten(), g.v1.flatten();
  auto loss = [&](const Eigen::VectorXd& q) {
    auto e2 = enc;
    auto a2 = v0;
    auto b2 = v1;
    e2.net.set_parameters(q.segment(0, ne));
    a2.net.set_parameters(q.segment(ne, n0));
    b2.net.set_parameters(q.segment(ne + n0, n1));
    const auto r = fmrc_minibatch_loss(e2, a2, b2, x, y, noise);
    return w.l0 * r.l0 + w.l1 * r.l1;
  };
  const auto idx = indices(p.size());
  const auto rep = nn::gradient_check(loss, p, analytic, idx);
  CHECK(rep.max_relative_error < 1e-6);

  FlowGradients frozen{nn::MlpGrad(enc.net), nn::MlpGrad(v0.net), nn::MlpGrad(v1.net)};
  fmrc_minibatch_loss(enc, v0, v1, x, y, noise, &frozen, false, w);
  CHECK(frozen.encoder.flatten().isZero());
  CHECK(frozen.v0.flatten() == g.v0.flatten());
}

TEST_CASE("full baseline gradients agree with central differences") {
  Rng rng(5);
  const Eigen::MatrixXd x = rng.normal_matrix(8, 2), y = rng.normal_matrix(8, 2);
  const auto noise = FlowNoise::draw(8, 2, 8);
  const auto v0 = VelocityFieldModel::make(2, 2, Direction::Forward, {10}, nn::Activation::Tanh, 4, 2);
  const auto v1 = VelocityFieldModel::make(2, 2, Direction::Backward, {10}, nn::Activation::Tanh, 4, 3);
  FlowGradients g{nn::MlpGrad(), nn::MlpGrad(v0.net), nn::MlpGrad(v1.net)};
  full_fm_minibatch_loss(v0, v1, x, y, noise, &g);
  const auto n0 = v0.net.parameter_count(), n1 = v1.net.parameter_count();
  Eigen::VectorXd p(n0 + n1), analytic(n0 + n1);
  p << v0.net.parameters(), v1.net.parameters();
  analytic << g.v0.flatten(), g.v1.flatten();
  auto loss = [&](const Eigen::VectorXd& q) {
    auto a2 = v0;
    auto b2 = v1;
    a2.net.set_parameters(q.head(n0));
    b2.net.set_parameters(q.tail(n1));
    return full_fm_minibatch_loss(a2, b2, x, y, noise).total;
  };
  const auto idx = indices(p.size());
  CHECK(nn::gradient_check(loss, p, analytic, idx).max_relative_error < 1e-6);
  const auto bad = VelocityFieldModel::make(2, 1, Direction::Forward, {4}, nn::Activation::Tanh, 4, 2);
  CHECK_THROWS_AS(full_fm_minibatch_loss(bad, v1, x, y, noise), InvalidArgument);
}

TEST_CASE("non-finite inputs raise a numerical failure with diagnostics") {
  Eigen::MatrixXd x = Eigen::MatrixXd::Ones(4, 2), y = Eigen::MatrixXd::Ones(4, 2);
  auto v0 = VelocityFieldModel::make(2, 2, Direction::Forward, {4}, nn::Activation::Tanh, 4, 2);
  auto v1 = VelocityFieldModel::make(2, 2, Direction::Backward, {4}, nn::Activation::Tanh, 4, 3);
  auto params = v0.net.parameters();
  params(0) = std::numeric_limits<double>::quiet_NaN();
  v0.net.set_parameters(params);
  try {
    full_fm_minibatch_loss(v0, v1, x, y, FlowNoise::draw(4, 2, 1));
    FAIL("expected NumericalFailure");
  } catch (const NumericalFailure& e) {
    CHECK(nlohmann::json::parse(e.diagnostics()).contains("batch_size"));
  }
}

TEST_CASE("training is deterministic and reduces the loss") {
  const auto data = toy_pairs(3000, 1);
  const auto a = train(data, TrainMode::Fmrc, small_config(150, 9));
  const auto b = train(data, TrainMode::Fmrc, small_config(150, 9));
  CHECK(a.models.v0.net.parameters() == b.models.v0.net.parameters());
  CHECK(a.models.encoder.net.parameters() == b.models.encoder.net.parameters());
  CHECK(a.history.size() == 15);
  const auto init = train(data, TrainMode::Fmrc, small_config(0, 9));
  CHECK(init.history.empty());
  CHECK(a.best_validation < init.best_validation);
  const auto e0 = evaluate_loss(init.models, data.x, data.y, 3);
  const auto e1 = evaluate_loss(a.models, data.x, data.y, 3);
  CHECK(e1.total < e0.total);
  CHECK(evaluate_loss(a.models, data.x, data.y, 3).total == e1.total);
}

TEST_CASE("zero iterations return the initialized models") {
  const auto data = toy_pairs(500, 2);
  const auto cfg = small_config(0, 4);
  const auto res = train(data, TrainMode::Full, cfg);
  const auto init = initialize_models(2, TrainMode::Full, cfg, data.normalization);
  CHECK(res.models.v0.net.parameters() == init.v0.net.parameters());
  CHECK(res.models.v1.net.parameters() == init.v1.net.parameters());
}

TEST_CASE("fixed-encoder training leaves the encoder untouched") {
  const auto data = toy_pairs(2000, 3);
  auto enc = EncoderModel::coordinate_projection(2, 0);
  enc.input_norm = data.normalization;
  const auto res = train(data, TrainMode::FixedEncoder, small_config(50, 5), &enc);
  CHECK(res.models.encoder.net.parameters() == enc.net.parameters());
  CHECK(res.models.encoder.input_norm.mean == enc.input_norm.mean);
  CHECK_THROWS_AS(train(data, TrainMode::FixedEncoder, small_config(5, 5)), InvalidArgument);
}

TEST_CASE("a frozen encoder with its own standardization is applied in its own units") {
  const auto data = toy_pairs(2000, 4);
  auto enc = EncoderModel::make(2, 1, {4}, nn::Activation::Tanh, 3);
  enc.input_norm = {Eigen::Vector2d(0.3, -0.2), Eigen::Vector2d(2.0, 0.5)};
  const auto res = train(data, TrainMode::FixedEncoder, small_config(20, 5), &enc);
  const Eigen::MatrixXd pts = data.x.topRows(10);
  const Eigen::MatrixXd c = res.models.condition(Direction::Forward, res.models.norm.apply(pts));
  CHECK((c - enc.raw(enc.input_norm.apply(pts))).norm() < 1e-12);
}

TEST_CASE("RK4 integrates linear fields to high order") {
  OdeSolverConfig solver;
  solver.n_steps = 20;
  const Eigen::MatrixXd y0 = Eigen::MatrixXd::Constant(3, 2, 1.5);
  const auto y = integrate_flow([](double, const Eigen::MatrixXd& v) { return v; }, y0, solver);
  CHECK((y - std::exp(1.0) * y0).cwiseAbs().maxCoeff() < 1e-6);
  solver.method = OdeMethod::Euler;
  const auto ye = integrate_flow([](double, const Eigen::MatrixXd& v) { return v; }, y0, solver);
  CHECK((ye - std::pow(1.05, 20) * y0).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(
      integrate_flow([](double, const Eigen::MatrixXd& v) { return Eigen::MatrixXd(v * 1e300); }, y0, solver),
      NumericalFailure);
}

TEST_CASE("the Gaussian optimal velocity field transports N(0,1) to N(mu, sigma^2)") {
  // For y1 ~ N(mu, sigma^2) and y0 ~ N(0,1): E[y1 - y0 | y_s = y] =
  // mu + (s sigma^2 - (1 - s)) (y - s mu) / ((1 - s)^2 + s^2 sigma^2).
  const double mu = 2.0, sigma = 0.5;
  auto field = [&](double s, const Eigen::MatrixXd& y) -> Eigen::MatrixXd {
    const double den = (1 - s) * (1 - s) + s * s * sigma * sigma;
    return ((s * sigma * sigma - (1 - s)) / den * (y.array() - s * mu) + mu).matrix();
  };
  OdeSolverConfig solver;
  solver.n_steps = 200;
  Eigen::MatrixXd z(5, 1);
  z << -2.0, -1.0, 0.0, 1.0, 2.0;
  const auto y = integrate_flow(field, z, solver);
  CHECK((y.array() - (mu + sigma * z.array())).abs().maxCoeff() < 1e-8);
}

TEST_CASE("models round-trip through checkpoints and manifest") {
  const auto data = toy_pairs(1000, 6);
  const auto res = train(data, TrainMode::Fmrc, small_config(20, 7));
  const auto dir = std::filesystem::temp_directory_path() / "fmrc_test_models";
  std::filesystem::remove_all(dir);
  Manifest m;
  m.mode = "fmrc";
  m.pairs = "pairs.fmrc";
  m.final_loss = 1.25;
  m.iterations = 20;
  save_models(dir, res.models, m);
  Manifest back;
  const auto loaded = load_models(dir / "manifest.json", &back);
  CHECK(back.final_loss == 1.25);
  CHECK(back.iterations == 20);
  CHECK(loaded.mode == TrainMode::Fmrc);
  OdeSolverConfig solver;
  solver.seed = 3;
  const Eigen::MatrixXd pts = data.x.topRows(16);
  CHECK(generate(loaded, Direction::Forward, pts, solver) == generate(res.models, Direction::Forward, pts, solver));
  CHECK(evaluate_rc(loaded.encoder, pts) == evaluate_rc(res.models.encoder, pts));
  std::filesystem::remove_all(dir);
}

TEST_CASE("reported RC values are standardized over the training data") {
  const auto data = toy_pairs(3000, 7);
  const auto res = train(data, TrainMode::Fmrc, small_config(30, 8));
  const Eigen::MatrixXd rc = evaluate_rc(res.models.encoder, data.x);
  CHECK(std::abs(rc.mean()) < 0.1);
  CHECK((rc.array() - rc.mean()).square().mean() == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("unconditional flow-matching loss and gradients") {
  Rng rng(12);
  const Eigen::MatrixXd data = rng.normal_matrix(9, 2), noise = rng.normal_matrix(9, 2);
  const Eigen::VectorXd s = rng.uniform_vector(9);
  auto v = VelocityFieldModel::make(2, 0, Direction::Forward, {7}, nn::Activation::Silu, 3, 4);
  auto zero = v;
  zero.net.set_parameters(Eigen::VectorXd::Zero(v.net.parameter_count()));
  CHECK(unconditional_fm_minibatch_loss(zero, data, noise, s) ==
        doctest::Approx((data - noise).rowwise().squaredNorm().mean()).epsilon(1e-14));

  nn::MlpGrad g(v.net);
  unconditional_fm_minibatch_loss(v, data, noise, s, &g);
  auto loss = [&](const Eigen::VectorXd& q) {
    auto v2 = v;
    v2.net.set_parameters(q);
    return unconditional_fm_minibatch_loss(v2, data, noise, s);
  };
  const auto idx = indices(v.net.parameter_count());
  CHECK(nn::gradient_check(loss, v.net.parameters(), g.flatten(), idx).max_relative_error < 1e-6);
  const auto conditional = VelocityFieldModel::make(2, 1, Direction::Forward, {7}, nn::Activation::Silu, 3, 4);
  CHECK_THROWS_AS(unconditional_fm_minibatch_loss(conditional, data, noise, s), InvalidArgument);
}
