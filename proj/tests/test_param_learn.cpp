#include "motionssm/param_learn.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace motionssm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

LgssmParams<double> scalar_model(double A, double Q, double C, double R, double mu0, double S0) {
  LgssmParams<double> p;
  p.A = MatrixXd::Constant(1, 1, A);
  p.Q = MatrixXd::Constant(1, 1, Q);
  p.C = MatrixXd::Constant(1, 1, C);
  p.R = MatrixXd::Constant(1, 1, R);
  p.mu0 = VectorXd::Constant(1, mu0);
  p.Sigma0 = MatrixXd::Constant(1, 1, S0);
  return p;
}

double objective(const ParamVector& v, const ObsSeq<double>& obs) { return kalman_filter(to_params(v), obs).loglik; }

VectorXd central_difference(const ParamVector& v, const ObsSeq<double>& obs, double h) {
  VectorXd fd(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    ParamVector plus = v, minus = v;
    plus.values[i] += h;
    minus.values[i] -= h;
    fd[i] = (objective(plus, obs) - objective(minus, obs)) / (2 * h);
  }
  return fd;
}

double worst_relative_error(const VectorXd& g, const VectorXd& fd) {
  double worst = 0;
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const double scale = std::max({std::abs(g[i]), std::abs(fd[i]), 1e-6});
    worst = std::max(worst, std::abs(g[i] - fd[i]) / scale);
  }
  return worst;
}

}  // namespace

TEST_CASE("pack/unpack round trip is exact and decodes to PSD covariances") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int rep = 0; rep < 50; ++rep) {
    const auto base = oracle::random_params(rng, 3, 2);
    const ParamLayout layout(base);
    ParamVector v{layout, VectorXd(layout.size())};
    for (Eigen::Index i = 0; i < v.size(); ++i) v.values[i] = n(rng);
    CHECK(pack(unpack(v), layout).values == v.values);
    const auto p = to_params(v);
    CHECK_NOTHROW(p.validate());
    Eigen::SelfAdjointEigenSolver<MatrixXd> eq(p.Q);
    CHECK(eq.eigenvalues().minCoeff() > 0);
    // and back through the model parameters
    const auto again = from_params(p, layout);
    CHECK((again.values - v.values).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("layout sizes and fixed blocks") {
  const auto p = scalar_model(0.5, 1, 1, 1, 0, 0);
  const ParamLayout only_mu(p, FreeBlocks::only_mu0());
  CHECK(only_mu.size() == 1);
  const auto v = from_params(p, only_mu);
  CHECK(v.values[0] == 0.0);
  CHECK(to_params(v).Sigma0(0, 0) == 0.0);
  LgssmParams<double> big;
  big.A = MatrixXd::Zero(16, 16);
  big.Q = MatrixXd::Identity(16, 16);
  big.C = MatrixXd::Zero(8, 16);
  big.R = MatrixXd::Identity(8, 8);
  big.mu0 = VectorXd::Zero(16);
  big.Sigma0 = MatrixXd::Identity(16, 16);
  CHECK(ParamLayout(big).size() == 256 + 128 + 16 + 136 + 36 + 136);
  CHECK_THROWS_AS(from_params(scalar_model(1, 0, 1, 1, 0, 1), FreeBlocks::all()), NumericalError);
}

TEST_CASE("loglik_and_grad: value equals the filter log-likelihood") {
  std::mt19937_64 rng(1);
  const auto p = oracle::random_params(rng, 2, 1);
  const auto obs = ObsSeq<double>::fully_observed(simulate(p, 6, 2).observations);
  const auto v = from_params(p);
  CHECK(loglik_and_grad(v, obs).value == kalman_filter(p, obs).loglik);
}

TEST_CASE("loglik_and_grad: symmetric optimum of mu0 with degenerate covariances") {
  const auto p = scalar_model(1, 0, 1, 1, 0, 0);
  const auto v = from_params(p, ParamLayout(p, FreeBlocks::only_mu0()));
  const auto obs = ObsSeq<double>::fully_observed(MatrixXd::Zero(1, 1));
  const auto lg = loglik_and_grad(v, obs);
  REQUIRE(lg.grad.size() == 1);
  CHECK(lg.grad[0] == 0.0);
  // away from the optimum the slope is (x - mu0) / (C² Sigma0 + Q + R) = -mu0
  auto shifted = v;
  shifted.values[0] = 0.5;
  CHECK(loglik_and_grad(shifted, obs).grad[0] == doctest::Approx(-0.5).epsilon(1e-12));
}

TEST_CASE("loglik_and_grad: Fisher gradient matches central differences") {
  std::mt19937_64 rng(31337);
  for (int rep = 0; rep < 50; ++rep) {
    const auto p = oracle::random_params(rng, 2, 1);
    auto obs = ObsSeq<double>::fully_observed(simulate(p, 6, static_cast<std::uint64_t>(rep)).observations);
    if (rep % 3 == 0) obs.observed[3] = false;
    const auto v = from_params(p);
    const auto lg = loglik_and_grad(v, obs);
    const VectorXd fd = central_difference(v, obs, 1e-5);
    CHECK(worst_relative_error(lg.grad, fd) < 1e-4);
  }
}

TEST_CASE("loglik_and_grad: larger model with missing data") {
  std::mt19937_64 rng(4);
  const auto p = oracle::random_params(rng, 3, 2);
  auto obs = ObsSeq<double>::fully_observed(simulate(p, 9, 5).observations);
  obs.observed[0] = obs.observed[4] = false;
  const auto v = from_params(p);
  CHECK(worst_relative_error(loglik_and_grad(v, obs).grad, central_difference(v, obs, 1e-5)) < 1e-4);
}

TEST_CASE("loglik_and_grad: doubled data pulls C upward") {
  std::mt19937_64 rng(12);
  auto p = oracle::random_params(rng, 2, 1);
  const auto sim = simulate(p, 200, 3);
  const auto obs = ObsSeq<double>::fully_observed(sim.observations);
  // Fit C alone on the original data, then evaluate the gradient on doubled data.
  const ParamLayout c_only(p, FreeBlocks{false, true, false, false, false, false});
  LearnerConfig cfg;
  cfg.learning_rate = 0.02;
  cfg.max_iters = 400;
  const auto fit = fit_offline(from_params(p, c_only), {obs}, cfg);
  const auto doubled = ObsSeq<double>::fully_observed(2.0 * sim.observations);
  const auto lg = loglik_and_grad(fit.params, doubled);
  const VectorXd C = fit.params.values;
  // directional derivative along +C
  CHECK(lg.grad.dot(C) > 0);
  const double h = 1e-5;
  ParamVector up = fit.params;
  up.values += h * C;
  ParamVector down = fit.params;
  down.values -= h * C;
  const double fd = (objective(up, doubled) - objective(down, doubled)) / (2 * h);
  CHECK(fd > 0);
  CHECK(lg.grad.dot(C) == doctest::Approx(fd).epsilon(1e-5));
}

TEST_CASE("adam ascent climbs a concave quadratic") {
  LearnerConfig cfg;
  cfg.learning_rate = 0.05;
  VectorXd x = VectorXd::Zero(2);
  AdamState s;
  for (int i = 0; i < 2000; ++i) {
    const VectorXd grad = -(x - VectorXd::Constant(2, 1.5));
    adam_ascent_step(x, grad, s, cfg);
  }
  CHECK((x.array() - 1.5).abs().maxCoeff() < 1e-2);
}

TEST_CASE("fit_offline: empty dataset and divergent configs are errors") {
  const auto p = scalar_model(0.5, 1, 1, 1, 0, 1);
  CHECK_THROWS_AS(fit_offline(from_params(p), {}, LearnerConfig{}), PreconditionError);
  LearnerConfig bad;
  bad.learning_rate = 0;
  const auto obs = ObsSeq<double>::fully_observed(MatrixXd::Zero(3, 1));
  CHECK_THROWS_AS(fit_offline(from_params(p), {obs}, bad), PreconditionError);
}

TEST_CASE("fit_offline: zero iterations returns the input") {
  const auto p = scalar_model(0.5, 1, 1, 1, 0, 1);
  const auto obs = ObsSeq<double>::fully_observed(simulate(p, 20, 1).observations);
  LearnerConfig cfg;
  cfg.max_iters = 0;
  const auto v = from_params(p);
  const auto fit = fit_offline(v, {obs}, cfg);
  CHECK(fit.params.values == v.values);
  CHECK(fit.trace.size() == 1);
}

TEST_CASE("fit_offline: started at the generating parameters it stays put") {
  LgssmParams<double> truth;
  truth.A = (MatrixXd(2, 2) << 0.8, 0.1, 0.0, 0.6).finished();
  truth.Q = Eigen::Vector2d(0.5, 0.3).asDiagonal();
  truth.C = (MatrixXd(2, 2) << 1.0, 0.2, 0.0, 1.0).finished();
  truth.R = 0.1 * MatrixXd::Identity(2, 2);
  truth.mu0 = VectorXd::Zero(2);
  truth.Sigma0 = MatrixXd::Identity(2, 2);
  std::vector<ObsSeq<double>> data;
  for (std::uint64_t s = 0; s < 40; ++s) data.push_back(ObsSeq<double>::fully_observed(simulate(truth, 2000, 900 + s).observations));
  // A fixed full-rank C pins the latent coordinates; with C free, any invertible
  // change of basis is an equally good optimum and Adam wanders along it.
  // mu0 / Sigma0 are informed by only the initial states.
  const ParamLayout layout(truth, FreeBlocks{true, false, false, true, true, false});
  const auto init = from_params(truth, layout);
  LearnerConfig cfg;
  cfg.max_iters = 100;
  const auto fit = fit_offline(init, data, cfg);
  for (std::size_t k = 1; k < fit.best_trace.size(); ++k) CHECK(fit.best_trace[k] >= fit.best_trace[k - 1]);
  CHECK(fit.objective >= fit.trace.front());
  const auto before = to_params(init);
  const auto after = to_params(fit.params);
  auto frob = [](const LgssmParams<double>& q) {
    return std::sqrt(q.A.squaredNorm() + q.C.squaredNorm() + q.Q.squaredNorm() + q.R.squaredNorm());
  };
  LgssmParams<double> diff = after;
  diff.A -= before.A;
  diff.C -= before.C;
  diff.Q -= before.Q;
  diff.R -= before.R;
  CHECK(frob(diff) / frob(before) < 0.01);
}

TEST_CASE("fit_offline: recovers the AR coefficient of a scalar model") {
  const auto truth = scalar_model(0.8, 1, 1, 1, 0, 1);
  const auto obs = ObsSeq<double>::fully_observed(simulate(truth, 2000, 2024).observations);
  auto init = truth;
  init.A(0, 0) = 0.1;
  // C is not identifiable separately from the state scale in one dimension.
  const ParamLayout layout(init, FreeBlocks{true, false, false, true, true, false});
  LearnerConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.max_iters = 600;
  const auto fit = fit_offline(from_params(init, layout), {obs}, cfg);
  CHECK(std::abs(to_params(fit.params).A(0, 0) - 0.8) < 0.05);
}

TEST_CASE("fit_offline: bit-reproducible") {
  std::mt19937_64 rng(5);
  const auto truth = oracle::random_params(rng, 2, 1);
  const auto obs = ObsSeq<double>::fully_observed(simulate(truth, 50, 1).observations);
  LearnerConfig cfg;
  cfg.max_iters = 20;
  const auto a = fit_offline(from_params(truth), {obs, obs}, cfg);
  const auto b = fit_offline(from_params(truth), {obs, obs}, cfg);
  CHECK(a.params.values == b.params.values);
  CHECK(a.trace == b.trace);
}

TEST_CASE("online_step: window semantics and degenerate config") {
  std::mt19937_64 rng(6);
  const auto truth = oracle::random_params(rng, 2, 1);
  const auto sim = simulate(truth, 12, 3);
  LearnerConfig cfg;
  cfg.horizon = 5;
  cfg.inner_steps_per_sample = 0;
  OnlineState state(from_params(truth));
  const VectorXd start = state.params.values;
  for (int t = 0; t < 12; ++t) {
    state = online_step(state, sim.observations.row(t).transpose(), cfg);
    const auto expected = std::min(t + 1, 5);
    REQUIRE(static_cast<int>(state.window.size()) == expected);
    const auto w = state.window_obs();
    CHECK(w.values.bottomRows(1) == sim.observations.row(t));
    CHECK(w.values.topRows(1) == sim.observations.row(t + 1 - expected));
  }
  CHECK(state.params.values == start);
  CHECK(state.window_loglik.size() == 12);
  CHECK_THROWS_AS(online_step(state, VectorXd::Zero(3), cfg), DimensionError);
}

TEST_CASE("online_step: updates are deterministic and move the parameters") {
  std::mt19937_64 rng(8);
  const auto truth = oracle::random_params(rng, 2, 1);
  const auto sim = simulate(truth, 30, 4);
  LearnerConfig cfg;
  cfg.horizon = 10;
  OnlineState a(from_params(truth)), b(from_params(truth));
  for (int t = 0; t < 30; ++t) {
    a = online_step(a, sim.observations.row(t).transpose(), cfg);
    b = online_step(b, sim.observations.row(t).transpose(), cfg);
  }
  CHECK(a.params.values == b.params.values);
  CHECK(a.params.values != from_params(truth).values);
  CHECK(a.optimizer.t == 30);
}

TEST_CASE("evaluate_forecast: exact predictive means give zero RMSE") {
  std::mt19937_64 rng(9);
  const auto p = oracle::random_params(rng, 2, 2);
  const auto past = ObsSeq<double>::fully_observed(simulate(p, 5, 1).observations);
  const auto f = kalman_filter(p, past);
  const auto fc = forecast(p, f.filtered.back(), 4);
  MatrixXd fut(4, 2);
  for (int j = 0; j < 4; ++j) fut.row(j) = fc.observations[j].mean.transpose();
  const auto score = evaluate_forecast(p, past, ObsSeq<double>::fully_observed(fut));
  CHECK(score.rmse == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("evaluate_forecast: scalar constant model") {
  const auto p = scalar_model(1, 0, 1, 1, 0, 0);
  const auto score = evaluate_forecast(p, ObsSeq<double>::fully_observed(MatrixXd::Zero(1, 1)),
                                       ObsSeq<double>::fully_observed(MatrixXd::Zero(1, 1)));
  CHECK(score.loglik == doctest::Approx(-0.9189385332046727).epsilon(1e-13));
  CHECK(score.rmse == 0.0);
}

TEST_CASE("evaluate_forecast: log-likelihood matches the dense conditional density") {
  std::mt19937_64 rng(10);
  for (int rep = 0; rep < 10; ++rep) {
    const auto p = oracle::random_params(rng, 3, 2);
    const auto all = ObsSeq<double>::fully_observed(simulate(p, 9, static_cast<std::uint64_t>(rep)).observations);
    auto past = all.slice(0, 6);
    past.observed[2] = false;
    const auto future = all.slice(6, 3);
    const auto score = evaluate_forecast(p, past, future);
    CHECK(std::abs(score.loglik - oracle::conditional_loglik(p, past, future)) < 1e-8);
    const auto [mean, cov] = oracle::forecast_block(p, past, 3);
    double sq = 0;
    for (int t = 0; t < 3; ++t) sq += (mean.segment(2 * t, 2) - future.values.row(t).transpose()).squaredNorm();
    CHECK(score.rmse == doctest::Approx(std::sqrt(sq / 6)).epsilon(1e-10));
  }
}

TEST_CASE("evaluate_forecast: Monte-Carlo RMSE is reproducible and above the mean-path RMSE on average") {
  std::mt19937_64 rng(11);
  const auto p = oracle::random_params(rng, 2, 1);
  const auto all = ObsSeq<double>::fully_observed(simulate(p, 30, 2).observations);
  const auto past = all.slice(0, 20), future = all.slice(20, 10);
  const auto a = evaluate_forecast(p, past, future, ForecastRmseMode::MonteCarlo, 50, 3);
  const auto b = evaluate_forecast(p, past, future, ForecastRmseMode::MonteCarlo, 50, 3);
  CHECK(a.rmse == b.rmse);
  CHECK(a.loglik == b.loglik);
  CHECK(a.rmse > evaluate_forecast(p, past, future).rmse);
  CHECK_THROWS_AS(evaluate_forecast(p, past, future.slice(0, 0)), PreconditionError);
}
