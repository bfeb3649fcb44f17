#include "motionssm/errors.hpp"
#include "motionssm/metrics.hpp"
#include "motionssm/synth.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace motionssm;

namespace {

bool same(const Image& a, const Image& b) { return a.rows() == b.rows() && a.cols() == b.cols() && (a == b).all(); }

SynthScenario short_scenario(std::uint64_t seed, Eigen::Index T = 40) { return default_scenario(seed, T); }

}  // namespace

TEST_CASE("make_phantom: deterministic, disjoint nonempty regions") {
  const Frame a = make_phantom(48, 40, 3), b = make_phantom(48, 40, 3), c = make_phantom(48, 40, 4);
  CHECK(same(a.values, b.values));
  CHECK((*a.labels == *b.labels).all());
  CHECK_FALSE(same(a.values, c.values));
  const LabelImage& l = *a.labels;
  CHECK((l == kLabelPool).count() > 0);
  CHECK((l == kLabelRing).count() > 0);
  CHECK((l == 0).count() > 0);
  CHECK(((l == kLabelPool) && (l == kLabelRing)).count() == 0);
  CHECK(l.maxCoeff() <= kLabelRing);
  CHECK_THROWS_AS(make_phantom(31, 40, 0), PreconditionError);
  CHECK_NOTHROW(make_phantom(32, 32, 0));
}

TEST_CASE("make_phantom: ring Dice with itself after identity warp is 1") {
  const Frame p = make_phantom(64, 64, 9);
  const Frame w = warp(p, DeformField(VectorField::zero(64, 64)));
  CHECK(dice(mask_of(*w.labels, kLabelRing), mask_of(*p.labels, kLabelRing)) == 1.0);
  CHECK(same(w.values, p.values));
}

TEST_CASE("default scenario: dimensions and calibration") {
  const SynthScenario s = default_scenario(0);
  CHECK(s.lgssm.state_dim() == 16);
  CHECK(s.lgssm.obs_dim() == 8);
  CHECK(s.basis.size() == 8);
  CHECK(s.T == 275);
  CHECK(s.sigma_g == 2.0);
  CHECK_NOTHROW(s.validate());
  CHECK(calibration_min_det(s) > 0.1);
  // unit marginal variance of x
  const LgssmParams<double> p = s.params();
  CHECK(((p.C * p.C.transpose() + p.R).diagonal().array() - 1.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("scenario validation") {
  SynthScenario s = short_scenario(1);
  s.basis.pop_back();
  CHECK_THROWS_AS(s.validate(), DimensionError);
  s = short_scenario(1);
  s.phantom.labels.reset();
  CHECK_THROWS_AS(s.validate(), PreconditionError);
  s = short_scenario(1);
  s.regime_shift = RegimeShift{5, Eigen::MatrixXd::Identity(3, 3)};
  CHECK_THROWS_AS(s.validate(), DimensionError);
  CHECK_THROWS_AS(decode(short_scenario(1), Eigen::VectorXd::Zero(3)), DimensionError);
}

TEST_CASE("synth_sequence: zero noise gives identity deformations") {
  SynthScenario s = short_scenario(2, 6);
  s.lgssm.Q.setZero();
  s.lgssm.Sigma0.setZero();
  s.lgssm.mu0.setZero();
  s.obs_noise = 0;
  const SynthOutput out = synth_sequence(s);
  for (Eigen::Index t = 0; t < s.T; ++t) {
    CHECK(out.deformations[std::size_t(t)].x.abs().maxCoeff() == 0.0);
    CHECK(out.deformations[std::size_t(t)].y.abs().maxCoeff() == 0.0);
    CHECK(same(out.frames[std::size_t(t)].values, s.phantom.values));
    CHECK((out.masks[std::size_t(t)] == *s.phantom.labels).all());
  }
}

TEST_CASE("synth_sequence: construction identities and determinism") {
  const SynthScenario s = short_scenario(3, 12);
  const SynthOutput a = synth_sequence(s), b = synth_sequence(s);
  REQUIRE(a.frames.size() == 12);
  CHECK(a.deformations.size() == 12);
  CHECK(a.masks.size() == 12);
  CHECK(a.latents.rows() == 12);
  CHECK(a.observations.rows() == 12);
  for (std::size_t t = 0; t < 12; ++t) {
    const Frame w = warp(s.phantom, a.deformations[t]);
    CHECK(same(a.frames[t].values, w.values));
    CHECK((a.masks[t] == *w.labels).all());
    CHECK(same(a.frames[t].values, b.frames[t].values));
    CHECK(same(a.deformations[t].x, decode(s, a.observations.row(Eigen::Index(t)).transpose()).x));
  }
  CHECK(a.observations == b.observations);
  // without a shift the latents are lgssm simulate with the same seed
  const Simulation<double> sim = simulate(s.params(), s.T, s.seed);
  CHECK(sim.latents == a.latents);
  CHECK(sim.observations == a.observations);
}

TEST_CASE("synth_sequence: regime shift swaps A from the given step") {
  const SynthScenario base = short_scenario(4, 30);
  const SynthScenario shifted = with_regime_shift(base, 10, 1.6);
  REQUIRE(shifted.regime_shift);
  const Simulation<double> a = simulate_scenario(base), b = simulate_scenario(shifted);
  CHECK(a.latents.topRows(10) == b.latents.topRows(10));
  CHECK((a.latents.row(10) - b.latents.row(10)).norm() > 1e-3);
  // same noise: the step-10 difference is exactly (A' - A) z_9
  const Eigen::VectorXd z9 = a.latents.row(9).transpose();
  CHECK((b.latents.row(10).transpose() - a.latents.row(10).transpose() -
         (shifted.regime_shift->A - base.lgssm.A) * z9).norm() < 1e-12);
  // faster rotation with the same decay
  CHECK(std::abs(shifted.regime_shift->A.block(0, 0, 2, 2).determinant() - base.lgssm.A.block(0, 0, 2, 2).determinant()) < 1e-12);
  CHECK(std::atan2(shifted.regime_shift->A(1, 0), shifted.regime_shift->A(0, 0)) ==
        doctest::Approx(1.6 * std::atan2(base.lgssm.A(1, 0), base.lgssm.A(0, 0))).epsilon(1e-12));
}

TEST_CASE("synth_sequence: non-diffeomorphic deformation is reported with its step") {
  SynthScenario s = short_scenario(5, 20);
  for (auto& b : s.basis) {
    b.x *= 40;
    b.y *= 40;
  }
  try {
    synth_sequence(s);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("default scenario: positive Jacobian determinant at every step, 100 seeds") {
  double worst = INFINITY;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SynthScenario s = default_scenario(seed);
    const Simulation<double> sim = simulate_scenario(s);
    for (Eigen::Index t = 0; t < s.T; ++t)
      worst = std::min(worst, jacobian_det(decode(s, sim.observations.row(t).transpose())).minCoeff());
  }
  CHECK(worst > 0);
}

TEST_CASE("filtering the emitted x recovers z at the predicted accuracy") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const SynthScenario s = default_scenario(seed, 2000);
    const Simulation<double> sim = simulate_scenario(s);
    const auto filt = kalman_filter(s.params(), ObsSeq<double>::fully_observed(sim.observations));
    double err = 0, predicted = 0;
    for (Eigen::Index t = 0; t < s.T; ++t) {
      err += (filt.filtered[std::size_t(t)].mean - sim.latents.row(t).transpose()).squaredNorm();
      predicted += filt.filtered[std::size_t(t)].cov.trace();
    }
    CHECK(std::sqrt(err / predicted) == doctest::Approx(1.0).epsilon(0.2));
  }
}

TEST_CASE("imputation: errors") {
  const SynthScenario s = short_scenario(6, 20);
  CHECK_THROWS_AS(run_imputation_experiment(s, 25), PreconditionError);
  CHECK_THROWS_AS(run_imputation_experiment(s, 7), PreconditionError);
  CHECK_THROWS_AS(run_imputation_experiment(s, 0), PreconditionError);
  CHECK_NOTHROW(run_imputation_experiment(s, 6));
}

TEST_CASE("imputation: near-noiseless observed steps are reproduced") {
  SynthScenario s = short_scenario(7, 30);
  s.obs_noise = 1e-6;
  const Simulation<double> sim = simulate_scenario(s);
  ObsSeq<double> obs = ObsSeq<double>::fully_observed(sim.observations);
  for (Eigen::Index t = 0; t < s.T; ++t) obs.observed[std::size_t(t)] = t % 5 == 0;
  const auto imputed = impute(s.params(), obs);
  double sq = 0;
  int n = 0;
  for (Eigen::Index t = 0; t < s.T; t += 5) {
    sq += (imputed[std::size_t(t)].mean - sim.observations.row(t).transpose()).squaredNorm();
    n += int(s.lgssm.obs_dim());
  }
  CHECK(std::sqrt(sq / n) < 1e-4);
  const ImputationReport r = run_imputation_experiment(s, 1);
  CHECK(r.latent_rmse < 1e-4);
  CHECK(r.median_dice > 0.999);
  CHECK(r.dice_degradation == 0.0);
}

TEST_CASE("imputation: every 10th sample beats zero-order hold") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const SynthScenario s = default_scenario(seed);
    const Simulation<double> sim = simulate_scenario(s);
    ObsSeq<double> obs = ObsSeq<double>::fully_observed(sim.observations);
    for (Eigen::Index t = 0; t < s.T; ++t) obs.observed[std::size_t(t)] = t % 10 == 0;
    const auto imputed = impute(s.params(), obs);
    Eigen::MatrixXd means(s.T, 8), hold(s.T, 8);
    for (Eigen::Index t = 0; t < s.T; ++t) {
      means.row(t) = imputed[std::size_t(t)].mean.transpose();
      hold.row(t) = sim.observations.row(t - t % 10);
    }
    CHECK(rmse(means, sim.observations) < rmse(hold, sim.observations));
  }
}

TEST_CASE("imputation: report structure and ordering on one seed") {
  const SynthScenario s = default_scenario(11);
  const auto reports = run_imputation_experiment(s, std::vector<int>{1, 5, 10});
  REQUIRE(reports.size() == 3);
  for (const auto& r : reports) {
    CHECK(r.dice.size() == std::size_t(s.T));
    CHECK(r.hd95.size() == std::size_t(s.T));
    CHECK(r.median_dice == percentile(r.dice, 50));
    CHECK(r.dice_degradation == doctest::Approx(reports[0].median_dice - r.median_dice));
  }
  CHECK(reports[0].latent_rmse < reports[1].latent_rmse);
  CHECK(reports[1].latent_rmse < reports[2].latent_rmse);
  CHECK(reports[0].median_dice >= reports[2].median_dice);
  // single-stride overload agrees with the batch run
  const ImputationReport five = run_imputation_experiment(s, 5);
  CHECK(five.dice == reports[1].dice);
  CHECK(five.dice_degradation == reports[1].dice_degradation);
}

TEST_CASE("online experiment: preconditions") {
  const SynthScenario s = default_scenario(0, 300);
  CHECK_THROWS_AS(run_online_experiment(s), PreconditionError);  // no shift, no split
  CHECK_THROWS_AS(run_online_experiment(with_regime_shift(s, 150)), PreconditionError);  // T < 150 + 300 + 50
  OnlineConfig cfg;
  cfg.dice_ahead = 60;
  CHECK_THROWS_AS(run_online_experiment(with_regime_shift(default_scenario(0, 500), 150), cfg), PreconditionError);
}

TEST_CASE("online experiment: no adaptation steps leaves the models equal; deterministic") {
  OnlineConfig cfg;
  cfg.adapt_steps = 0;
  cfg.pretrain.max_iters = 3;
  cfg.horizon = 20;
  cfg.forecast = 10;
  cfg.dice_ahead = 5;
  const SynthScenario s = with_regime_shift(default_scenario(2, 60), 30);
  const OnlineReport r = run_online_experiment(s, cfg);
  CHECK(r.adapted.loglik == r.frozen.loglik);
  CHECK(r.adapted.rmse == r.frozen.rmse);
  CHECK(r.adapted.dice == r.frozen.dice);
  CHECK(r.forecast_start == 30);
  cfg.adapt_steps = 5;
  const OnlineReport a = run_online_experiment(s, cfg), b = run_online_experiment(s, cfg);
  CHECK(a.adapted.loglik == b.adapted.loglik);
  CHECK(a.window_loglik == b.window_loglik);
  CHECK(a.window_loglik.size() == 5);
  CHECK(a.adapted.loglik != a.frozen.loglik);
  CHECK(a.adapted.dice > 0);
  CHECK(a.adapted.dice <= 1);
}

TEST_CASE("online experiment: forecast scores match evaluate_forecast") {
  OnlineConfig cfg;
  cfg.adapt_steps = 0;
  cfg.pretrain.max_iters = 0;
  cfg.horizon = 20;
  cfg.forecast = 10;
  cfg.dice_ahead = 10;
  const SynthScenario s = with_regime_shift(default_scenario(3, 60), 30);
  const OnlineReport r = run_online_experiment(s, cfg);
  const Simulation<double> sim = simulate_scenario(s);
  const auto all = ObsSeq<double>::fully_observed(sim.observations);
  const ForecastScore f = evaluate_forecast(s.params(), all.slice(10, 20), all.slice(30, 10));
  CHECK(r.frozen.loglik == doctest::Approx(f.loglik).epsilon(1e-10));
  CHECK(r.frozen.rmse == doctest::Approx(f.rmse).epsilon(1e-10));
}
