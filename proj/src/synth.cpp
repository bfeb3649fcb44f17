#include "motionssm/synth.hpp"

#include "motionssm/errors.hpp"
#include "motionssm/metrics.hpp"
#include "motionssm/random.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <tuple>

namespace motionssm {

namespace {

constexpr Eigen::Index kSide = 64;
constexpr Eigen::Index kStateDim = 16;
constexpr Eigen::Index kObsDim = 8;
constexpr double kRadius = 0.98;       // per-step decay of every rotation block
constexpr double kTargetMinDet = 0.2;  // at the calibration corners

double median(std::vector<double> v) { return percentile(std::move(v), 50); }

Eigen::MatrixXd rotation_blocks(const Eigen::VectorXd& angles, double radius) {
  const Eigen::Index n = angles.size();
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(2 * n, 2 * n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double c = std::cos(angles(k)), s = std::sin(angles(k));
    A.block(2 * k, 2 * k, 2, 2) << c, -s, s, c;
  }
  return radius * A;
}

// Recover the block angles of a matrix built by rotation_blocks.
Eigen::VectorXd block_angles(const Eigen::MatrixXd& A) {
  Eigen::VectorXd out(A.rows() / 2);
  for (Eigen::Index k = 0; k < out.size(); ++k) out(k) = std::atan2(A(2 * k + 1, 2 * k), A(2 * k, 2 * k));
  return out;
}

VelocityField scaled(const VelocityField& v, double a) { return VelocityField(Image(v.x * a), Image(v.y * a)); }

// Low-frequency bumps around the phantom centre: dilation, rotation and two
// translations, repeated with shifted centres. Each has max norm 1.
std::vector<VelocityField> unit_basis(Eigen::Index h, Eigen::Index w, Eigen::Index n) {
  const double cy = 0.5 * double(h - 1), cx = 0.5 * double(w - 1);
  const double scale = double(std::min(h, w)) / double(kSide);
  std::vector<VelocityField> out;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double ang = 2.0 * std::numbers::pi * double(i) / double(n);
    const double by = cy + 6.0 * scale * std::sin(ang), bx = cx + 6.0 * scale * std::cos(ang);
    const double width = (12.0 + 2.0 * double(i % 3)) * scale;
    VelocityField v(VectorField::zero(h, w));
    for (Eigen::Index r = 0; r < h; ++r)
      for (Eigen::Index c = 0; c < w; ++c) {
        const double dy = double(r) - by, dx = double(c) - bx;
        const double g = std::exp(-(dx * dx + dy * dy) / (2 * width * width));
        switch (i % 4) {
          case 0:  // dilation
            v.x(r, c) = dx / width * g;
            v.y(r, c) = dy / width * g;
            break;
          case 1:  // rotation
            v.x(r, c) = -dy / width * g;
            v.y(r, c) = dx / width * g;
            break;
          case 2:
            v.x(r, c) = std::cos(ang) * g;
            v.y(r, c) = std::sin(ang) * g;
            break;
          default:
            v.x(r, c) = -std::sin(ang) * g;
            v.y(r, c) = std::cos(ang) * g;
        }
      }
    out.push_back(scaled(v, 1.0 / v.max_norm()));
  }
  return out;
}

// x vectors whose deformations must stay diffeomorphic: every sign pattern of
// +-3 sigma (all 2^d corners for d <= 10), else the axes plus random corners.
std::vector<Eigen::VectorXd> calibration_points(const Eigen::VectorXd& sigma) {
  const Eigen::Index d = sigma.size();
  std::vector<Eigen::VectorXd> pts;
  if (d <= 10) {
    for (long mask = 0; mask < (1L << d); ++mask) {
      Eigen::VectorXd x(d);
      for (Eigen::Index i = 0; i < d; ++i) x(i) = ((mask >> i) & 1 ? 3.0 : -3.0) * sigma(i);
      pts.push_back(x);
    }
    return pts;
  }
  for (Eigen::Index i = 0; i < d; ++i)
    for (double s : {-3.0, 3.0}) {
      Eigen::VectorXd x = Eigen::VectorXd::Zero(d);
      x(i) = s * sigma(i);
      pts.push_back(x);
    }
  Rng rng(0x63616c6962ULL);
  for (int k = 0; k < 1024; ++k) {
    Eigen::VectorXd x(d);
    for (Eigen::Index i = 0; i < d; ++i) x(i) = (uniform01(rng) < 0.5 ? -3.0 : 3.0) * sigma(i);
    pts.push_back(x);
  }
  return pts;
}

VelocityField combine(const std::vector<VelocityField>& basis, const Eigen::VectorXd& x) {
  VelocityField v(VectorField::zero(basis.front().rows(), basis.front().cols()));
  for (std::size_t i = 0; i < basis.size(); ++i) {
    const double a = x(static_cast<Eigen::Index>(i));
    if (a == 0) continue;
    v.x += a * basis[i].x;
    v.y += a * basis[i].y;
  }
  return v;
}

double min_det_over(const std::vector<VelocityField>& basis, const std::vector<Eigen::VectorXd>& pts, double sigma_g,
                    int n_squarings) {
  double lo = INFINITY;
  for (const auto& x : pts) {
    const DeformField phi = exp_svf(gaussian_smooth(combine(basis, x), sigma_g), n_squarings);
    lo = std::min(lo, jacobian_det(phi).minCoeff());
  }
  return lo;
}

// Largest amplitude (bisection) keeping the corner determinant above target.
double calibrate_amplitude(Eigen::Index h, Eigen::Index w, double sigma_g, int n_squarings) {
  static std::mutex mutex;
  static std::map<std::tuple<Eigen::Index, Eigen::Index, double, int>, double> cache;
  const auto key = std::make_tuple(h, w, sigma_g, n_squarings);
  {
    std::lock_guard<std::mutex> lock(mutex);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  const auto basis = unit_basis(h, w, kObsDim);
  const auto pts = calibration_points(Eigen::VectorXd::Ones(kObsDim));
  auto ok = [&](double a) {
    std::vector<VelocityField> b;
    for (const auto& f : basis) b.push_back(scaled(f, a));
    return min_det_over(b, pts, sigma_g, n_squarings) >= kTargetMinDet;
  };
  double lo = 0.0, hi = 1.0;
  while (ok(hi)) {
    lo = hi;
    hi *= 2;
  }
  for (int it = 0; it < 12; ++it) {
    const double mid = 0.5 * (lo + hi);
    (ok(mid) ? lo : hi) = mid;
  }
  std::lock_guard<std::mutex> lock(mutex);
  cache.emplace(key, lo);
  return lo;
}

Eigen::VectorXd observation_sigma(const LgssmParams<double>& p, Eigen::Index T) {
  Eigen::MatrixXd P = p.Sigma0;
  Eigen::VectorXd out = Eigen::VectorXd::Zero(p.obs_dim());
  for (Eigen::Index t = 0; t < T; ++t) {
    P = p.A * P * p.A.transpose() + p.Q;
    const Eigen::VectorXd var = (p.C * P * p.C.transpose() + p.R).diagonal();
    out = out.cwiseMax(var.cwiseSqrt());
  }
  return out;
}

LabelImage ground_truth_labels(const SynthScenario& s, const Eigen::VectorXd& x) {
  return warp(*s.phantom.labels, decode(s, x));
}

}  // namespace

LgssmParams<double> SynthScenario::params() const {
  LgssmParams<double> p = lgssm;
  p.R = obs_noise * obs_noise * Eigen::MatrixXd::Identity(lgssm.obs_dim(), lgssm.obs_dim());
  return p;
}

void SynthScenario::validate() const {
  lgssm.check_dimensions();
  if (static_cast<Eigen::Index>(basis.size()) != lgssm.obs_dim()) {
    throw DimensionError("synth: basis has " + std::to_string(basis.size()) + " fields, d_x is " +
                         std::to_string(lgssm.obs_dim()));
  }
  phantom.check();
  if (!phantom.labels) throw PreconditionError("synth: phantom has no label mask");
  for (const auto& b : basis) {
    b.check();
    if (b.rows() != phantom.rows() || b.cols() != phantom.cols()) {
      throw DimensionError("synth: basis field size differs from the phantom");
    }
  }
  if (T < 1) throw PreconditionError("synth: T must be >= 1");
  if (!(sigma_g >= 0) || !(obs_noise >= 0)) throw PreconditionError("synth: sigma_g and obs_noise must be >= 0");
  if (n_squarings < 0) throw PreconditionError("synth: n_squarings must be >= 0");
  if (regime_shift) {
    if (regime_shift->A.rows() != lgssm.state_dim() || regime_shift->A.cols() != lgssm.state_dim()) {
      throw DimensionError("synth: regime-shift A must be d_z x d_z");
    }
    if (regime_shift->step < 0 || regime_shift->step >= T) {
      throw PreconditionError("synth: regime-shift step outside [0, T)");
    }
  }
}

Frame make_phantom(Eigen::Index h, Eigen::Index w, std::uint64_t seed) {
  if (h < 32 || w < 32) throw PreconditionError("make_phantom: H and W must be >= 32");
  Rng rng = Rng(seed).split(0x70);
  auto u = [&](double a, double b) { return a + (b - a) * uniform01(rng); };
  const double cy = 0.5 * double(h - 1) + u(-1.5, 1.5), cx = 0.5 * double(w - 1) + u(-1.5, 1.5);
  const double ry = 0.30 * double(h) * u(0.92, 1.08), rx = 0.26 * double(w) * u(0.92, 1.08);
  const double inner = u(0.58, 0.66);
  const double theta = u(-0.4, 0.4);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double ring_level = u(0.45, 0.6), pool_level = u(0.85, 1.0);

  Image values(h, w);
  LabelImage labels(h, w);
  for (Eigen::Index r = 0; r < h; ++r)
    for (Eigen::Index c = 0; c < w; ++c) {
      const double dy = double(r) - cy, dx = double(c) - cx;
      const double a = (ct * dx + st * dy) / rx, b = (-st * dx + ct * dy) / ry;
      const double e = std::sqrt(a * a + b * b);
      std::uint8_t label = 0;
      double v = 0.1 + 0.08 * double(c) / double(w) + 0.05 * double(r) / double(h);
      if (e < inner) {
        label = kLabelPool;
        v = pool_level - 0.2 * (e / inner) * (e / inner);
      } else if (e < 1.0) {
        label = kLabelRing;
        v = ring_level + 0.08 * std::sin(std::atan2(b, a));
      }
      values(r, c) = v;
      labels(r, c) = label;
    }
  return Frame(gaussian_smooth(values, 0.7), labels);
}

SynthScenario default_scenario(std::uint64_t seed, Eigen::Index T) {
  Rng rng = Rng(seed).split(0x5C);
  std::normal_distribution<double> normal;
  SynthScenario s;
  s.seed = seed;
  s.T = T;

  // eight damped rotations, periods of 25 to 60 steps; stationary cov is I
  Eigen::VectorXd angles(kStateDim / 2);
  for (Eigen::Index k = 0; k < angles.size(); ++k) angles(k) = 2 * std::numbers::pi / (25.0 + 35.0 * uniform01(rng));
  LgssmParams<double>& p = s.lgssm;
  p.A = rotation_blocks(angles, kRadius);
  p.Q = (1 - kRadius * kRadius) * Eigen::MatrixXd::Identity(kStateDim, kStateDim);
  p.C.resize(kObsDim, kStateDim);
  for (Eigen::Index i = 0; i < p.C.size(); ++i) p.C.data()[i] = normal(rng);
  // unit marginal variance for every x_i
  for (Eigen::Index i = 0; i < kObsDim; ++i) p.C.row(i) *= std::sqrt(1 - s.obs_noise * s.obs_noise) / p.C.row(i).norm();
  p.R = s.obs_noise * s.obs_noise * Eigen::MatrixXd::Identity(kObsDim, kObsDim);
  p.mu0 = Eigen::VectorXd::Zero(kStateDim);
  p.Sigma0 = Eigen::MatrixXd::Identity(kStateDim, kStateDim);

  s.phantom = make_phantom(kSide, kSide, seed);
  const double amp = calibrate_amplitude(kSide, kSide, s.sigma_g, s.n_squarings);
  for (const auto& b : unit_basis(kSide, kSide, kObsDim)) s.basis.push_back(scaled(b, amp));
  return s;
}

SynthScenario with_regime_shift(SynthScenario s, Eigen::Index step, double speedup) {
  if (s.lgssm.state_dim() % 2 != 0) throw PreconditionError("with_regime_shift: d_z must be even");
  const double radius = std::sqrt(std::abs(s.lgssm.A.block(0, 0, 2, 2).determinant()));
  s.regime_shift = RegimeShift{step, rotation_blocks(speedup * block_angles(s.lgssm.A), radius)};
  return s;
}

DeformField decode(const SynthScenario& s, const Eigen::VectorXd& x) {
  if (x.size() != static_cast<Eigen::Index>(s.basis.size())) {
    throw DimensionError("decode: x has " + std::to_string(x.size()) + " entries, basis has " +
                         std::to_string(s.basis.size()));
  }
  return exp_svf(gaussian_smooth(combine(s.basis, x), s.sigma_g), s.n_squarings);
}

double calibration_min_det(const SynthScenario& s) {
  s.validate();
  return min_det_over(s.basis, calibration_points(observation_sigma(s.params(), s.T)), s.sigma_g, s.n_squarings);
}

Simulation<double> simulate_scenario(const SynthScenario& s) {
  s.validate();
  const LgssmParams<double> p = s.params();
  if (!s.regime_shift) return simulate(p, s.T, s.seed);
  // same draw order as simulate, with A swapped from the shift step on
  const Eigen::MatrixXd L0 = psd_factor<double>(p.Sigma0, "synth: Sigma0");
  const Eigen::MatrixXd LQ = psd_factor<double>(p.Q, "synth: Q");
  const Eigen::MatrixXd LR = psd_factor<double>(p.R, "synth: R");
  Rng rng(s.seed);
  Simulation<double> out{Eigen::MatrixXd(s.T, p.state_dim()), Eigen::MatrixXd(s.T, p.obs_dim())};
  Eigen::VectorXd z = p.mu0 + L0 * standard_normal(rng, p.state_dim());
  for (Eigen::Index t = 0; t < s.T; ++t) {
    const Eigen::MatrixXd& A = t >= s.regime_shift->step ? s.regime_shift->A : p.A;
    z = A * z + LQ * standard_normal(rng, p.state_dim());
    const Eigen::VectorXd x = p.C * z + LR * standard_normal(rng, p.obs_dim());
    out.latents.row(t) = z.transpose();
    out.observations.row(t) = x.transpose();
  }
  return out;
}

SynthOutput synth_sequence(const SynthScenario& s) {
  const Simulation<double> sim = simulate_scenario(s);
  SynthOutput out;
  out.latents = sim.latents;
  out.observations = sim.observations;
  for (Eigen::Index t = 0; t < s.T; ++t) {
    DeformField phi = decode(s, sim.observations.row(t).transpose());
    const double det = jacobian_det(phi).minCoeff();
    if (!(det > 0)) {
      throw NumericalError("synth_sequence: deformation at " + detail::step_label(t) +
                           " is not diffeomorphic (min Jacobian det " + std::to_string(det) + ")");
    }
    Frame frame = warp(s.phantom, phi);
    out.masks.push_back(*frame.labels);
    out.frames.push_back(std::move(frame));
    out.deformations.push_back(std::move(phi));
  }
  return out;
}

double label_dice(const LabelImage& a, const LabelImage& b) {
  return 0.5 * (dice(mask_of(a, kLabelPool), mask_of(b, kLabelPool)) +
                dice(mask_of(a, kLabelRing), mask_of(b, kLabelRing)));
}

double label_hd95(const LabelImage& a, const LabelImage& b) {
  return 0.5 * (hd95(mask_of(a, kLabelPool), mask_of(b, kLabelPool)) +
                hd95(mask_of(a, kLabelRing), mask_of(b, kLabelRing)));
}

std::vector<ImputationReport> run_imputation_experiment(const SynthScenario& s, const std::vector<int>& strides) {
  s.validate();
  for (int stride : strides) {
    if (stride < 1) throw PreconditionError("imputation: stride must be >= 1");
    if (s.T < 3 * Eigen::Index(stride)) {
      throw PreconditionError("imputation: T = " + std::to_string(s.T) + " is too short for stride " +
                              std::to_string(stride) + " (need T >= 3 stride)");
    }
  }
  const Simulation<double> sim = simulate_scenario(s);
  const LgssmParams<double> p = s.params();
  std::vector<LabelImage> truth;
  for (Eigen::Index t = 0; t < s.T; ++t) truth.push_back(ground_truth_labels(s, sim.observations.row(t).transpose()));

  std::vector<ImputationReport> out;
  for (int stride : strides) {
    ObsSeq<double> obs = ObsSeq<double>::fully_observed(sim.observations);
    for (Eigen::Index t = 0; t < s.T; ++t) obs.observed[std::size_t(t)] = t % stride == 0;
    const GaussianSeq<double> imputed = impute(p, obs);
    ImputationReport r;
    r.stride = stride;
    Eigen::MatrixXd means(s.T, p.obs_dim());
    for (Eigen::Index t = 0; t < s.T; ++t) {
      means.row(t) = imputed[std::size_t(t)].mean.transpose();
      const LabelImage est = ground_truth_labels(s, imputed[std::size_t(t)].mean);
      r.dice.push_back(label_dice(est, truth[std::size_t(t)]));
      r.hd95.push_back(label_hd95(est, truth[std::size_t(t)]));
    }
    r.median_dice = median(r.dice);
    r.median_hd95 = median(r.hd95);
    r.latent_rmse = rmse(means, sim.observations);
    out.push_back(std::move(r));
  }
  // degradation is relative to stride 1, computed here when not requested
  double base = NAN;
  for (const auto& r : out)
    if (r.stride == 1) base = r.median_dice;
  if (std::isnan(base)) base = run_imputation_experiment(s, std::vector<int>{1}).front().median_dice;
  for (auto& r : out) r.dice_degradation = base - r.median_dice;
  return out;
}

ImputationReport run_imputation_experiment(const SynthScenario& s, int stride) {
  return run_imputation_experiment(s, std::vector<int>{stride}).front();
}

OnlineReport run_online_experiment(const SynthScenario& s, const OnlineConfig& cfg) {
  s.validate();
  Eigen::Index split = cfg.split;
  if (split < 0) {
    if (!s.regime_shift) throw PreconditionError("online experiment: no regime shift and no split given");
    split = s.regime_shift->step;
  }
  if (cfg.adapt_steps < 0 || cfg.horizon < 1 || cfg.forecast < 1 || cfg.dice_ahead < 1 ||
      cfg.dice_ahead > cfg.forecast) {
    throw PreconditionError("online experiment: need adapt_steps >= 0, N >= 1, 1 <= dice_ahead <= H");
  }
  const Eigen::Index start = split + cfg.adapt_steps;
  if (split < 1 || s.T < start + cfg.forecast || start < cfg.horizon) {
    throw PreconditionError("online experiment: T = " + std::to_string(s.T) + " must be >= split + " +
                            std::to_string(cfg.adapt_steps) + " + H = " + std::to_string(start + cfg.forecast) +
                            " with a full window before the forecast");
  }
  const Simulation<double> sim = simulate_scenario(s);
  const ObsSeq<double> all = ObsSeq<double>::fully_observed(sim.observations);

  const ParamVector init = from_params(s.params(), cfg.free);
  const ParamVector frozen = fit_offline(init, {all.slice(0, split)}, cfg.pretrain).params;

  LearnerConfig online_cfg = cfg.online;
  online_cfg.horizon = cfg.horizon;
  OnlineState state(frozen);
  for (Eigen::Index t = split; t < start; ++t) state = online_step(std::move(state), sim.observations.row(t).transpose(), online_cfg);

  const ObsSeq<double> past = all.slice(start - cfg.horizon, cfg.horizon);
  const ObsSeq<double> future = all.slice(start, cfg.forecast);
  const LabelImage truth = ground_truth_labels(s, sim.observations.row(start + cfg.dice_ahead - 1).transpose());
  auto score = [&](const ParamVector& v) {
    const LgssmParams<double> p = to_params(v);
    const ForecastScore f = evaluate_forecast(p, past, future);
    const auto filt = kalman_filter(p, past);
    const auto fc = forecast(p, filt.filtered.back(), cfg.dice_ahead);
    const LabelImage est = ground_truth_labels(s, fc.observations.back().mean);
    return ModelScore{f.loglik, f.rmse, label_dice(est, truth)};
  };
  OnlineReport out;
  out.adapted = score(state.params);
  out.frozen = score(frozen);
  out.window_loglik = state.window_loglik;
  out.forecast_start = start;
  return out;
}

}  // namespace motionssm
