#pragma once

/// @file lgssm.hpp Exact inference for the linear Gaussian state-space model
///
///   z_0 ~ N(mu0, Sigma0)
///   z_t = A z_{t-1} + w_t,   w_t ~ N(0, Q)      t = 1..T
///   x_t = C z_t + v_t,       v_t ~ N(0, R)
///
/// All routines are free functions over value types, templated on the scalar
/// type. Sequences are indexed 0..T-1 in code; index t holds step t+1 of the
/// model above. Log-likelihoods are in nats.

#include "motionssm/errors.hpp"
#include "motionssm/linalg.hpp"
#include "motionssm/random.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

namespace motionssm {

template <typename Scalar = double>
struct LgssmParams {
  Mat<Scalar> A;       ///< state transition, d_z x d_z
  Mat<Scalar> Q;       ///< process noise covariance, d_z x d_z
  Mat<Scalar> C;       ///< observation matrix, d_x x d_z
  Mat<Scalar> R;       ///< observation noise covariance, d_x x d_x
  Vec<Scalar> mu0;     ///< initial state mean, d_z
  Mat<Scalar> Sigma0;  ///< initial state covariance, d_z x d_z

  Eigen::Index state_dim() const { return A.rows(); }
  Eigen::Index obs_dim() const { return C.rows(); }

  /// Throws DimensionError when the blocks disagree on d_z / d_x.
  void check_dimensions() const {
    const Eigen::Index dz = A.rows();
    const Eigen::Index dx = C.rows();
    if (dz < 1 || dx < 1) {
      throw DimensionError("lgssm: state and observation dimensions must be positive");
    }
    auto expect = [](bool ok, const char* what) {
      if (!ok) throw DimensionError(std::string("lgssm: inconsistent dimensions of ") + what);
    };
    expect(A.cols() == dz, "A");
    expect(Q.rows() == dz && Q.cols() == dz, "Q");
    expect(C.cols() == dz, "C");
    expect(R.rows() == dx && R.cols() == dx, "R");
    expect(mu0.size() == dz, "mu0");
    expect(Sigma0.rows() == dz && Sigma0.cols() == dz, "Sigma0");
  }

  /// Dimension check plus symmetric-PSD check of Q, R, Sigma0 (tolerance 1e-10).
  void validate() const {
    check_dimensions();
    if (!A.allFinite() || !C.allFinite() || !mu0.allFinite()) {
      throw NumericalError("lgssm: non-finite entries in A, C or mu0");
    }
    if (!is_symmetric_psd(Q)) throw NumericalError("lgssm: Q is not symmetric positive semi-definite");
    if (!is_symmetric_psd(R)) throw NumericalError("lgssm: R is not symmetric positive semi-definite");
    if (!is_symmetric_psd(Sigma0)) throw NumericalError("lgssm: Sigma0 is not symmetric positive semi-definite");
  }

  template <typename Other>
  LgssmParams<Other> cast() const {
    return {A.template cast<Other>(),  Q.template cast<Other>(),   C.template cast<Other>(),
            R.template cast<Other>(),  mu0.template cast<Other>(), Sigma0.template cast<Other>()};
  }
};

template <typename Scalar = double>
struct Gaussian {
  Vec<Scalar> mean;
  Mat<Scalar> cov;

  Eigen::Index dim() const { return mean.size(); }
};

template <typename Scalar = double>
using GaussianSeq = std::vector<Gaussian<Scalar>>;

/// Observation sequence with an explicit availability mask. Rows whose mask
/// entry is false are never read.
template <typename Scalar = double>
struct ObsSeq {
  Mat<Scalar> values;          ///< T x d_x
  std::vector<bool> observed;  ///< length T, true = available
  long t0_index = 0;

  static ObsSeq fully_observed(Mat<Scalar> values, long t0 = 0) {
    std::vector<bool> mask(static_cast<std::size_t>(values.rows()), true);
    return {std::move(values), std::move(mask), t0};
  }

  Eigen::Index length() const { return values.rows(); }
  Eigen::Index dim() const { return values.cols(); }
  bool is_observed(Eigen::Index t) const { return observed[static_cast<std::size_t>(t)]; }

  Eigen::Index observed_count() const {
    Eigen::Index n = 0;
    for (bool b : observed) n += b ? 1 : 0;
    return n;
  }

  /// Rows [begin, begin + count).
  ObsSeq slice(Eigen::Index begin, Eigen::Index count) const {
    ObsSeq out;
    out.values = values.middleRows(begin, count);
    out.observed.assign(observed.begin() + begin, observed.begin() + begin + count);
    out.t0_index = t0_index + static_cast<long>(begin);
    return out;
  }

  void check(Eigen::Index d_x) const {
    if (static_cast<Eigen::Index>(observed.size()) != values.rows()) {
      throw DimensionError("obs: mask length " + std::to_string(observed.size()) + " != row count " +
                           std::to_string(values.rows()));
    }
    if (values.cols() != d_x) {
      throw DimensionError("obs: observation dimension " + std::to_string(values.cols()) + " != model d_x " +
                           std::to_string(d_x));
    }
  }
};

/// Concatenate two sequences in time.
template <typename Scalar>
ObsSeq<Scalar> concat(const ObsSeq<Scalar>& head, const ObsSeq<Scalar>& tail) {
  if (head.dim() != tail.dim()) {
    throw DimensionError("obs concat: dimension mismatch");
  }
  ObsSeq<Scalar> out;
  out.values.resize(head.length() + tail.length(), head.dim());
  out.values << head.values, tail.values;
  out.observed = head.observed;
  out.observed.insert(out.observed.end(), tail.observed.begin(), tail.observed.end());
  out.t0_index = head.t0_index;
  return out;
}

template <typename Scalar = double>
struct FilterResult {
  GaussianSeq<Scalar> predicted;  ///< p(z_t | x_{1:t-1})
  GaussianSeq<Scalar> filtered;   ///< p(z_t | x_{1:t})
  Scalar loglik = 0;              ///< log p(observed x), nats
  Vec<Scalar> per_step_loglik;    ///< zero at missing steps
  // Innovation e_t and the covariance actually factorised (including any
  // jitter); empty at missing steps. Used by the backward information pass.
  std::vector<Vec<Scalar>> innovation;
  std::vector<Mat<Scalar>> innovation_cov;

  Eigen::Index length() const { return static_cast<Eigen::Index>(filtered.size()); }
};

template <typename Scalar = double>
struct SmoothResult {
  GaussianSeq<Scalar> smoothed;           ///< p(z_t | x_{1:T})
  std::vector<Mat<Scalar>> pairwise_cov;  ///< Cov(z_{t+1}, z_t | x_{1:T}), length T-1
};

template <typename Scalar = double>
struct ForecastResult {
  GaussianSeq<Scalar> states;        ///< p(z_{T+j} | x_{1:T}), j = 1..k
  GaussianSeq<Scalar> observations;  ///< p(x_{T+j} | x_{1:T})
};

template <typename Scalar = double>
struct Simulation {
  Mat<Scalar> latents;       ///< T x d_z
  Mat<Scalar> observations;  ///< T x d_x
};

namespace detail {

template <typename Scalar>
Gaussian<Scalar> predict_step(const LgssmParams<Scalar>& p, const Gaussian<Scalar>& g) {
  Gaussian<Scalar> out{p.A * g.mean, p.A * g.cov * p.A.transpose() + p.Q};
  symmetrize(out.cov);
  return out;
}

template <typename Scalar>
Gaussian<Scalar> observe(const LgssmParams<Scalar>& p, const Gaussian<Scalar>& state) {
  Gaussian<Scalar> out{p.C * state.mean, p.C * state.cov * p.C.transpose() + p.R};
  symmetrize(out.cov);
  return out;
}

inline std::string step_label(Eigen::Index t) { return "step " + std::to_string(t + 1); }

}  // namespace detail

/// Forward Kalman recursion with Joseph-form covariance updates. Missing steps
/// skip the update and contribute zero log-likelihood.
template <typename Scalar>
FilterResult<Scalar> kalman_filter(const LgssmParams<Scalar>& p, const ObsSeq<Scalar>& obs) {
  p.check_dimensions();
  obs.check(p.obs_dim());
  const Eigen::Index T = obs.length();
  if (T < 1) {
    throw PreconditionError("kalman_filter: empty observation sequence");
  }
  const Eigen::Index dz = p.state_dim();
  const Eigen::Index dx = p.obs_dim();
  const Scalar log_2pi = std::log(Scalar(2) * std::numbers::pi_v<Scalar>);
  const Mat<Scalar> eye = Mat<Scalar>::Identity(dz, dz);

  FilterResult<Scalar> out;
  out.predicted.reserve(static_cast<std::size_t>(T));
  out.filtered.reserve(static_cast<std::size_t>(T));
  out.innovation.resize(static_cast<std::size_t>(T));
  out.innovation_cov.resize(static_cast<std::size_t>(T));
  out.per_step_loglik = Vec<Scalar>::Zero(T);

  Gaussian<Scalar> belief = detail::predict_step(p, Gaussian<Scalar>{p.mu0, p.Sigma0});
  for (Eigen::Index t = 0; t < T; ++t) {
    out.predicted.push_back(belief);
    if (obs.is_observed(t)) {
      const Vec<Scalar> x = obs.values.row(t).transpose();
      const Vec<Scalar> e = x - p.C * belief.mean;
      Mat<Scalar> S = p.C * belief.cov * p.C.transpose() + p.R;
      symmetrize(S);
      Scalar jitter = 0;
      const auto llt = robust_llt<Scalar>(S, "kalman_filter: innovation covariance at " + detail::step_label(t), &jitter);
      if (jitter > Scalar(0)) {
        S.diagonal().array() += jitter;
      }
      const Mat<Scalar> K = llt.solve(p.C * belief.cov).transpose();
      const Mat<Scalar> IKC = eye - K * p.C;
      belief.mean += K * e;
      belief.cov = IKC * belief.cov * IKC.transpose() + K * p.R * K.transpose();
      symmetrize(belief.cov);

      const Vec<Scalar> white = llt.matrixL().solve(e);
      const Scalar ll = Scalar(-0.5) * (Scalar(dx) * log_2pi + log_det(llt) + white.squaredNorm());
      out.per_step_loglik[t] = ll;
      out.innovation[static_cast<std::size_t>(t)] = e;
      out.innovation_cov[static_cast<std::size_t>(t)] = std::move(S);
    }
    out.filtered.push_back(belief);
    if (t + 1 < T) {
      belief = detail::predict_step(p, belief);
    }
  }
  out.loglik = out.per_step_loglik.sum();
  if (!std::isfinite(static_cast<double>(out.loglik))) {
    throw NumericalError("kalman_filter: non-finite log-likelihood");
  }
  return out;
}

/// Rauch-Tung-Striebel backward pass. The last smoothed element is a copy of
/// the last filtered one.
template <typename Scalar>
SmoothResult<Scalar> rts_smooth(const LgssmParams<Scalar>& p, const FilterResult<Scalar>& filt) {
  p.check_dimensions();
  const Eigen::Index T = filt.length();
  if (T < 1 || static_cast<Eigen::Index>(filt.predicted.size()) != T) {
    throw DimensionError("rts_smooth: malformed filter result");
  }
  SmoothResult<Scalar> out;
  out.smoothed.resize(static_cast<std::size_t>(T));
  out.pairwise_cov.resize(static_cast<std::size_t>(T - 1));
  out.smoothed.back() = filt.filtered.back();
  for (Eigen::Index t = T - 2; t >= 0; --t) {
    const auto ut = static_cast<std::size_t>(t);
    const Gaussian<Scalar>& f = filt.filtered[ut];
    const Gaussian<Scalar>& pred_next = filt.predicted[ut + 1];
    const Gaussian<Scalar>& smooth_next = out.smoothed[ut + 1];
    const auto llt = robust_llt<Scalar>(pred_next.cov, "rts_smooth: singular predicted covariance in smoother gain at " +
                                                           detail::step_label(t + 1));
    // J = P_{t|t} Aᵀ P_{t+1|t}^{-1}
    const Mat<Scalar> J = llt.solve(p.A * f.cov).transpose();
    Gaussian<Scalar>& s = out.smoothed[ut];
    s.mean = f.mean + J * (smooth_next.mean - pred_next.mean);
    s.cov = f.cov + J * (smooth_next.cov - pred_next.cov) * J.transpose();
    symmetrize(s.cov);
    out.pairwise_cov[ut] = smooth_next.cov * J.transpose();
  }
  return out;
}

/// Backward information recursion (Bryson-Frazier / de Jong form).
///
/// r[t] = P_{t|t-1}^{-1} (m_{t|T} - m_{t|t-1})
/// N[t] = -P_{t|t-1}^{-1} (P_{t|T} - P_{t|t-1}) P_{t|t-1}^{-1}
///
/// computed without inverting any state covariance, so it stays defined when
/// Q or Sigma0 are singular. Smoothed moments follow as
/// m_{t|T} = m_{t|t-1} + P_{t|t-1} r[t] and P_{t|T} = P_{t|t-1} - P_{t|t-1} N[t] P_{t|t-1}.
template <typename Scalar = double>
struct BackwardInformation {
  std::vector<Vec<Scalar>> r;
  std::vector<Mat<Scalar>> N;
};

template <typename Scalar>
BackwardInformation<Scalar> backward_information(const LgssmParams<Scalar>& p, const ObsSeq<Scalar>& obs,
                                                 const FilterResult<Scalar>& filt) {
  const Eigen::Index T = filt.length();
  const Eigen::Index dz = p.state_dim();
  const Mat<Scalar> eye = Mat<Scalar>::Identity(dz, dz);
  BackwardInformation<Scalar> out;
  out.r.resize(static_cast<std::size_t>(T));
  out.N.resize(static_cast<std::size_t>(T));
  Vec<Scalar> r_next = Vec<Scalar>::Zero(dz);
  Mat<Scalar> N_next = Mat<Scalar>::Zero(dz, dz);
  for (Eigen::Index t = T - 1; t >= 0; --t) {
    const auto ut = static_cast<std::size_t>(t);
    const Vec<Scalar> Ar = p.A.transpose() * r_next;
    const Mat<Scalar> ANA = p.A.transpose() * N_next * p.A;
    if (obs.is_observed(t)) {
      const Mat<Scalar>& S = filt.innovation_cov[ut];
      Eigen::LLT<Mat<Scalar>> llt(S);
      const Mat<Scalar> SinvC = llt.solve(p.C);
      const Mat<Scalar> K = (SinvC * filt.predicted[ut].cov).transpose();
      const Mat<Scalar> L = eye - K * p.C;
      out.r[ut] = p.C.transpose() * llt.solve(filt.innovation[ut]) + L.transpose() * Ar;
      out.N[ut] = p.C.transpose() * SinvC + L.transpose() * ANA * L;
    } else {
      out.r[ut] = Ar;
      out.N[ut] = ANA;
    }
    symmetrize(out.N[ut]);
    r_next = out.r[ut];
    N_next = out.N[ut];
  }
  return out;
}

/// k-step predictive distributions of states and observations from a filtered
/// belief, without observation updates.
template <typename Scalar>
ForecastResult<Scalar> forecast(const LgssmParams<Scalar>& p, const Gaussian<Scalar>& last_filtered, int k) {
  p.check_dimensions();
  if (k < 1) {
    throw PreconditionError("forecast: k must be >= 1");
  }
  if (last_filtered.mean.size() != p.state_dim() || last_filtered.cov.rows() != p.state_dim() ||
      last_filtered.cov.cols() != p.state_dim()) {
    throw DimensionError("forecast: belief dimension does not match d_z");
  }
  ForecastResult<Scalar> out;
  Gaussian<Scalar> belief = last_filtered;
  for (int j = 0; j < k; ++j) {
    belief = detail::predict_step(p, belief);
    out.states.push_back(belief);
    out.observations.push_back(detail::observe(p, belief));
  }
  return out;
}

/// Smoothed predictive distributions p(x_t | observed x) for every step,
/// observed or missing: mean C m_{t|T}, covariance C P_{t|T} Cᵀ + R.
template <typename Scalar>
GaussianSeq<Scalar> impute(const LgssmParams<Scalar>& p, const ObsSeq<Scalar>& obs) {
  if (obs.observed_count() < 1) {
    throw PreconditionError("impute: at least one observed step is required");
  }
  const auto filt = kalman_filter(p, obs);
  const auto smooth = rts_smooth(p, filt);
  GaussianSeq<Scalar> out;
  out.reserve(smooth.smoothed.size());
  for (const auto& s : smooth.smoothed) {
    out.push_back(detail::observe(p, s));
  }
  return out;
}

/// Ancestral sampling. Noise is drawn in the fixed order z_0, then (w_t, v_t)
/// per step, so the output is a pure function of (params, T, seed).
template <typename Scalar>
Simulation<Scalar> simulate(const LgssmParams<Scalar>& p, Eigen::Index T, std::uint64_t seed) {
  p.check_dimensions();
  if (T < 1) {
    throw PreconditionError("simulate: T must be >= 1");
  }
  const Mat<Scalar> L0 = psd_factor<Scalar>(p.Sigma0, "simulate: Sigma0");
  const Mat<Scalar> LQ = psd_factor<Scalar>(p.Q, "simulate: Q");
  const Mat<Scalar> LR = psd_factor<Scalar>(p.R, "simulate: R");
  const Eigen::Index dz = p.state_dim();
  const Eigen::Index dx = p.obs_dim();
  Rng rng(seed);
  Simulation<Scalar> out{Mat<Scalar>(T, dz), Mat<Scalar>(T, dx)};
  Vec<Scalar> z = p.mu0 + L0 * standard_normal(rng, dz).template cast<Scalar>();
  for (Eigen::Index t = 0; t < T; ++t) {
    z = p.A * z + LQ * standard_normal(rng, dz).template cast<Scalar>();
    const Vec<Scalar> x = p.C * z + LR * standard_normal(rng, dx).template cast<Scalar>();
    out.latents.row(t) = z.transpose();
    out.observations.row(t) = x.transpose();
  }
  return out;
}

/// One joint draw z_{1:T} ~ p(z | x) by forward-filtering backward-sampling,
/// together with its log posterior density. Requires non-singular backward
/// conditionals.
template <typename Scalar = double>
struct PosteriorSample {
  Mat<Scalar> latents;  ///< T x d_z
  Scalar log_density = 0;
};

template <typename Scalar>
PosteriorSample<Scalar> sample_posterior(const LgssmParams<Scalar>& p, const FilterResult<Scalar>& filt, Rng& rng) {
  const Eigen::Index T = filt.length();
  const Eigen::Index dz = p.state_dim();
  PosteriorSample<Scalar> out{Mat<Scalar>(T, dz), Scalar(0)};
  auto draw = [&](const Vec<Scalar>& mean, const Mat<Scalar>& cov, const std::string& what) {
    const auto llt = robust_llt<Scalar>(cov, what);
    const Vec<Scalar> z = mean + llt.matrixL() * standard_normal(rng, dz).template cast<Scalar>();
    out.log_density += gaussian_logpdf<Scalar>(z, mean, llt);
    return z;
  };
  Vec<Scalar> z = draw(filt.filtered.back().mean, filt.filtered.back().cov, "sample_posterior: final filtered covariance");
  out.latents.row(T - 1) = z.transpose();
  for (Eigen::Index t = T - 2; t >= 0; --t) {
    const auto ut = static_cast<std::size_t>(t);
    const Gaussian<Scalar>& f = filt.filtered[ut];
    const Gaussian<Scalar>& pred_next = filt.predicted[ut + 1];
    const auto llt = robust_llt<Scalar>(pred_next.cov, "sample_posterior: predicted covariance at " + detail::step_label(t + 1));
    const Mat<Scalar> J = llt.solve(p.A * f.cov).transpose();
    Mat<Scalar> cov = f.cov - J * pred_next.cov * J.transpose();
    symmetrize(cov);
    z = draw(f.mean + J * (z - pred_next.mean), cov, "sample_posterior: backward conditional at " + detail::step_label(t));
    out.latents.row(t) = z.transpose();
  }
  return out;
}

/// log p(x_observed, z_{1:T}) with z_0 marginalised out.
template <typename Scalar>
Scalar log_joint(const LgssmParams<Scalar>& p, const ObsSeq<Scalar>& obs, const Mat<Scalar>& latents) {
  const Eigen::Index T = obs.length();
  Gaussian<Scalar> first = detail::predict_step(p, Gaussian<Scalar>{p.mu0, p.Sigma0});
  const auto llt_first = robust_llt<Scalar>(first.cov, "log_joint: initial predicted covariance");
  const auto llt_Q = robust_llt<Scalar>(p.Q, "log_joint: Q");
  const auto llt_R = robust_llt<Scalar>(p.R, "log_joint: R");
  Scalar total = gaussian_logpdf<Scalar>(latents.row(0).transpose(), first.mean, llt_first);
  for (Eigen::Index t = 0; t < T; ++t) {
    const Vec<Scalar> z = latents.row(t).transpose();
    if (t > 0) {
      total += gaussian_logpdf<Scalar>(z, p.A * latents.row(t - 1).transpose(), llt_Q);
    }
    if (obs.is_observed(t)) {
      total += gaussian_logpdf<Scalar>(obs.values.row(t).transpose(), p.C * z, llt_R);
    }
  }
  return total;
}

}  // namespace motionssm
