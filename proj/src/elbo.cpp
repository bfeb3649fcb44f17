#include "motionssm/elbo.hpp"

#include "motionssm/linalg.hpp"
#include "motionssm/parallel.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace motionssm {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

VectorXd stack(const MatrixXd& x) {
  const RowMajor rm = x;
  return Eigen::Map<const VectorXd>(rm.data(), rm.size());
}

MatrixXd unstack(const VectorXd& v, Index T, Index d) {
  return Eigen::Map<const RowMajor>(v.data(), T, d);
}

void write_dense(const MatrixXd& m, VectorXd& out, Index& pos) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) out[pos++] = m(i, j);
}

void read_dense(MatrixXd& m, const VectorXd& in, Index& pos) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = in[pos++];
}

void write_tri(const MatrixXd& m, VectorXd& out, Index& pos) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j <= i; ++j) out[pos++] = m(i, j);
}

void read_tri(MatrixXd& m, const VectorXd& in, Index& pos) {
  m.setZero();
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j <= i; ++j) m(i, j) = in[pos++];
}

Index tri_size(Index d) { return d * (d + 1) / 2; }

// Standard error of the mean with a floor at the rounding resolution of the
// summed log-densities. When q is the exact posterior every sample equals the
// evidence and the spread is pure rounding noise, which carries a bias of the
// same size; the floor keeps "within k standard errors" meaningful there.
MonteCarloValue summarize(const std::vector<double>& draws, double magnitude) {
  const double n = static_cast<double>(draws.size());
  double mean = 0;
  for (double d : draws) mean += d;
  mean /= n;
  double var = 0;
  for (double d : draws) var += (d - mean) * (d - mean);
  var = draws.size() > 1 ? var / (n - 1) : 0.0;
  const double floor = 1e-12 * (1.0 + magnitude);
  return {mean, std::sqrt(var / n + floor * floor)};
}

void check_frames(const Eigen::VectorXd& y0, const MatrixXd& frames, const char* what) {
  if (frames.rows() < 1) throw PreconditionError(std::string(what) + ": empty sequence");
  if (y0.size() != 0 && y0.size() != frames.cols()) {
    throw DimensionError(std::string(what) + ": reference frame has " + std::to_string(y0.size()) +
                         " entries, frames have " + std::to_string(frames.cols()));
  }
}

}  // namespace

SequenceGaussian::SequenceGaussian(MatrixXd mean, MatrixXd cov) : mean_(std::move(mean)), cov_(std::move(cov)) {
  if (cov_.rows() != mean_.size() || cov_.cols() != mean_.size()) {
    throw DimensionError("SequenceGaussian: covariance does not match the stacked mean");
  }
  symmetrize(cov_);
  factor_ = psd_factor<double>(cov_, "SequenceGaussian covariance");
}

MatrixXd SequenceGaussian::sample(Rng& rng) const {
  const VectorXd draw = stack(mean_) + factor_ * standard_normal(rng, factor_.cols());
  return unstack(draw, mean_.rows(), mean_.cols());
}

double SequenceGaussian::log_density(const MatrixXd& x) const {
  if (x.rows() != mean_.rows() || x.cols() != mean_.cols()) throw DimensionError("SequenceGaussian: sample shape");
  const auto llt = robust_llt<double>(cov_, "encoder covariance");
  return gaussian_logpdf<double>(stack(x), stack(mean_), llt);
}

SequenceGaussian FactorizedEncoder::encode_sequence(const VectorXd& y0, const MatrixXd& frames) const {
  const Index T = frames.rows(), d = latent_dim();
  MatrixXd mean(T, d);
  MatrixXd cov = MatrixXd::Zero(T * d, T * d);
  for (Index t = 0; t < T; ++t) {
    const auto g = encode(y0, frames.row(t).transpose());
    if (g.mean.size() != d) throw DimensionError("encoder output dimension differs from latent_dim()");
    mean.row(t) = g.mean.transpose();
    cov.block(t * d, t * d, d, d) = g.cov;
  }
  return {mean, cov};
}

LinearGaussianEncoder::LinearGaussianEncoder(MatrixXd M, VectorXd b, MatrixXd cov)
    : M_(std::move(M)), b_(std::move(b)), log_chol_(log_cholesky<double>(cov, "encoder covariance")) {
  if (b_.size() != M_.rows() || log_chol_.rows() != M_.rows()) {
    throw DimensionError("LinearGaussianEncoder: M, b and covariance disagree on d_x");
  }
}

MatrixXd LinearGaussianEncoder::cov() const { return from_log_cholesky<double>(log_chol_); }

Gaussian<double> LinearGaussianEncoder::encode(const VectorXd&, const VectorXd& frame) const {
  if (frame.size() != M_.cols()) throw DimensionError("LinearGaussianEncoder: frame has the wrong size");
  return {M_ * frame + b_, cov()};
}

VectorXd LinearGaussianEncoder::packed() const {
  VectorXd out(M_.size() + b_.size() + tri_size(log_chol_.rows()));
  Index pos = 0;
  write_dense(M_, out, pos);
  write_dense(b_, out, pos);
  write_tri(log_chol_, out, pos);
  return out;
}

LinearGaussianEncoder LinearGaussianEncoder::with_packed(const VectorXd& v) const {
  if (v.size() != packed().size()) throw DimensionError("LinearGaussianEncoder: packed vector has the wrong size");
  LinearGaussianEncoder out = *this;
  Index pos = 0;
  read_dense(out.M_, v, pos);
  MatrixXd b(out.b_.size(), 1);
  read_dense(b, v, pos);
  out.b_ = b.col(0);
  read_tri(out.log_chol_, v, pos);
  return out;
}

ScaledEncoder::ScaledEncoder(std::shared_ptr<const Encoder> base, double factor) : base_(std::move(base)), factor_(factor) {
  if (!(factor > 0)) throw PreconditionError("ScaledEncoder: factor must be > 0");
}

SequenceGaussian ScaledEncoder::encode_sequence(const VectorXd& y0, const MatrixXd& frames) const {
  const auto g = base_->encode_sequence(y0, frames);
  return {g.mean(), factor_ * g.cov()};
}

LinearDecoder::LinearDecoder(MatrixXd W, MatrixXd R_y)
    : W_(std::move(W)), log_chol_(log_cholesky<double>(R_y, "decoder noise covariance")) {
  if (log_chol_.rows() != W_.rows()) throw DimensionError("LinearDecoder: W and R_y disagree on d_y");
}

MatrixXd LinearDecoder::R_y() const { return from_log_cholesky<double>(log_chol_); }

double LinearDecoder::log_density(const VectorXd& frame, const VectorXd& x, const VectorXd&) const {
  if (frame.size() != W_.rows() || x.size() != W_.cols()) throw DimensionError("LinearDecoder: shape mismatch");
  MatrixXd L = log_chol_.triangularView<Eigen::StrictlyLower>();
  L.diagonal() = log_chol_.diagonal().array().exp();
  const VectorXd white = L.triangularView<Eigen::Lower>().solve(frame - W_ * x);
  const double d = static_cast<double>(frame.size());
  return -0.5 * (d * std::log(2 * std::numbers::pi) + 2 * log_chol_.diagonal().sum() + white.squaredNorm());
}

VectorXd LinearDecoder::packed() const {
  VectorXd out(W_.size() + tri_size(log_chol_.rows()));
  Index pos = 0;
  write_dense(W_, out, pos);
  write_tri(log_chol_, out, pos);
  return out;
}

LinearDecoder LinearDecoder::with_packed(const VectorXd& v) const {
  if (v.size() != packed().size()) throw DimensionError("LinearDecoder: packed vector has the wrong size");
  LinearDecoder out = *this;
  Index pos = 0;
  read_dense(out.W_, v, pos);
  read_tri(out.log_chol_, v, pos);
  return out;
}

LgssmParams<double> LinearStandIn::composite(const LgssmParams<double>& lgssm) const {
  lgssm.check_dimensions();
  if (W.cols() != lgssm.obs_dim() || R_y.rows() != W.rows() || R_y.cols() != W.rows()) {
    throw DimensionError("LinearStandIn: W / R_y do not match the LG-SSM observation dimension");
  }
  LgssmParams<double> out = lgssm;
  out.C = W * lgssm.C;
  out.R = W * lgssm.R * W.transpose() + R_y;
  symmetrize(out.R);
  return out;
}

double LinearStandIn::log_evidence(const LgssmParams<double>& lgssm, const MatrixXd& frames) const {
  return kalman_filter(composite(lgssm), ObsSeq<double>::fully_observed(frames)).loglik;
}

LinearStandIn::Draw LinearStandIn::sample(const LgssmParams<double>& lgssm, Index T, std::uint64_t seed) const {
  composite(lgssm);
  const auto sim = simulate(lgssm, T, seed);
  const MatrixXd L = psd_factor<double>(R_y, "LinearStandIn: R_y");
  Rng rng = Rng(seed).split(1);
  Draw out{sim.observations, MatrixXd(T, W.rows())};
  for (Index t = 0; t < T; ++t) {
    out.y.row(t) = (W * sim.observations.row(t).transpose() + L * standard_normal(rng, W.rows())).transpose();
  }
  return out;
}

SequenceGaussian observation_prior(const LgssmParams<double>& p, Index T) {
  p.check_dimensions();
  const Index dx = p.obs_dim();
  std::vector<VectorXd> m(static_cast<std::size_t>(T));
  std::vector<MatrixXd> P(static_cast<std::size_t>(T));
  VectorXd mean = p.mu0;
  MatrixXd cov = p.Sigma0;
  for (Index t = 0; t < T; ++t) {
    mean = p.A * mean;
    cov = p.A * cov * p.A.transpose() + p.Q;
    m[t] = mean;
    P[t] = cov;
  }
  MatrixXd xm(T, dx);
  MatrixXd xc(T * dx, T * dx);
  for (Index s = 0; s < T; ++s) {
    xm.row(s) = (p.C * m[s]).transpose();
    MatrixXd cross = P[s];  // Cov(z_t, z_s) for t >= s
    for (Index t = s; t < T; ++t) {
      if (t > s) cross = p.A * cross;
      MatrixXd block = p.C * cross * p.C.transpose();
      if (t == s) block += p.R;
      xc.block(t * dx, s * dx, dx, dx) = block;
      xc.block(s * dx, t * dx, dx, dx) = block.transpose();
    }
  }
  return {xm, xc};
}

ExactPosteriorEncoder::ExactPosteriorEncoder(LinearStandIn model, LgssmParams<double> lgssm)
    : model_(std::move(model)), lgssm_(std::move(lgssm)) {
  model_.composite(lgssm_);
}

SequenceGaussian ExactPosteriorEncoder::encode_sequence(const VectorXd& y0, const MatrixXd& frames) const {
  check_frames(y0, frames, "ExactPosteriorEncoder");
  const Index T = frames.rows(), dx = lgssm_.obs_dim(), dy = model_.W.rows();
  if (frames.cols() != dy) throw DimensionError("ExactPosteriorEncoder: frames do not match W");
  const auto prior = observation_prior(lgssm_, T);
  MatrixXd H = MatrixXd::Zero(T * dy, T * dx);
  MatrixXd noise = MatrixXd::Zero(T * dy, T * dy);
  for (Index t = 0; t < T; ++t) {
    H.block(t * dy, t * dx, dy, dx) = model_.W;
    noise.block(t * dy, t * dy, dy, dy) = model_.R_y;
  }
  const MatrixXd& S = prior.cov();
  MatrixXd innov = H * S * H.transpose() + noise;
  symmetrize(innov);
  const auto llt = robust_llt<double>(innov, "ExactPosteriorEncoder: marginal covariance of y");
  const MatrixXd gain = llt.solve(H * S).transpose();
  const VectorXd mean = stack(prior.mean()) + gain * (stack(frames) - H * stack(prior.mean()));
  MatrixXd cov = S - gain * H * S;
  symmetrize(cov);
  return {unstack(mean, T, dx), cov};
}

ElboEstimate elbo_estimate(const Encoder& encoder, const Decoder& decoder, const LgssmParams<double>& lgssm,
                           const VectorXd& y0, const MatrixXd& frames, int n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw PreconditionError("elbo_estimate: n_samples must be >= 1");
  check_frames(y0, frames, "elbo_estimate");
  lgssm.check_dimensions();
  if (encoder.latent_dim() != lgssm.obs_dim()) {
    throw DimensionError("elbo_estimate: encoder latent dimension " + std::to_string(encoder.latent_dim()) +
                         " differs from the LG-SSM observation dimension " + std::to_string(lgssm.obs_dim()));
  }
  const auto q = encoder.encode_sequence(y0, frames);
  const VectorXd s = decoder.features(y0);
  const Rng root(seed);
  const auto n = static_cast<std::size_t>(n_samples);
  std::vector<double> rec(n), lat(n), ent(n);
  parallel_for(n, [&](std::size_t i) {
    Rng rng = root.split(i);
    const MatrixXd x = q.sample(rng);
    double r = 0;
    for (Index t = 0; t < frames.rows(); ++t) r += decoder.log_density(frames.row(t).transpose(), x.row(t).transpose(), s);
    const double l = latent_term(lgssm, ObsSeq<double>::fully_observed(x));
    const double e = -q.log_density(x);
    const char* bad = !std::isfinite(r) ? "reconstruction" : !std::isfinite(l) ? "latent" : !std::isfinite(e) ? "entropy" : nullptr;
    if (bad) throw NumericalError(std::string("elbo_estimate: non-finite ") + bad + " term at sample " + std::to_string(i));
    rec[i] = r;
    lat[i] = l;
    ent[i] = e;
  });
  ElboEstimate out;
  out.n_samples = n_samples;
  std::vector<double> totals(n);
  double magnitude = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out.reconstruction += rec[i];
    out.latent += lat[i];
    out.entropy += ent[i];
    totals[i] = rec[i] + lat[i] + ent[i];
    magnitude += std::abs(rec[i]) + std::abs(lat[i]) + std::abs(ent[i]);
  }
  out.reconstruction /= static_cast<double>(n);
  out.latent /= static_cast<double>(n);
  out.entropy /= static_cast<double>(n);
  out.value = out.reconstruction + out.latent + out.entropy;
  out.std_error = summarize(totals, magnitude / static_cast<double>(n)).std_error;
  return out;
}

double latent_term(const LgssmParams<double>& lgssm, const ObsSeq<double>& x) {
  if (x.observed_count() != x.length()) throw PreconditionError("latent_term: x must be fully observed");
  return kalman_filter(lgssm, x).loglik;
}

MonteCarloValue latent_term_mc(const LgssmParams<double>& lgssm, const ObsSeq<double>& x, int n_samples,
                               std::uint64_t seed) {
  if (n_samples < 1) throw PreconditionError("latent_term_mc: n_samples must be >= 1");
  if (x.observed_count() != x.length()) throw PreconditionError("latent_term: x must be fully observed");
  const auto filt = kalman_filter(lgssm, x);
  const Rng root(seed);
  std::vector<double> draws(static_cast<std::size_t>(n_samples)), mags(draws.size());
  parallel_for(draws.size(), [&](std::size_t i) {
    Rng rng = root.split(i);
    const auto z = sample_posterior(lgssm, filt, rng);
    const double joint = log_joint(lgssm, x, z.latents);
    draws[i] = joint - z.log_density;
    mags[i] = std::abs(joint) + std::abs(z.log_density);
  });
  double magnitude = 0;
  for (double m : mags) magnitude += m;
  return summarize(draws, magnitude / static_cast<double>(mags.size()));
}

namespace {

struct JointState {
  LinearGaussianEncoder encoder;
  LinearDecoder decoder;
  ParamVector lgssm;
};

// Mean ELBO over the dataset with one fixed stream per (sequence, iteration),
// so repeated calls inside one iteration share random numbers.
double mean_elbo(const JointState& st, const std::vector<MatrixXd>& data, const VectorXd& y0, int n_samples,
                 const Rng& iteration_rng) {
  const auto params = to_params(st.lgssm);
  double total = 0;
  for (std::size_t k = 0; k < data.size(); ++k) {
    const std::uint64_t seq_seed = iteration_rng.split(k).stream();
    total += elbo_estimate(st.encoder, st.decoder, params, y0, data[k], n_samples, seq_seed).value;
  }
  return total / static_cast<double>(data.size());
}

// Analytic gradient of the latent term with respect to the packed LG-SSM
// vector, averaged with the same samples mean_elbo draws.
VectorXd lgssm_gradient(const JointState& st, const std::vector<MatrixXd>& data, const VectorXd& y0, int n_samples,
                        const Rng& iteration_rng) {
  VectorXd grad = VectorXd::Zero(st.lgssm.size());
  for (std::size_t k = 0; k < data.size(); ++k) {
    const auto q = st.encoder.encode_sequence(y0, data[k]);
    const Rng root(iteration_rng.split(k).stream());
    for (int i = 0; i < n_samples; ++i) {
      Rng rng = root.split(static_cast<std::uint64_t>(i));
      const MatrixXd x = q.sample(rng);
      grad += loglik_and_grad(st.lgssm, ObsSeq<double>::fully_observed(x)).grad;
    }
  }
  return grad / static_cast<double>(data.size() * static_cast<std::size_t>(n_samples));
}

}  // namespace

JointFitResult joint_fit(const LinearGaussianEncoder& encoder, const LinearDecoder& decoder, const ParamVector& lgssm,
                         const std::vector<MatrixXd>& dataset, const VectorXd& y0, const JointFitConfig& cfg) {
  cfg.learner.validate();
  if (dataset.empty()) throw PreconditionError("joint_fit: dataset is empty");
  if (cfg.n_samples < 1) throw PreconditionError("joint_fit: n_samples must be >= 1");
  if (!(cfg.fd_step > 0)) throw PreconditionError("joint_fit: fd_step must be > 0");

  JointState st{encoder, decoder, lgssm};
  const Index n_enc = cfg.fit_encoder ? encoder.packed().size() : 0;
  const Index n_dec = cfg.fit_decoder ? decoder.packed().size() : 0;
  const Index n_lg = cfg.fit_lgssm ? lgssm.size() : 0;
  VectorXd x(n_enc + n_dec + n_lg);
  if (n_enc) x.head(n_enc) = encoder.packed();
  if (n_dec) x.segment(n_enc, n_dec) = decoder.packed();
  if (n_lg) x.tail(n_lg) = lgssm.values;
  auto unpack_into = [&](const VectorXd& v, JointState& s) {
    if (n_enc) s.encoder = s.encoder.with_packed(v.head(n_enc));
    if (n_dec) s.decoder = s.decoder.with_packed(v.segment(n_enc, n_dec));
    if (n_lg) s.lgssm.values = v.tail(n_lg);
  };

  JointFitResult result{encoder, decoder, lgssm, {}};
  AdamState adam;
  const Rng root(cfg.learner.seed);
  for (int it = 0; it <= cfg.learner.max_iters; ++it) {
    const Rng iteration_rng = root.split(static_cast<std::uint64_t>(it));
    double value = 0;
    VectorXd grad = VectorXd::Zero(x.size());
    try {
      value = mean_elbo(st, dataset, y0, cfg.n_samples, iteration_rng);
      for (Index k = 0; k < n_enc + n_dec; ++k) {
        JointState plus = st, minus = st;
        VectorXd xp = x, xm = x;
        xp[k] += cfg.fd_step;
        xm[k] -= cfg.fd_step;
        unpack_into(xp, plus);
        unpack_into(xm, minus);
        grad[k] = (mean_elbo(plus, dataset, y0, cfg.n_samples, iteration_rng) -
                   mean_elbo(minus, dataset, y0, cfg.n_samples, iteration_rng)) /
                  (2 * cfg.fd_step);
      }
      if (n_lg) grad.tail(n_lg) = lgssm_gradient(st, dataset, y0, cfg.n_samples, iteration_rng);
    } catch (const NumericalError& e) {
      throw NumericalError("joint_fit: iteration " + std::to_string(it) + ": " + e.what());
    }
    if (!std::isfinite(value) || !grad.allFinite()) {
      throw NumericalError("joint_fit: objective diverged at iteration " + std::to_string(it));
    }
    result.trace.push_back(value);
    if (it == cfg.learner.max_iters) break;
    adam_ascent_step(x, grad, adam, cfg.learner);
    unpack_into(x, st);
  }
  result.encoder = st.encoder;
  result.decoder = st.decoder;
  result.lgssm = st.lgssm;
  return result;
}

}  // namespace motionssm
