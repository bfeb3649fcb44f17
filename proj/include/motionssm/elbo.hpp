#pragma once

/// @file elbo.hpp Evidence lower bound for the encoder / LG-SSM / decoder chain
///
/// Frames are handled as flattened vectors: a sequence is a T x d_y matrix and
/// the reference frame y0 a d_y vector. The ELBO of a sequence is
///
///   E_q(x | y0, y)[ log p(y | y0, x) + log p(x) - log q(x | y0, y) ]
///
/// where log p(x) is the LG-SSM marginal likelihood of x (the inner
/// expectation over z collapses to it, see latent_term).

#include "motionssm/lgssm.hpp"
#include "motionssm/param_learn.hpp"
#include "motionssm/random.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <memory>
#include <vector>

namespace motionssm {

/// Gaussian over a whole latent sequence x_{1:T}, stored stacked (t-major).
class SequenceGaussian {
 public:
  SequenceGaussian(Eigen::MatrixXd mean, Eigen::MatrixXd cov);

  Eigen::Index length() const { return mean_.rows(); }
  Eigen::Index dim() const { return mean_.cols(); }
  const Eigen::MatrixXd& mean() const { return mean_; }  ///< T x d_x
  const Eigen::MatrixXd& cov() const { return cov_; }    ///< (T d_x) x (T d_x)

  Eigen::MatrixXd sample(Rng& rng) const;
  double log_density(const Eigen::MatrixXd& x) const;

 private:
  Eigen::MatrixXd mean_;
  Eigen::MatrixXd cov_;
  Eigen::MatrixXd factor_;
};

class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual Eigen::Index latent_dim() const = 0;
  /// q(x_{1:T} | y0, y_{1:T}).
  virtual SequenceGaussian encode_sequence(const Eigen::VectorXd& y0, const Eigen::MatrixXd& frames) const = 0;
};

/// q(x | y0, y) = prod_t q(x_t | y0, y_t).
class FactorizedEncoder : public Encoder {
 public:
  virtual Gaussian<double> encode(const Eigen::VectorXd& y0, const Eigen::VectorXd& frame) const = 0;
  SequenceGaussian encode_sequence(const Eigen::VectorXd& y0, const Eigen::MatrixXd& frames) const override;
};

/// q(x_t | y_t) = N(M y_t + b, L Lᵀ); trainable.
class LinearGaussianEncoder : public FactorizedEncoder {
 public:
  LinearGaussianEncoder(Eigen::MatrixXd M, Eigen::VectorXd b, Eigen::MatrixXd cov);

  Eigen::Index latent_dim() const override { return M_.rows(); }
  Gaussian<double> encode(const Eigen::VectorXd& y0, const Eigen::VectorXd& frame) const override;

  const Eigen::MatrixXd& M() const { return M_; }
  const Eigen::VectorXd& b() const { return b_; }
  Eigen::MatrixXd cov() const;

  /// M (row-major), b, lower rows of the log-Cholesky factor of the covariance.
  Eigen::VectorXd packed() const;
  LinearGaussianEncoder with_packed(const Eigen::VectorXd& v) const;

 private:
  Eigen::MatrixXd M_;
  Eigen::VectorXd b_;
  Eigen::MatrixXd log_chol_;
};

/// Another encoder with every covariance multiplied by `factor`.
class ScaledEncoder : public Encoder {
 public:
  ScaledEncoder(std::shared_ptr<const Encoder> base, double factor);
  Eigen::Index latent_dim() const override { return base_->latent_dim(); }
  SequenceGaussian encode_sequence(const Eigen::VectorXd& y0, const Eigen::MatrixXd& frames) const override;

 private:
  std::shared_ptr<const Encoder> base_;
  double factor_;
};

class Decoder {
 public:
  virtual ~Decoder() = default;
  /// Spatial features s = f(y0).
  virtual Eigen::VectorXd features(const Eigen::VectorXd& y0) const = 0;
  /// log p(y_t | y0, x_t).
  virtual double log_density(const Eigen::VectorXd& frame, const Eigen::VectorXd& x, const Eigen::VectorXd& s) const = 0;
};

/// y_t = W x_t + noise, noise ~ N(0, R_y); features are unused.
class LinearDecoder : public Decoder {
 public:
  LinearDecoder(Eigen::MatrixXd W, Eigen::MatrixXd R_y);

  Eigen::VectorXd features(const Eigen::VectorXd& y0) const override { return y0; }
  double log_density(const Eigen::VectorXd& frame, const Eigen::VectorXd& x, const Eigen::VectorXd& s) const override;

  const Eigen::MatrixXd& W() const { return W_; }
  Eigen::MatrixXd R_y() const;

  /// W (row-major), lower rows of the log-Cholesky factor of R_y.
  Eigen::VectorXd packed() const;
  LinearDecoder with_packed(const Eigen::VectorXd& v) const;

 private:
  Eigen::MatrixXd W_;
  Eigen::MatrixXd log_chol_;
};

/// Linear-Gaussian observation model y_t = W x_t + noise on top of an LG-SSM.
/// The evidence p(y_{1:T}) is available in closed form.
struct LinearStandIn {
  Eigen::MatrixXd W;
  Eigen::MatrixXd R_y;

  LinearDecoder decoder() const { return LinearDecoder(W, R_y); }
  /// LG-SSM whose observations are y: C' = W C, R' = W R Wᵀ + R_y.
  LgssmParams<double> composite(const LgssmParams<double>& lgssm) const;
  double log_evidence(const LgssmParams<double>& lgssm, const Eigen::MatrixXd& frames) const;

  struct Draw {
    Eigen::MatrixXd x;  ///< T x d_x
    Eigen::MatrixXd y;  ///< T x d_y
  };
  Draw sample(const LgssmParams<double>& lgssm, Eigen::Index T, std::uint64_t seed) const;
};

/// Exact posterior p(x_{1:T} | y_{1:T}) of a LinearStandIn; not factorized over
/// time in general. Dense, O((T d_x)^3).
class ExactPosteriorEncoder : public Encoder {
 public:
  ExactPosteriorEncoder(LinearStandIn model, LgssmParams<double> lgssm);
  Eigen::Index latent_dim() const override { return lgssm_.obs_dim(); }
  SequenceGaussian encode_sequence(const Eigen::VectorXd& y0, const Eigen::MatrixXd& frames) const override;

 private:
  LinearStandIn model_;
  LgssmParams<double> lgssm_;
};

/// Prior moments of the stacked x_{1:T} under an LG-SSM.
SequenceGaussian observation_prior(const LgssmParams<double>& lgssm, Eigen::Index T);

struct ElboEstimate {
  double value = 0;
  double std_error = 0;
  int n_samples = 0;
  double reconstruction = 0;  ///< E_q log p(y | y0, x)
  double latent = 0;          ///< E_q log p(x)
  double entropy = 0;         ///< -E_q log q(x | y0, y)
};

ElboEstimate elbo_estimate(const Encoder& encoder, const Decoder& decoder, const LgssmParams<double>& lgssm,
                           const Eigen::VectorXd& y0, const Eigen::MatrixXd& frames, int n_samples, std::uint64_t seed);

/// log p(x_{1:T}): the Kalman filter log-likelihood of fully observed x.
double latent_term(const LgssmParams<double>& lgssm, const ObsSeq<double>& x);

struct MonteCarloValue {
  double value = 0;
  double std_error = 0;
};

/// The same term as the sample mean of log p(x, z) - log p(z | x) over
/// z ~ p(z | x) drawn by forward-filtering backward-sampling.
MonteCarloValue latent_term_mc(const LgssmParams<double>& lgssm, const ObsSeq<double>& x, int n_samples,
                               std::uint64_t seed);

struct JointFitConfig {
  LearnerConfig learner;
  int n_samples = 1;        ///< Monte-Carlo samples per ELBO evaluation
  double fd_step = 1e-6;    ///< central-difference step for encoder / decoder parameters
  bool fit_encoder = true;
  bool fit_decoder = true;
  bool fit_lgssm = true;
};

struct JointFitResult {
  LinearGaussianEncoder encoder;
  LinearDecoder decoder;
  ParamVector lgssm;
  std::vector<double> trace;  ///< stochastic mean-ELBO estimate at each iteration
};

/// Simultaneous Adam ascent on the mean per-sequence ELBO over encoder,
/// decoder and LG-SSM parameters. Encoder and decoder gradients are central
/// differences under common random numbers; the LG-SSM gradient is analytic
/// (Fisher identity on the sampled x).
JointFitResult joint_fit(const LinearGaussianEncoder& encoder, const LinearDecoder& decoder, const ParamVector& lgssm,
                         const std::vector<Eigen::MatrixXd>& dataset, const Eigen::VectorXd& y0,
                         const JointFitConfig& cfg);

}  // namespace motionssm
