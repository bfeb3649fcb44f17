#pragma once

/// @file param_learn.hpp Maximum-likelihood fitting of LG-SSM parameters
///
/// The objective is the exact Kalman marginal log-likelihood. Gradients come
/// from Fisher's identity evaluated with smoother statistics (in the
/// information form of backward_information, so singular Q / Sigma0 blocks
/// held fixed do not break the free ones). Covariances are optimised through
/// log-Cholesky factors: Q = L Lᵀ with L lower triangular and the diagonal of
/// L stored as its logarithm, so every vector decodes to a valid model.

#include "motionssm/lgssm.hpp"
#include "motionssm/random.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <deque>
#include <vector>

namespace motionssm {

/// Which parameter blocks are optimised. Fixed blocks keep their value from
/// ParamLayout::fixed and take no space in the packed vector.
struct FreeBlocks {
  bool A = true;
  bool C = true;
  bool mu0 = true;
  bool Q = true;
  bool R = true;
  bool Sigma0 = true;

  static FreeBlocks only_mu0() { return {false, false, true, false, false, false}; }
  static FreeBlocks all() { return {}; }
};

struct ParamLayout {
  Eigen::Index d_z = 0;
  Eigen::Index d_x = 0;
  FreeBlocks free;
  LgssmParams<double> fixed;

  ParamLayout() = default;
  /// `base` supplies the dimensions and the values of fixed blocks.
  ParamLayout(const LgssmParams<double>& base, FreeBlocks free_blocks = {});

  Eigen::Index size() const;
  bool operator==(const ParamLayout& other) const;
};

/// log-Cholesky factors: lower triangular, diagonal entries are log L_ii.
struct ParamFactors {
  Eigen::MatrixXd A, C;
  Eigen::VectorXd mu0;
  Eigen::MatrixXd log_chol_Q, log_chol_R, log_chol_Sigma0;
};

struct ParamVector {
  ParamLayout layout;
  Eigen::VectorXd values;

  Eigen::Index size() const { return values.size(); }
};

/// Exact reshape of the packed vector (blocks that are fixed are left empty).
ParamFactors unpack(const ParamVector& v);
/// Inverse of unpack; pack(unpack(v)) == v bit for bit.
ParamVector pack(const ParamFactors& factors, const ParamLayout& layout);

/// Decode to model parameters (covariances are PSD by construction).
LgssmParams<double> to_params(const ParamVector& v);
/// Encode model parameters; free covariance blocks must be positive definite.
ParamVector from_params(const LgssmParams<double>& params, const ParamLayout& layout);
ParamVector from_params(const LgssmParams<double>& params, FreeBlocks free = {});

/// Gradient of the log-likelihood with respect to the natural parameters,
/// treating every matrix entry as independent (symmetric for Q, R, Sigma0).
struct LgssmGradient {
  Eigen::MatrixXd A, Q, C, R;
  Eigen::VectorXd mu0;
  Eigen::MatrixXd Sigma0;
};

struct LoglikGrad {
  double value = 0;
  Eigen::VectorXd grad;
};

LgssmGradient loglik_gradient(const LgssmParams<double>& params, const ObsSeq<double>& obs, double* loglik = nullptr);
LoglikGrad loglik_and_grad(const ParamVector& params, const ObsSeq<double>& obs);

/// Chain rule from natural-parameter gradient to the packed vector.
Eigen::VectorXd pack_gradient(const LgssmGradient& g, const ParamVector& at);

struct LearnerConfig {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int max_iters = 100;
  double grad_tol = 0.0;  ///< stop when the gradient max-norm falls below this
  int horizon = 75;       ///< moving-horizon window N
  int inner_steps_per_sample = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AdamState {
  Eigen::VectorXd m, v;
  long t = 0;
};

/// One Adam step in the ascent direction of `grad`.
void adam_ascent_step(Eigen::VectorXd& x, const Eigen::VectorXd& grad, AdamState& state, const LearnerConfig& cfg);

struct FitResult {
  ParamVector params;               ///< best iterate
  double objective = 0;             ///< mean per-sequence log-likelihood at `params`
  std::vector<double> trace;        ///< objective at iterate k, k = 0..iterations
  std::vector<double> best_trace;   ///< running maximum of trace
  int best_iteration = 0;
};

/// Adam ascent on the mean per-sequence log-likelihood.
FitResult fit_offline(const ParamVector& init, const std::vector<ObsSeq<double>>& dataset, const LearnerConfig& cfg);

/// Mean log-likelihood and gradient over a dataset, reduced in dataset order.
LoglikGrad dataset_loglik_and_grad(const ParamVector& params, const std::vector<ObsSeq<double>>& dataset);

struct OnlineState {
  ParamVector params;
  std::deque<Eigen::VectorXd> window;  ///< at most N most recent observations, oldest first
  AdamState optimizer;
  long steps = 0;
  std::vector<double> window_loglik;  ///< window log-likelihood before each step's update

  explicit OnlineState(ParamVector initial) : params(std::move(initial)) {}
  OnlineState() = default;

  ObsSeq<double> window_obs() const;
};

/// Push one observation and run `inner_steps_per_sample` Adam steps on the
/// window's marginal log-likelihood. Optimizer moments persist across calls.
OnlineState online_step(OnlineState state, const Eigen::VectorXd& new_obs, const LearnerConfig& cfg);

enum class ForecastRmseMode { PredictiveMean, MonteCarlo };

struct ForecastScore {
  double loglik = 0;  ///< log p(future | past), nats
  double rmse = 0;
};

/// Predictive log-density of `future` given `past`, and RMSE of the forecast
/// against `future`. Monte-Carlo mode averages the RMSE of `n_paths` sampled
/// trajectories.
ForecastScore evaluate_forecast(const LgssmParams<double>& params, const ObsSeq<double>& past,
                                const ObsSeq<double>& future, ForecastRmseMode mode = ForecastRmseMode::PredictiveMean,
                                int n_paths = 50, std::uint64_t seed = 0);

}  // namespace motionssm
