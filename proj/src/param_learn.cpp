#include "motionssm/param_learn.hpp"

#include "motionssm/parallel.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace motionssm {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

Index tri_size(Index d) { return d * (d + 1) / 2; }

// Visit the packed blocks in order. `on_dense(matrix_ref, rows, cols)` and
// `on_tri(matrix_ref, d)` receive the block being read or written.
template <typename Factors, typename Dense, typename Tri>
void for_each_block(const ParamLayout& layout, Factors& f, Dense&& on_dense, Tri&& on_tri) {
  if (layout.free.A) on_dense(f.A, layout.d_z, layout.d_z);
  if (layout.free.C) on_dense(f.C, layout.d_x, layout.d_z);
  if (layout.free.mu0) on_dense(f.mu0, layout.d_z, 1);
  if (layout.free.Q) on_tri(f.log_chol_Q, layout.d_z);
  if (layout.free.R) on_tri(f.log_chol_R, layout.d_x);
  if (layout.free.Sigma0) on_tri(f.log_chol_Sigma0, layout.d_z);
}

MatrixXd cov_to_log_chol(const MatrixXd& cov, const char* what) {
  return log_cholesky(cov, std::string("from_params: free covariance ") + what);
}

// d f / d theta for Sigma = L Lᵀ, given the symmetric entrywise gradient G.
void chain_log_chol(const MatrixXd& G, const MatrixXd& log_chol, VectorXd& out, Index& pos) {
  MatrixXd L = log_chol.triangularView<Eigen::StrictlyLower>();
  L.diagonal() = log_chol.diagonal().array().exp();
  const MatrixXd dL = 2.0 * G * L;
  for (Index i = 0; i < L.rows(); ++i) {
    for (Index j = 0; j < i; ++j) out[pos++] = dL(i, j);
    out[pos++] = dL(i, i) * L(i, i);
  }
}

}  // namespace

ParamLayout::ParamLayout(const LgssmParams<double>& base, FreeBlocks free_blocks)
    : d_z(base.state_dim()), d_x(base.obs_dim()), free(free_blocks), fixed(base) {
  base.check_dimensions();
}

Index ParamLayout::size() const {
  Index n = 0;
  if (free.A) n += d_z * d_z;
  if (free.C) n += d_x * d_z;
  if (free.mu0) n += d_z;
  if (free.Q) n += tri_size(d_z);
  if (free.R) n += tri_size(d_x);
  if (free.Sigma0) n += tri_size(d_z);
  return n;
}

bool ParamLayout::operator==(const ParamLayout& o) const {
  return d_z == o.d_z && d_x == o.d_x && free.A == o.free.A && free.C == o.free.C && free.mu0 == o.free.mu0 &&
         free.Q == o.free.Q && free.R == o.free.R && free.Sigma0 == o.free.Sigma0;
}

ParamFactors unpack(const ParamVector& v) {
  const ParamLayout& layout = v.layout;
  if (v.values.size() != layout.size()) {
    throw DimensionError("unpack: vector length " + std::to_string(v.values.size()) + " != layout size " +
                         std::to_string(layout.size()));
  }
  ParamFactors f;
  Index pos = 0;
  for_each_block(
      layout, f,
      [&](auto& block, Index rows, Index cols) {
        block.resize(rows, cols);
        for (Index i = 0; i < rows; ++i)
          for (Index j = 0; j < cols; ++j) block(i, j) = v.values[pos++];
      },
      [&](MatrixXd& block, Index d) {
        block = MatrixXd::Zero(d, d);
        for (Index i = 0; i < d; ++i)
          for (Index j = 0; j <= i; ++j) block(i, j) = v.values[pos++];
      });
  return f;
}

ParamVector pack(const ParamFactors& factors, const ParamLayout& layout) {
  ParamVector v{layout, VectorXd(layout.size())};
  Index pos = 0;
  for_each_block(
      layout, factors,
      [&](const auto& block, Index rows, Index cols) {
        if (block.rows() != rows || block.cols() != cols) throw DimensionError("pack: block shape mismatch");
        for (Index i = 0; i < rows; ++i)
          for (Index j = 0; j < cols; ++j) v.values[pos++] = block(i, j);
      },
      [&](const MatrixXd& block, Index d) {
        if (block.rows() != d || block.cols() != d) throw DimensionError("pack: factor shape mismatch");
        for (Index i = 0; i < d; ++i)
          for (Index j = 0; j <= i; ++j) v.values[pos++] = block(i, j);
      });
  return v;
}

LgssmParams<double> to_params(const ParamVector& v) {
  const ParamFactors f = unpack(v);
  LgssmParams<double> p = v.layout.fixed;
  if (v.layout.free.A) p.A = f.A;
  if (v.layout.free.C) p.C = f.C;
  if (v.layout.free.mu0) p.mu0 = f.mu0;
  if (v.layout.free.Q) p.Q = from_log_cholesky(f.log_chol_Q);
  if (v.layout.free.R) p.R = from_log_cholesky(f.log_chol_R);
  if (v.layout.free.Sigma0) p.Sigma0 = from_log_cholesky(f.log_chol_Sigma0);
  return p;
}

ParamVector from_params(const LgssmParams<double>& params, const ParamLayout& layout) {
  params.check_dimensions();
  if (params.state_dim() != layout.d_z || params.obs_dim() != layout.d_x) {
    throw DimensionError("from_params: dimensions do not match layout");
  }
  ParamFactors f;
  if (layout.free.A) f.A = params.A;
  if (layout.free.C) f.C = params.C;
  if (layout.free.mu0) f.mu0 = params.mu0;
  if (layout.free.Q) f.log_chol_Q = cov_to_log_chol(params.Q, "Q");
  if (layout.free.R) f.log_chol_R = cov_to_log_chol(params.R, "R");
  if (layout.free.Sigma0) f.log_chol_Sigma0 = cov_to_log_chol(params.Sigma0, "Sigma0");
  ParamLayout with_values = layout;
  with_values.fixed = params;
  return pack(f, with_values);
}

ParamVector from_params(const LgssmParams<double>& params, FreeBlocks free) {
  return from_params(params, ParamLayout(params, free));
}

LgssmGradient loglik_gradient(const LgssmParams<double>& p, const ObsSeq<double>& obs, double* loglik) {
  const auto filt = kalman_filter(p, obs);
  const auto info = backward_information(p, obs, filt);
  const Index T = filt.length();
  const Index dz = p.state_dim();
  const Index dx = p.obs_dim();
  const MatrixXd eye = MatrixXd::Identity(dz, dz);

  LgssmGradient g{MatrixXd::Zero(dz, dz), MatrixXd::Zero(dz, dz), MatrixXd::Zero(dx, dz),
                  MatrixXd::Zero(dx, dx), VectorXd::Zero(dz),     MatrixXd::Zero(dz, dz)};

  // E[z_{t-1} | x] and Cov(z_{t-1} | x_{1:t-1}) for the transition term.
  VectorXd prev_smoothed = p.mu0 + p.Sigma0 * p.A.transpose() * info.r[0];
  MatrixXd prev_filtered_cov = p.Sigma0;

  for (Index t = 0; t < T; ++t) {
    const auto ut = static_cast<std::size_t>(t);
    const VectorXd& r = info.r[ut];
    const MatrixXd& N = info.N[ut];
    const Gaussian<double>& pred = filt.predicted[ut];
    const VectorXd smoothed = pred.mean + pred.cov * r;

    g.Q += r * r.transpose() - N;
    g.A += r * prev_smoothed.transpose() - N * p.A * prev_filtered_cov;

    if (obs.is_observed(t)) {
      const VectorXd r_next = (t + 1 < T) ? info.r[ut + 1] : VectorXd::Zero(dz);
      const MatrixXd N_next = (t + 1 < T) ? info.N[ut + 1] : MatrixXd::Zero(dz, dz);
      Eigen::LLT<MatrixXd> llt(filt.innovation_cov[ut]);
      const MatrixXd Sinv = llt.solve(MatrixXd::Identity(dx, dx));
      const MatrixXd K = pred.cov * p.C.transpose() * Sinv;
      const MatrixXd AK = p.A * K;
      const VectorXd u = Sinv * filt.innovation[ut] - AK.transpose() * r_next;
      const MatrixXd D = Sinv + AK.transpose() * N_next * AK;
      g.R += u * u.transpose() - D;
      g.C += u * smoothed.transpose() - K.transpose() * (eye - p.A.transpose() * N_next * p.A * filt.filtered[ut].cov);
    }
    prev_smoothed = smoothed;
    prev_filtered_cov = filt.filtered[ut].cov;
  }
  g.Q *= 0.5;
  g.R *= 0.5;
  symmetrize(g.Q);
  symmetrize(g.R);
  g.mu0 = p.A.transpose() * info.r[0];
  g.Sigma0 = 0.5 * p.A.transpose() * (info.r[0] * info.r[0].transpose() - info.N[0]) * p.A;
  symmetrize(g.Sigma0);
  if (loglik) *loglik = filt.loglik;
  return g;
}

VectorXd pack_gradient(const LgssmGradient& g, const ParamVector& at) {
  const ParamLayout& layout = at.layout;
  const ParamFactors f = unpack(at);
  VectorXd out(layout.size());
  Index pos = 0;
  auto dense = [&](const auto& block) {
    for (Index i = 0; i < block.rows(); ++i)
      for (Index j = 0; j < block.cols(); ++j) out[pos++] = block(i, j);
  };
  if (layout.free.A) dense(g.A);
  if (layout.free.C) dense(g.C);
  if (layout.free.mu0) dense(g.mu0);
  if (layout.free.Q) chain_log_chol(g.Q, f.log_chol_Q, out, pos);
  if (layout.free.R) chain_log_chol(g.R, f.log_chol_R, out, pos);
  if (layout.free.Sigma0) chain_log_chol(g.Sigma0, f.log_chol_Sigma0, out, pos);
  return out;
}

LoglikGrad loglik_and_grad(const ParamVector& params, const ObsSeq<double>& obs) {
  LoglikGrad out;
  const LgssmParams<double> p = to_params(params);
  const LgssmGradient g = loglik_gradient(p, obs, &out.value);
  out.grad = pack_gradient(g, params);
  return out;
}

void LearnerConfig::validate() const {
  if (!(learning_rate > 0)) throw PreconditionError("learner: learning_rate must be > 0");
  if (horizon < 2) throw PreconditionError("learner: horizon N must be >= 2");
  if (max_iters < 0) throw PreconditionError("learner: max_iters must be >= 0");
  if (inner_steps_per_sample < 0) throw PreconditionError("learner: inner_steps_per_sample must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw PreconditionError("learner: Adam decays must lie in [0, 1)");
}

void adam_ascent_step(VectorXd& x, const VectorXd& grad, AdamState& s, const LearnerConfig& cfg) {
  if (s.m.size() != x.size()) {
    s.m = VectorXd::Zero(x.size());
    s.v = VectorXd::Zero(x.size());
    s.t = 0;
  }
  ++s.t;
  s.m = cfg.beta1 * s.m + (1 - cfg.beta1) * grad;
  s.v = cfg.beta2 * s.v + (1 - cfg.beta2) * grad.cwiseAbs2();
  const double c1 = 1 - std::pow(cfg.beta1, static_cast<double>(s.t));
  const double c2 = 1 - std::pow(cfg.beta2, static_cast<double>(s.t));
  x.array() += cfg.learning_rate * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + cfg.epsilon);
}

LoglikGrad dataset_loglik_and_grad(const ParamVector& params, const std::vector<ObsSeq<double>>& dataset) {
  std::vector<LoglikGrad> parts(dataset.size());
  parallel_for(dataset.size(), [&](std::size_t i) { parts[i] = loglik_and_grad(params, dataset[i]); });
  LoglikGrad total{0.0, VectorXd::Zero(params.size())};
  for (const auto& part : parts) {
    total.value += part.value;
    total.grad += part.grad;
  }
  const double n = static_cast<double>(dataset.size());
  total.value /= n;
  total.grad /= n;
  return total;
}

FitResult fit_offline(const ParamVector& init, const std::vector<ObsSeq<double>>& dataset, const LearnerConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) {
    throw PreconditionError("fit_offline: dataset is empty");
  }
  FitResult result;
  ParamVector current = init;
  AdamState adam;
  double best = -std::numeric_limits<double>::infinity();
  for (int it = 0;; ++it) {
    LoglikGrad eval;
    try {
      eval = dataset_loglik_and_grad(current, dataset);
    } catch (const NumericalError& e) {
      throw NumericalError("fit_offline: iteration " + std::to_string(it) + ": " + e.what());
    }
    if (!std::isfinite(eval.value) || !eval.grad.allFinite()) {
      throw NumericalError("fit_offline: objective diverged at iteration " + std::to_string(it));
    }
    result.trace.push_back(eval.value);
    if (eval.value > best) {
      best = eval.value;
      result.params = current;
      result.objective = eval.value;
      result.best_iteration = it;
    }
    result.best_trace.push_back(best);
    if (it == cfg.max_iters) break;
    if (cfg.grad_tol > 0 && eval.grad.cwiseAbs().maxCoeff() < cfg.grad_tol) break;
    adam_ascent_step(current.values, eval.grad, adam, cfg);
  }
  return result;
}

ObsSeq<double> OnlineState::window_obs() const {
  const Index d = params.layout.d_x;
  MatrixXd values(static_cast<Index>(window.size()), d);
  Index row = 0;
  for (const auto& x : window) values.row(row++) = x.transpose();
  return ObsSeq<double>::fully_observed(std::move(values), steps - static_cast<long>(window.size()));
}

OnlineState online_step(OnlineState state, const VectorXd& new_obs, const LearnerConfig& cfg) {
  cfg.validate();
  if (new_obs.size() != state.params.layout.d_x) {
    throw DimensionError("online_step: observation has dimension " + std::to_string(new_obs.size()) + ", expected " +
                         std::to_string(state.params.layout.d_x));
  }
  state.window.push_back(new_obs);
  while (static_cast<int>(state.window.size()) > cfg.horizon) state.window.pop_front();
  ++state.steps;

  const ObsSeq<double> window = state.window_obs();
  if (cfg.inner_steps_per_sample == 0) {
    state.window_loglik.push_back(kalman_filter(to_params(state.params), window).loglik);
    return state;
  }
  for (int k = 0; k < cfg.inner_steps_per_sample; ++k) {
    LoglikGrad eval = loglik_and_grad(state.params, window);
    if (!std::isfinite(eval.value) || !eval.grad.allFinite()) {
      throw NumericalError("online_step: non-finite objective at step " + std::to_string(state.steps));
    }
    if (k == 0) state.window_loglik.push_back(eval.value);
    adam_ascent_step(state.params.values, eval.grad, state.optimizer, cfg);
  }
  return state;
}

ForecastScore evaluate_forecast(const LgssmParams<double>& params, const ObsSeq<double>& past,
                                const ObsSeq<double>& future, ForecastRmseMode mode, int n_paths, std::uint64_t seed) {
  const Index H = future.length();
  if (H < 1) {
    throw PreconditionError("evaluate_forecast: future block must be non-empty");
  }
  future.check(params.obs_dim());
  ForecastScore score;

  Gaussian<double> last{params.mu0, params.Sigma0};
  if (past.length() > 0) {
    const auto joint = kalman_filter(params, concat(past, future));
    score.loglik = joint.per_step_loglik.tail(H).sum();
    last = kalman_filter(params, past).filtered.back();
  } else {
    score.loglik = kalman_filter(params, future).loglik;
  }

  std::vector<Index> rows;
  for (Index t = 0; t < H; ++t)
    if (future.is_observed(t)) rows.push_back(t);
  if (rows.empty()) {
    score.rmse = 0.0;
    return score;
  }
  const double denom = static_cast<double>(rows.size() * static_cast<std::size_t>(params.obs_dim()));
  if (mode == ForecastRmseMode::PredictiveMean) {
    const auto fc = forecast(params, last, static_cast<int>(H));
    double sq = 0;
    for (Index t : rows) sq += (fc.observations[static_cast<std::size_t>(t)].mean - future.values.row(t).transpose()).squaredNorm();
    score.rmse = std::sqrt(sq / denom);
    return score;
  }
  if (n_paths < 1) throw PreconditionError("evaluate_forecast: n_paths must be >= 1");
  const MatrixXd L0 = psd_factor<double>(last.cov, "evaluate_forecast: filtered covariance");
  const MatrixXd LQ = psd_factor<double>(params.Q, "evaluate_forecast: Q");
  const MatrixXd LR = psd_factor<double>(params.R, "evaluate_forecast: R");
  const Rng root(seed);
  double total = 0;
  for (int path = 0; path < n_paths; ++path) {
    Rng rng = root.split(static_cast<std::uint64_t>(path));
    VectorXd z = last.mean + L0 * standard_normal(rng, params.state_dim());
    double sq = 0;
    std::size_t next = 0;
    for (Index t = 0; t < H; ++t) {
      z = params.A * z + LQ * standard_normal(rng, params.state_dim());
      const VectorXd x = params.C * z + LR * standard_normal(rng, params.obs_dim());
      if (next < rows.size() && rows[next] == t) {
        sq += (x - future.values.row(t).transpose()).squaredNorm();
        ++next;
      }
    }
    total += std::sqrt(sq / denom);
  }
  score.rmse = total / n_paths;
  return score;
}

}  // namespace motionssm
