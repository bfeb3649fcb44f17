#pragma once

/// @file synth.hpp Synthetic image sequences with known ground truth
///
/// A known LG-SSM drives x_t; v_t = sum_i x_t[i] B_i over a fixed basis of
/// velocity fields; phi_t = exp_svf(gaussian_smooth(v_t, sigma_g)); the frame
/// is y_t = y_0 o phi_t and its labels follow by nearest-neighbour warping.

#include "motionssm/lgssm.hpp"
#include "motionssm/param_learn.hpp"
#include "motionssm/svf.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <vector>

namespace motionssm {

inline constexpr std::uint8_t kLabelPool = 1;
inline constexpr std::uint8_t kLabelRing = 2;

struct RegimeShift {
  Eigen::Index step = 0;  ///< first step that uses the replacement A
  Eigen::MatrixXd A;
};

struct SynthScenario {
  LgssmParams<double> lgssm;  ///< R is replaced by obs_noise^2 I, see params()
  std::vector<VelocityField> basis;
  Frame phantom;
  Eigen::Index T = 275;
  double sigma_g = 2.0;
  double obs_noise = 0.1;
  int n_squarings = 4;
  std::optional<RegimeShift> regime_shift;
  std::uint64_t seed = 0;

  /// The generating LG-SSM (pre-shift dynamics).
  LgssmParams<double> params() const;
  void validate() const;
};

/// Two nested ellipses: blood pool (label 1) inside a myocardium ring
/// (label 2), smooth intensity gradients. Deterministic per seed.
Frame make_phantom(Eigen::Index h, Eigen::Index w, std::uint64_t seed);

/// The default scenario: d_z = 16 (eight slowly decaying rotations), d_x = 8,
/// 64 x 64 phantom, T = 275, sigma_g = 2. Basis amplitudes are calibrated so
/// that 3-sigma latent excursions keep min Jacobian det > 0.1.
SynthScenario default_scenario(std::uint64_t seed, Eigen::Index T = 275);

/// Adds a regime shift at `step`: every rotation frequency is multiplied by
/// `speedup` (a change of heart rate).
SynthScenario with_regime_shift(SynthScenario s, Eigen::Index step, double speedup = 1.6);

/// phi = exp_svf(gaussian_smooth(sum_i x[i] B_i, sigma_g)).
DeformField decode(const SynthScenario& s, const Eigen::VectorXd& x);

/// Smallest Jacobian determinant over the calibration set: +-3 sigma along each
/// basis direction and 3-sigma Mahalanobis draws from the stationary law.
double calibration_min_det(const SynthScenario& s);

struct SynthOutput {
  Eigen::MatrixXd latents;       ///< T x d_z
  Eigen::MatrixXd observations;  ///< T x d_x
  std::vector<Frame> frames;
  std::vector<DeformField> deformations;
  std::vector<LabelImage> masks;
};

/// Latents and observations only (no images).
Simulation<double> simulate_scenario(const SynthScenario& s);

SynthOutput synth_sequence(const SynthScenario& s);

/// Mean Dice over the pool and ring labels.
double label_dice(const LabelImage& a, const LabelImage& b);
/// Mean HD95 over the pool and ring labels (pixels).
double label_hd95(const LabelImage& a, const LabelImage& b);

struct ImputationReport {
  int stride = 1;
  std::vector<double> dice;   ///< per frame
  std::vector<double> hd95;   ///< per frame
  double median_dice = 0;
  double median_hd95 = 0;
  double latent_rmse = 0;     ///< imputed means vs emitted x, all frames
  double dice_degradation = 0;  ///< median Dice at stride 1 minus at this stride
};

/// Observe every stride-th x_t (t = 0, stride, 2 stride, ...), impute the rest
/// with the generating LG-SSM, decode the imputed means and score the warped
/// labels against the ground-truth labels of every frame.
std::vector<ImputationReport> run_imputation_experiment(const SynthScenario& s, const std::vector<int>& strides);
ImputationReport run_imputation_experiment(const SynthScenario& s, int stride);

struct OnlineConfig {
  Eigen::Index split = -1;  ///< end of pre-training data; defaults to the regime shift step
  int adapt_steps = 300;
  int horizon = 75;         ///< N
  int forecast = 50;        ///< H
  int dice_ahead = 25;
  LearnerConfig pretrain;   ///< fit_offline settings
  LearnerConfig online;     ///< online_step settings (horizon is overwritten)
  FreeBlocks free;
};

struct ModelScore {
  double loglik = 0;
  double rmse = 0;
  double dice = 0;  ///< Dice of the decoded forecast mean dice_ahead steps ahead
};

struct OnlineReport {
  ModelScore adapted;
  ModelScore frozen;
  std::vector<double> window_loglik;
  Eigen::Index forecast_start = 0;
};

/// Pre-train on x_{0:split}, stream x_{split:split+adapt_steps} through
/// online_step, then forecast the next H observations from the last N with the
/// adapted and the frozen (pre-trained) model.
OnlineReport run_online_experiment(const SynthScenario& s, const OnlineConfig& cfg = {});

}  // namespace motionssm
