#pragma once

// Small dense helpers shared by the state-space code.

#include "motionssm/errors.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <numbers>
#include <string>

namespace motionssm {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Derived>
void symmetrize(Eigen::MatrixBase<Derived>& m) {
  m = (0.5 * (m + m.transpose())).eval();
}

/// True when `m` is symmetric (max |m - mᵀ| < tol) with smallest eigenvalue >= -tol.
template <typename Derived>
bool is_symmetric_psd(const Eigen::MatrixBase<Derived>& m, double tol = 1e-10) {
  using Scalar = typename Derived::Scalar;
  if (m.rows() != m.cols()) {
    return false;
  }
  if (m.rows() == 0) {
    return true;
  }
  if (!m.allFinite()) {
    return false;
  }
  if ((m - m.transpose()).cwiseAbs().maxCoeff() >= tol) {
    return false;
  }
  const Mat<Scalar> sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> eig(sym, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff() >= -tol;
}

/// Cholesky of a symmetric matrix that should be positive definite.
///
/// On failure, jitter of 1e-12 * trace / d is added to the diagonal and grown
/// tenfold, up to three times. `jitter_used` reports the final amount.
template <typename Scalar>
Eigen::LLT<Mat<Scalar>> robust_llt(const Mat<Scalar>& m, const std::string& what,
                                   Scalar* jitter_used = nullptr) {
  Eigen::LLT<Mat<Scalar>> llt(m);
  if (llt.info() == Eigen::Success && m.allFinite()) {
    if (jitter_used) *jitter_used = Scalar(0);
    return llt;
  }
  const Eigen::Index d = m.rows();
  Scalar jitter = Scalar(1e-12) * m.trace() / Scalar(d);
  if (jitter > Scalar(0) && std::isfinite(static_cast<double>(jitter))) {
    for (int attempt = 0; attempt < 3; ++attempt) {
      Mat<Scalar> bumped = m;
      bumped.diagonal().array() += jitter;
      llt.compute(bumped);
      if (llt.info() == Eigen::Success) {
        if (jitter_used) *jitter_used = jitter;
        return llt;
      }
      jitter *= Scalar(10);
    }
  }
  throw NumericalError(what + ": matrix is not positive definite");
}

/// log|M| from its Cholesky factor.
template <typename Scalar>
Scalar log_det(const Eigen::LLT<Mat<Scalar>>& llt) {
  return Scalar(2) * llt.matrixLLT().diagonal().array().log().sum();
}

/// Square-root factor L with L Lᵀ = m for a symmetric PSD (possibly singular) matrix.
/// Falls back to an eigendecomposition when Cholesky fails; eigenvalues below
/// -1e-10 * scale mean the input is not PSD.
template <typename Scalar>
Mat<Scalar> psd_factor(const Mat<Scalar>& m, const std::string& what) {
  if (m.rows() == 0) {
    return m;
  }
  if (!m.allFinite()) {
    throw NumericalError(what + ": non-finite covariance");
  }
  Eigen::LLT<Mat<Scalar>> llt(m);
  if (llt.info() == Eigen::Success) {
    return llt.matrixL();
  }
  const Mat<Scalar> sym = Scalar(0.5) * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> eig(sym);
  const Scalar scale = std::max(Scalar(1), sym.cwiseAbs().maxCoeff());
  if (eig.eigenvalues().minCoeff() < Scalar(-1e-10) * scale) {
    throw NumericalError(what + ": Cholesky failed, covariance is not positive semi-definite");
  }
  const Vec<Scalar> root = eig.eigenvalues().cwiseMax(Scalar(0)).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal();
}

/// log N(x | mean, cov) given a Cholesky factorisation of cov.
template <typename Scalar>
Scalar gaussian_logpdf(const Vec<Scalar>& x, const Vec<Scalar>& mean, const Eigen::LLT<Mat<Scalar>>& cov_llt) {
  const Vec<Scalar> diff = x - mean;
  const Vec<Scalar> white = cov_llt.matrixL().solve(diff);
  const auto d = static_cast<Scalar>(x.size());
  return Scalar(-0.5) * (d * std::log(Scalar(2) * std::numbers::pi_v<Scalar>) + log_det(cov_llt) + white.squaredNorm());
}

/// Lower-triangular factor with the diagonal stored as its logarithm:
/// an unconstrained encoding of a positive definite matrix.
template <typename Scalar>
Mat<Scalar> log_cholesky(const Mat<Scalar>& cov, const std::string& what) {
  Eigen::LLT<Mat<Scalar>> llt(cov);
  if (llt.info() != Eigen::Success || !cov.allFinite()) {
    throw NumericalError(what + " is not positive definite");
  }
  Mat<Scalar> L = llt.matrixL();
  L.diagonal() = L.diagonal().array().log();
  return L;
}

template <typename Scalar>
Mat<Scalar> from_log_cholesky(const Mat<Scalar>& log_chol) {
  Mat<Scalar> L = log_chol.template triangularView<Eigen::StrictlyLower>();
  L.diagonal() = log_chol.diagonal().array().exp();
  Mat<Scalar> cov = L * L.transpose();
  symmetrize(cov);
  return cov;
}

}  // namespace motionssm
