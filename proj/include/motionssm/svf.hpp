#pragma once

/// @file svf.hpp Stationary velocity fields on 2D pixel grids
///
/// Fields are stored as two H x W component images. Component `x` runs along
/// columns, component `y` along rows, both in pixel units. A DeformField holds
/// the displacement u of the map phi(p) = p + u(p), so the zero field is the
/// identity.

#include "motionssm/random.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>

namespace motionssm {

using Image = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using LabelImage = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Frame {
  Image values;
  std::optional<LabelImage> labels;

  Frame() = default;
  explicit Frame(Image v, std::optional<LabelImage> l = std::nullopt) : values(std::move(v)), labels(std::move(l)) {}

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }
  /// Throws DimensionError for H or W < 2, mismatched labels, non-finite values.
  void check() const;
};

struct VectorField {
  Image x, y;

  VectorField() = default;
  VectorField(Image x_, Image y_) : x(std::move(x_)), y(std::move(y_)) {}
  static VectorField zero(Eigen::Index h, Eigen::Index w) { return {Image::Zero(h, w), Image::Zero(h, w)}; }
  static VectorField constant(Eigen::Index h, Eigen::Index w, double dx, double dy) {
    return {Image::Constant(h, w, dx), Image::Constant(h, w, dy)};
  }

  Eigen::Index rows() const { return x.rows(); }
  Eigen::Index cols() const { return x.cols(); }
  /// Largest vector length over the grid.
  double max_norm() const;
  void check() const;
};

struct VelocityField : VectorField {
  using VectorField::VectorField;
  VelocityField() = default;
  explicit VelocityField(VectorField f) : VectorField(std::move(f)) {}
};

struct DeformField : VectorField {
  using VectorField::VectorField;
  DeformField() = default;
  explicit DeformField(VectorField f) : VectorField(std::move(f)) {}
};

enum class Interp { Bilinear, Nearest };

/// Separable Gaussian filter, radius ceil(3 sigma), unit-sum kernel, symmetric
/// (half-sample) reflection at the borders. sigma = 0 copies the input.
Image gaussian_smooth(const Image& img, double sigma);
VelocityField gaussian_smooth(const VelocityField& v, double sigma);
/// The normalized 1D kernel used above (length 2 * radius + 1).
Eigen::VectorXd gaussian_kernel(double sigma);

/// Bilinear sample at fractional (row, col); coordinates are clamped to the grid.
double sample_bilinear(const Image& img, double row, double col);

/// phi_a o phi_b.
DeformField compose(const DeformField& a, const DeformField& b);

/// Scaling and squaring: u = v / 2^n, then n self-compositions.
DeformField exp_svf(const VelocityField& v, int n_squarings = 4);

/// out(p) = img(phi(p)); samples outside the grid clamp to the border.
Image warp(const Image& img, const DeformField& phi, Interp mode = Interp::Bilinear);
LabelImage warp(const LabelImage& labels, const DeformField& phi);
/// Warps values bilinearly and labels (if any) by nearest neighbour.
Frame warp(const Frame& frame, const DeformField& phi);

/// Per-pixel determinant of the Jacobian of phi; central differences inside,
/// one-sided differences on the border rows and columns.
Image jacobian_det(const DeformField& phi);

/// Gaussian white noise smoothed with sigma and rescaled so max_norm() equals
/// `max_norm` (the test family for diffeomorphism checks).
VelocityField random_velocity_field(Eigen::Index h, Eigen::Index w, double sigma, double max_norm, Rng& rng);

}  // namespace motionssm
