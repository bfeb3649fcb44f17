#include "motionssm/svf.hpp"

#include "motionssm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace motionssm {

namespace {

void require_same_shape(const VectorField& a, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (a.rows() != rows || a.cols() != cols) {
    throw DimensionError(std::string(what) + ": field is " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

// Half-sample symmetric reflection: ... c b a | a b c ... | c b a ...
Eigen::Index reflect(Eigen::Index i, Eigen::Index n) {
  const Eigen::Index period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

double lerp(double a, double b, double t) { return a + t * (b - a); }

}  // namespace

void Frame::check() const {
  if (values.rows() < 2 || values.cols() < 2) throw DimensionError("frame must be at least 2x2");
  if (!values.allFinite()) throw DimensionError("frame contains non-finite values");
  if (labels && (labels->rows() != values.rows() || labels->cols() != values.cols())) {
    throw DimensionError("label mask shape differs from frame shape");
  }
}

double VectorField::max_norm() const {
  if (x.size() == 0) return 0;
  return (x.square() + y.square()).sqrt().maxCoeff();
}

void VectorField::check() const {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw DimensionError("field components differ in shape");
  if (!x.allFinite() || !y.allFinite()) throw DimensionError("field contains non-finite values");
}

Eigen::VectorXd gaussian_kernel(double sigma) {
  if (!(sigma >= 0) || !std::isfinite(sigma)) throw PreconditionError("gaussian_smooth: sigma must be finite and >= 0");
  const auto radius = static_cast<Eigen::Index>(std::ceil(3 * sigma));
  Eigen::VectorXd k(2 * radius + 1);
  if (radius == 0) {
    k[0] = 1;
    return k;
  }
  for (Eigen::Index i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
  }
  return k / k.sum();
}

Image gaussian_smooth(const Image& img, double sigma) {
  const Eigen::VectorXd k = gaussian_kernel(sigma);
  if (k.size() == 1) return img;
  if (!img.allFinite()) throw NumericalError("gaussian_smooth: non-finite input");
  const Eigen::Index r = k.size() / 2;
  const Eigen::Index h = img.rows(), w = img.cols();
  Image tmp(h, w), out(h, w);
  for (Eigen::Index i = 0; i < h; ++i) {
    for (Eigen::Index j = 0; j < w; ++j) {
      double acc = 0;
      for (Eigen::Index t = -r; t <= r; ++t) acc += k[t + r] * img(i, reflect(j + t, w));
      tmp(i, j) = acc;
    }
  }
  for (Eigen::Index i = 0; i < h; ++i) {
    for (Eigen::Index j = 0; j < w; ++j) {
      double acc = 0;
      for (Eigen::Index t = -r; t <= r; ++t) acc += k[t + r] * tmp(reflect(i + t, h), j);
      out(i, j) = acc;
    }
  }
  return out;
}

VelocityField gaussian_smooth(const VelocityField& v, double sigma) {
  v.check();
  return VelocityField(gaussian_smooth(v.x, sigma), gaussian_smooth(v.y, sigma));
}

double sample_bilinear(const Image& img, double row, double col) {
  const Eigen::Index h = img.rows(), w = img.cols();
  row = std::clamp(row, 0.0, static_cast<double>(h - 1));
  col = std::clamp(col, 0.0, static_cast<double>(w - 1));
  const auto r0 = static_cast<Eigen::Index>(std::floor(row));
  const auto c0 = static_cast<Eigen::Index>(std::floor(col));
  const Eigen::Index r1 = std::min(r0 + 1, h - 1);
  const Eigen::Index c1 = std::min(c0 + 1, w - 1);
  const double fr = row - static_cast<double>(r0);
  const double fc = col - static_cast<double>(c0);
  // lerp form keeps constant images exact
  return lerp(lerp(img(r0, c0), img(r0, c1), fc), lerp(img(r1, c0), img(r1, c1), fc), fr);
}

DeformField compose(const DeformField& a, const DeformField& b) {
  a.check();
  b.check();
  require_same_shape(b, a.rows(), a.cols(), "compose");
  DeformField out(Image(a.rows(), a.cols()), Image(a.rows(), a.cols()));
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const double row = static_cast<double>(i) + b.y(i, j);
      const double col = static_cast<double>(j) + b.x(i, j);
      out.x(i, j) = b.x(i, j) + sample_bilinear(a.x, row, col);
      out.y(i, j) = b.y(i, j) + sample_bilinear(a.y, row, col);
    }
  }
  return out;
}

DeformField exp_svf(const VelocityField& v, int n_squarings) {
  if (n_squarings < 0) throw PreconditionError("exp_svf: n_squarings must be >= 0");
  v.check();
  const double scale = std::ldexp(1.0, -n_squarings);
  DeformField u(v.x * scale, v.y * scale);
  for (int k = 0; k < n_squarings; ++k) u = compose(u, u);
  return u;
}

Image warp(const Image& img, const DeformField& phi, Interp mode) {
  phi.check();
  require_same_shape(phi, img.rows(), img.cols(), "warp");
  const Eigen::Index h = img.rows(), w = img.cols();
  Image out(h, w);
  for (Eigen::Index i = 0; i < h; ++i) {
    for (Eigen::Index j = 0; j < w; ++j) {
      const double row = static_cast<double>(i) + phi.y(i, j);
      const double col = static_cast<double>(j) + phi.x(i, j);
      if (mode == Interp::Bilinear) {
        out(i, j) = sample_bilinear(img, row, col);
      } else {
        const auto r = std::clamp<Eigen::Index>(std::lround(row), 0, h - 1);
        const auto c = std::clamp<Eigen::Index>(std::lround(col), 0, w - 1);
        out(i, j) = img(r, c);
      }
    }
  }
  return out;
}

LabelImage warp(const LabelImage& labels, const DeformField& phi) {
  return warp(Image(labels.cast<double>()), phi, Interp::Nearest).cast<std::uint8_t>();
}

Frame warp(const Frame& frame, const DeformField& phi) {
  Frame out(warp(frame.values, phi, Interp::Bilinear));
  if (frame.labels) out.labels = warp(*frame.labels, phi);
  return out;
}

Image jacobian_det(const DeformField& phi) {
  phi.check();
  const Eigen::Index h = phi.rows(), w = phi.cols();
  if (h < 3 || w < 3) throw DimensionError("jacobian_det: field must be at least 3x3");
  auto d_col = [&](const Image& f, Eigen::Index i, Eigen::Index j) {
    if (j == 0) return f(i, 1) - f(i, 0);
    if (j == w - 1) return f(i, w - 1) - f(i, w - 2);
    return 0.5 * (f(i, j + 1) - f(i, j - 1));
  };
  auto d_row = [&](const Image& f, Eigen::Index i, Eigen::Index j) {
    if (i == 0) return f(1, j) - f(0, j);
    if (i == h - 1) return f(h - 1, j) - f(h - 2, j);
    return 0.5 * (f(i + 1, j) - f(i - 1, j));
  };
  Image det(h, w);
  for (Eigen::Index i = 0; i < h; ++i) {
    for (Eigen::Index j = 0; j < w; ++j) {
      const double xx = 1 + d_col(phi.x, i, j);
      const double yy = 1 + d_row(phi.y, i, j);
      det(i, j) = xx * yy - d_row(phi.x, i, j) * d_col(phi.y, i, j);
    }
  }
  return det;
}

VelocityField random_velocity_field(Eigen::Index h, Eigen::Index w, double sigma, double max_norm, Rng& rng) {
  VelocityField v(Image(h, w), Image(h, w));
  std::normal_distribution<double> normal;
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j) v.x(i, j) = normal(rng);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j) v.y(i, j) = normal(rng);
  v = gaussian_smooth(v, sigma);
  const double m = v.max_norm();
  if (m > 0) {
    v.x *= max_norm / m;
    v.y *= max_norm / m;
  }
  return v;
}

}  // namespace motionssm
