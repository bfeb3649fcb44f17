#pragma once

/// @file metrics.hpp Segmentation and similarity scores

#include "motionssm/svf.hpp"

#include <Eigen/Core>

#include <vector>

namespace motionssm {

using BoolImage = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Mask {
  BoolImage pixels;
  double spacing_x = 1.0;  ///< mm per column
  double spacing_y = 1.0;  ///< mm per row

  Mask() = default;
  explicit Mask(BoolImage p, double sx = 1.0, double sy = 1.0) : pixels(std::move(p)), spacing_x(sx), spacing_y(sy) {}

  Eigen::Index rows() const { return pixels.rows(); }
  Eigen::Index cols() const { return pixels.cols(); }
  Eigen::Index count() const { return pixels.count(); }
};

/// Pixels of `labels` equal to `label`.
Mask mask_of(const LabelImage& labels, std::uint8_t label, double sx = 1.0, double sy = 1.0);

/// 2|a n b| / (|a| + |b|); 1 when both are empty.
double dice(const Mask& a, const Mask& b);

/// Foreground pixels with at least one 8-neighbour outside the mask (the
/// image exterior counts as outside).
BoolImage boundary(const BoolImage& m);

/// Euclidean distance (in spacing units) from every pixel to the nearest true
/// pixel of `sites`. Exact, separable squared-distance transform.
Image distance_transform(const BoolImage& sites, double sx = 1.0, double sy = 1.0);

/// Percentile (q in [0, 100]) with linear interpolation between order statistics.
double percentile(std::vector<double> values, double q);

/// Max of the two directed 95th-percentile boundary distances.
double hd95(const Mask& a, const Mask& b);
/// Max of the two directed maximum boundary distances.
double hausdorff(const Mask& a, const Mask& b);

/// Root mean squared elementwise difference; rows are time steps.
double rmse(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// Mean over pixels of the squared local normalized cross-correlation in a
/// window x window neighbourhood (clipped at the image border).
double lcc(const Image& a, const Image& b, int window = 9);

}  // namespace motionssm
