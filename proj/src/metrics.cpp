#include "motionssm/metrics.hpp"

#include "motionssm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace motionssm {

namespace {

template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(what) + ": shapes " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + " differ");
  }
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1D squared distance transform (lower envelope of parabolas) with sample
// spacing h: d[q] = min_p f[p] + h^2 (q - p)^2.
void edt_1d(const std::vector<double>& f, std::vector<double>& d, double h2) {
  const int n = static_cast<int>(f.size());
  std::vector<int> v(static_cast<std::size_t>(n));
  std::vector<double> z(static_cast<std::size_t>(n) + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    while (k >= 0) {
      const int p = v[k];
      const double s = ((f[q] + h2 * q * q) - (f[p] + h2 * p * p)) / (2 * h2 * (q - p));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -kInf : ((f[q] + h2 * q * q) - (f[v[k - 1]] + h2 * v[k - 1] * v[k - 1])) / (2 * h2 * (q - v[k - 1]));
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), kInf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double dq = q - v[j];
    d[q] = h2 * dq * dq + f[v[j]];
  }
}

Image squared_distance(const BoolImage& sites, double sx, double sy) {
  const Eigen::Index h = sites.rows(), w = sites.cols();
  Image g(h, w);
  std::vector<double> f(static_cast<std::size_t>(h)), d(static_cast<std::size_t>(h));
  for (Eigen::Index j = 0; j < w; ++j) {
    for (Eigen::Index i = 0; i < h; ++i) f[i] = sites(i, j) ? 0.0 : kInf;
    edt_1d(f, d, sy * sy);
    for (Eigen::Index i = 0; i < h; ++i) g(i, j) = d[i];
  }
  f.resize(static_cast<std::size_t>(w));
  d.resize(static_cast<std::size_t>(w));
  for (Eigen::Index i = 0; i < h; ++i) {
    for (Eigen::Index j = 0; j < w; ++j) f[j] = g(i, j);
    edt_1d(f, d, sx * sx);
    for (Eigen::Index j = 0; j < w; ++j) g(i, j) = d[j];
  }
  return g;
}

std::vector<double> directed_distances(const Mask& from, const Mask& to) {
  const BoolImage bf = boundary(from.pixels);
  const Image dist = distance_transform(boundary(to.pixels), from.spacing_x, from.spacing_y);
  std::vector<double> out;
  for (Eigen::Index i = 0; i < bf.rows(); ++i)
    for (Eigen::Index j = 0; j < bf.cols(); ++j)
      if (bf(i, j)) out.push_back(dist(i, j));
  return out;
}

void check_pair(const Mask& a, const Mask& b, const char* what) {
  require_same_shape(a, b, what);
  if (a.count() == 0 || b.count() == 0) throw PreconditionError(std::string(what) + ": empty mask");
  if (a.spacing_x != b.spacing_x || a.spacing_y != b.spacing_y) {
    throw DimensionError(std::string(what) + ": masks have different pixel spacing");
  }
}

}  // namespace

Mask mask_of(const LabelImage& labels, std::uint8_t label, double sx, double sy) {
  return Mask(labels == label, sx, sy);
}

double dice(const Mask& a, const Mask& b) {
  require_same_shape(a, b, "dice");
  const auto na = a.count(), nb = b.count();
  if (na + nb == 0) return 1.0;
  const auto both = (a.pixels && b.pixels).count();
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

BoolImage boundary(const BoolImage& m) {
  const Eigen::Index h = m.rows(), w = m.cols();
  BoolImage out = BoolImage::Constant(h, w, false);
  for (Eigen::Index i = 0; i < h; ++i) {
    for (Eigen::Index j = 0; j < w; ++j) {
      if (!m(i, j)) continue;
      bool edge = false;
      for (Eigen::Index di = -1; di <= 1 && !edge; ++di) {
        for (Eigen::Index dj = -1; dj <= 1; ++dj) {
          const Eigen::Index r = i + di, c = j + dj;
          if (r < 0 || r >= h || c < 0 || c >= w || !m(r, c)) {
            edge = true;
            break;
          }
        }
      }
      out(i, j) = edge;
    }
  }
  return out;
}

Image distance_transform(const BoolImage& sites, double sx, double sy) {
  return squared_distance(sites, sx, sy).sqrt();
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw PreconditionError("percentile of an empty list");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double hd95(const Mask& a, const Mask& b) {
  check_pair(a, b, "hd95");
  return std::max(percentile(directed_distances(a, b), 95), percentile(directed_distances(b, a), 95));
}

double hausdorff(const Mask& a, const Mask& b) {
  check_pair(a, b, "hausdorff");
  const auto ab = directed_distances(a, b), ba = directed_distances(b, a);
  return std::max(*std::max_element(ab.begin(), ab.end()), *std::max_element(ba.begin(), ba.end()));
}

double rmse(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  require_same_shape(a, b, "rmse");
  if (a.size() == 0) throw PreconditionError("rmse of empty sequences");
  return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
}

double lcc(const Image& a, const Image& b, int window) {
  require_same_shape(a, b, "lcc");
  if (window < 1 || window % 2 == 0) throw PreconditionError("lcc: window must be a positive odd integer");
  if (window > std::min(a.rows(), a.cols())) throw PreconditionError("lcc: window larger than the image");
  constexpr double eps = 1e-5;
  const Eigen::Index h = a.rows(), w = a.cols(), r = window / 2;
  // Centering first keeps the windowed moment differences well conditioned.
  const Image ca = a - a.mean();
  const Image cb = b - b.mean();
  // Integral images with a zero first row / column.
  auto integral = [&](const Image& img) {
    Image s = Image::Zero(h + 1, w + 1);
    for (Eigen::Index i = 0; i < h; ++i)
      for (Eigen::Index j = 0; j < w; ++j) s(i + 1, j + 1) = img(i, j) + s(i, j + 1) + s(i + 1, j) - s(i, j);
    return s;
  };
  const Image sa = integral(ca), sb = integral(cb);
  const Image saa = integral(ca * ca), sbb = integral(cb * cb), sab = integral(ca * cb);
  double total = 0;
  for (Eigen::Index i = 0; i < h; ++i) {
    const Eigen::Index r0 = std::max<Eigen::Index>(0, i - r), r1 = std::min(h, i + r + 1);
    for (Eigen::Index j = 0; j < w; ++j) {
      const Eigen::Index c0 = std::max<Eigen::Index>(0, j - r), c1 = std::min(w, j + r + 1);
      auto box = [&](const Image& s) { return s(r1, c1) - s(r0, c1) - s(r1, c0) + s(r0, c0); };
      const double n = static_cast<double>((r1 - r0) * (c1 - c0));
      const double ma = box(sa), mb = box(sb);
      const double cross = box(sab) - ma * mb / n;
      const double va = box(saa) - ma * ma / n;
      const double vb = box(sbb) - mb * mb / n;
      total += cross * cross / (va * vb + eps);
    }
  }
  return total / static_cast<double>(h * w);
}

}  // namespace motionssm
