#include "motionssm/errors.hpp"
#include "motionssm/metrics.hpp"
#include "motionssm/random.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace motionssm;

namespace {

BoolImage random_blob(Rng& rng, Eigen::Index h, Eigen::Index w) {
  // thresholded smooth noise: irregular, possibly multi-component blobs
  Image noise(h, w);
  std::normal_distribution<double> n;
  for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = n(rng);
  const Image s = gaussian_smooth(noise, 1.5);
  BoolImage m = s > 0.1;
  if (m.count() == 0) m(h / 2, w / 2) = true;
  return m;
}

Mask single(Eigen::Index h, Eigen::Index w, Eigen::Index r, Eigen::Index c) {
  BoolImage m = BoolImage::Constant(h, w, false);
  m(r, c) = true;
  return Mask(m);
}

Image random_image(Rng& rng, Eigen::Index h, Eigen::Index w) {
  Image img(h, w);
  std::normal_distribution<double> n;
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = n(rng);
  return img;
}

}  // namespace

TEST_CASE("dice: hand examples") {
  Rng rng(1);
  const Mask a(random_blob(rng, 20, 20));
  CHECK(dice(a, a) == 1.0);
  BoolImage l = BoolImage::Constant(4, 4, false), r = l;
  l.col(0).setConstant(true);
  r.col(3).setConstant(true);
  CHECK(dice(Mask(l), Mask(r)) == 0.0);
  BoolImage p = BoolImage::Constant(3, 3, false), q = p;
  p(0, 0) = p(0, 1) = true;
  q(0, 1) = q(0, 2) = true;
  CHECK(dice(Mask(p), Mask(q)) == 0.5);
  const BoolImage empty = BoolImage::Constant(3, 3, false);
  CHECK(dice(Mask(empty), Mask(empty)) == 1.0);
  CHECK(dice(Mask(empty), Mask(p)) == 0.0);
  CHECK_THROWS_AS(dice(Mask(empty), Mask(l)), DimensionError);
}

TEST_CASE("dice: symmetric and translation invariant") {
  Rng rng(2);
  for (int k = 0; k < 20; ++k) {
    BoolImage a = BoolImage::Constant(30, 30, false), b = a;
    a.block(5, 5, 16, 16) = random_blob(rng, 16, 16);
    b.block(5, 5, 16, 16) = random_blob(rng, 16, 16);
    CHECK(dice(Mask(a), Mask(b)) == dice(Mask(b), Mask(a)));
    BoolImage ta = BoolImage::Constant(30, 30, false), tb = ta;
    ta.block(8, 3, 16, 16) = a.block(5, 5, 16, 16);
    tb.block(8, 3, 16, 16) = b.block(5, 5, 16, 16);
    CHECK(dice(Mask(ta), Mask(tb)) == dice(Mask(a), Mask(b)));
  }
}

TEST_CASE("hd95: hand examples") {
  Rng rng(3);
  const Mask a(random_blob(rng, 20, 20));
  CHECK(hd95(a, a) == 0.0);
  CHECK(hd95(single(10, 10, 2, 2), single(10, 10, 2, 5)) == 3.0);
  CHECK(hd95(single(10, 10, 1, 1), single(10, 10, 4, 5)) == 5.0);
  const BoolImage empty = BoolImage::Constant(20, 20, false);
  CHECK_THROWS_AS(hd95(Mask(empty), a), PreconditionError);
}

TEST_CASE("distance_transform matches brute force, anisotropic spacing") {
  Rng rng(4);
  for (int k = 0; k < 10; ++k) {
    BoolImage sites = BoolImage::Constant(17, 23, false);
    std::uniform_int_distribution<int> ri(0, 16), ci(0, 22);
    for (int s = 0; s < 4; ++s) sites(ri(rng), ci(rng)) = true;
    const double sx = 0.7, sy = 1.3;
    const Image dt = distance_transform(sites, sx, sy);
    for (Eigen::Index i = 0; i < 17; ++i)
      for (Eigen::Index j = 0; j < 23; ++j) {
        double best = INFINITY;
        for (Eigen::Index p = 0; p < 17; ++p)
          for (Eigen::Index q = 0; q < 23; ++q)
            if (sites(p, q)) best = std::min(best, std::hypot(double(i - p) * sy, double(j - q) * sx));
        CHECK(std::abs(dt(i, j) - best) < 1e-12);
      }
  }
}

TEST_CASE("hd95 and dice match brute-force oracles on random blobs") {
  Rng rng(5);
  for (int k = 0; k < 60; ++k) {
    const double sx = k % 2 ? 1.0 : 0.8, sy = k % 3 ? 1.0 : 1.7;
    const Mask a(random_blob(rng, 24, 28), sx, sy), b(random_blob(rng, 24, 28), sx, sy);
    CHECK(std::abs(hd95(a, b) - oracle::hd95(a, b)) < 1e-9);
    CHECK(std::abs(dice(a, b) - oracle::dice(a.pixels, b.pixels)) < 1e-12);
    CHECK(hd95(a, b) == hd95(b, a));
    CHECK(hd95(a, b) <= hausdorff(a, b));
  }
}

TEST_CASE("hd95 scales linearly with spacing") {
  Rng rng(6);
  for (int k = 0; k < 10; ++k) {
    const BoolImage a = random_blob(rng, 20, 20), b = random_blob(rng, 20, 20);
    CHECK(hd95(Mask(a, 2.5, 2.5), Mask(b, 2.5, 2.5)) == doctest::Approx(2.5 * hd95(Mask(a), Mask(b))).epsilon(1e-13));
  }
}

TEST_CASE("percentile interpolates linearly") {
  CHECK(percentile({3.0}, 95) == 3.0);
  CHECK(percentile({0, 10}, 95) == doctest::Approx(9.5));
  CHECK(percentile({4, 1, 3, 2, 5}, 50) == 3.0);
}

TEST_CASE("rmse: hand examples and properties") {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2, 1), b(2, 1);
  b << 3, 4;
  CHECK(rmse(a, a) == 0.0);
  CHECK(rmse(a, b) == doctest::Approx(std::sqrt(12.5)).epsilon(1e-15));
  CHECK(rmse(Eigen::MatrixXd::Constant(3, 2, 1.0), Eigen::MatrixXd::Constant(3, 2, -1.5)) == doctest::Approx(2.5));
  Rng rng(7);
  for (int k = 0; k < 20; ++k) {
    Eigen::MatrixXd x(5, 3), y(5, 3), z(5, 3);
    std::normal_distribution<double> n;
    for (Eigen::Index i = 0; i < 15; ++i) {
      x.data()[i] = n(rng);
      y.data()[i] = n(rng);
      z.data()[i] = n(rng);
    }
    CHECK(rmse(x, y) == rmse(y, x));
    CHECK(rmse(x, z) <= rmse(x, y) + rmse(y, z) + 1e-15);
  }
  CHECK_THROWS_AS(rmse(a, Eigen::MatrixXd::Zero(3, 1)), DimensionError);
}

TEST_CASE("lcc: identical and affinely related images") {
  Rng rng(8);
  const Image a = random_image(rng, 32, 32);
  CHECK(std::abs(lcc(a, a) - 1.0) < 1e-6);
  CHECK(std::abs(lcc(a, 2.0 * a + 3.0) - lcc(a, a)) < 1e-6);
  CHECK_THROWS_AS(lcc(a, a, 4), PreconditionError);
  CHECK_THROWS_AS(lcc(a, a, 33), PreconditionError);
}

TEST_CASE("lcc matches a per-window loop oracle") {
  Rng rng(9);
  for (int k = 0; k < 50; ++k) {
    const Image a = random_image(rng, 20, 24);
    const Image b = 0.5 * a + random_image(rng, 20, 24) + 10.0;
    const int win = k % 2 ? 9 : 5;
    CHECK(std::abs(lcc(a, b, win) - oracle::lcc(a, b, win)) < 1e-10);
  }
}
