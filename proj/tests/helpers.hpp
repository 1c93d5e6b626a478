#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <vector>

#include "esdd/autodiff.hpp"
#include "esdd/rng.hpp"

namespace esdd::test {

// Central finite differences against a scalar function of a flat input.
// Returns the largest relative error over all coordinates, where the
// denominator is max(|analytic|, |numeric|, scale_floor).
inline double fd_max_rel_error(const std::function<double(const Eigen::ArrayXd&)>& f,
                               const Eigen::ArrayXd& x, const Eigen::ArrayXd& analytic,
                               double step = 1e-3, double scale_floor = 1e-6) {
  double worst = 0.0;
  Eigen::ArrayXd probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double hi = f(probe);
    probe[i] = x[i] - step;
    const double lo = f(probe);
    probe[i] = x[i];
    const double numeric = (hi - lo) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), scale_floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

inline Eigen::ArrayXd random_array(Eigen::Index n, Rng& rng, double scale = 1.0) {
  Eigen::ArrayXd a(n);
  for (Eigen::Index i = 0; i < n; ++i) a[i] = scale * rng.normal();
  return a;
}

inline Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng,
                                     double scale = 1.0) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

}  // namespace esdd::test
