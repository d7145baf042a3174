#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "logstab/linalg.hpp"

namespace logstab::testing {

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Matrix M(r, c);
  for (Eigen::Index j = 0; j < c; ++j) {
    for (Eigen::Index i = 0; i < r; ++i) M(i, j) = g(rng);
  }
  return M;
}

inline Matrix random_unit(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  Matrix M = random_matrix(rng, r, c);
  return M / M.norm();
}

inline Vector random_box(std::mt19937_64& rng, Eigen::Index n, double m) {
  std::uniform_real_distribution<double> u(m, 1.0);
  Vector d(n);
  for (Eigen::Index i = 0; i < n; ++i) d[i] = u(rng);
  return d;
}

/// Number of eigenvalues of the symmetric S strictly below x, from the
/// inertia of S - x I (Gaussian elimination without pivoting; Sylvester).
inline int count_below(const Matrix& S, double x) {
  Matrix T = S - x * Matrix::Identity(S.rows(), S.cols());
  const Eigen::Index n = T.rows();
  int neg = 0;
  for (Eigen::Index k = 0; k < n; ++k) {
    double p = T(k, k);
    if (p == 0.0) p = -1e-300;
    if (p < 0.0) ++neg;
    for (Eigen::Index i = k + 1; i < n; ++i) {
      const double f = T(i, k) / p;
      for (Eigen::Index j = k + 1; j < n; ++j) T(i, j) -= f * T(k, j);
    }
  }
  return neg;
}

/// k-th largest eigenvalue (k = 0 is the largest) by bisection on count_below.
inline double bisect_eigenvalue(const Matrix& S, Eigen::Index k, int steps = 50) {
  const double r = S.norm() + 1.0;
  double lo = -r;
  double hi = r;
  const int want_below = static_cast<int>(S.rows() - k - 1);
  for (int it = 0; it < steps; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (count_below(S, mid) <= want_below) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

inline double central_difference(const std::function<double(double)>& f, double h) {
  return (f(h) - f(-h)) / (2.0 * h);
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-12, std::max(std::abs(a), std::abs(b))); }

}  // namespace logstab::testing
