#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "logstab/errors.hpp"

namespace logstab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace detail {

inline std::string shape_str(const Matrix& M) {
  return std::to_string(M.rows()) + "x" + std::to_string(M.cols());
}

inline void require_square(const Matrix& M, const char* who) {
  if (M.rows() != M.cols() || M.rows() == 0) {
    throw DimensionError(std::string(who) + ": expected a non-empty square matrix, got " + shape_str(M));
  }
}

inline void require_same_shape(const Matrix& M, const Matrix& N, const char* who) {
  if (M.rows() != N.rows() || M.cols() != N.cols()) {
    throw DimensionError(std::string(who) + ": shape mismatch " + shape_str(M) + " vs " + shape_str(N));
  }
}

}  // namespace detail

/// Symmetric part (M + M^T) / 2.
inline Matrix sym(const Matrix& M) {
  detail::require_square(M, "sym");
  return 0.5 * (M + M.transpose());
}

inline double frobenius_inner(const Matrix& M, const Matrix& N) {
  detail::require_same_shape(M, N, "frobenius_inner");
  return (M.array() * N.array()).sum();
}

inline double frobenius_norm(const Matrix& M) { return std::sqrt((M.array() * M.array()).sum()); }

/// Eigenpairs of a symmetric matrix.
///
/// Eigenvalues are sorted in descending order; column i of `eigenvectors`
/// is the unit eigenvector of `eigenvalues[i]`. Each eigenvector is signed
/// so that its largest-magnitude entry (lowest index on ties) is
/// nonnegative, which keeps downstream flows reproducible.
struct SpectralBundle {
  Vector eigenvalues;
  Matrix eigenvectors;

  Eigen::Index size() const { return eigenvalues.size(); }
  double max_eigenvalue() const { return eigenvalues[0]; }
  auto vector(Eigen::Index i) const { return eigenvectors.col(i); }
};

namespace detail {

inline void canonicalize_sign(Eigen::Ref<Vector> x) {
  Eigen::Index best = 0;
  double best_abs = -1.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    // strict comparison with a relative guard keeps the lowest index on ties
    const double a = std::abs(x[i]);
    if (a > best_abs * (1.0 + 1e-12) + 1e-300) {
      best_abs = a;
      best = i;
    }
  }
  if (x[best] < 0.0) x = -x;
}

}  // namespace detail

/// Full spectral decomposition of a symmetric matrix.
///
/// Throws ContractViolation if `M` is asymmetric beyond 1e-12 relative to
/// its Frobenius norm.
inline SpectralBundle symmetric_eig(const Matrix& M) {
  detail::require_square(M, "symmetric_eig");
  const double scale = std::max(frobenius_norm(M), 1e-300);
  const double asym = frobenius_norm(M - M.transpose());
  if (asym > 1e-12 * scale) {
    throw ContractViolation("symmetric_eig: matrix is not symmetric (relative asymmetry " +
                            std::to_string(asym / scale) + ")");
  }
  if (!M.allFinite()) throw ContractViolation("symmetric_eig: non-finite entries");

  // Eigen returns ascending eigenvalues; ties keep their original order.
  Eigen::SelfAdjointEigenSolver<Matrix> solver(0.5 * (M + M.transpose()));
  if (solver.info() != Eigen::Success) throw ConvergenceError("symmetric_eig: eigensolver failed");

  const Eigen::Index n = M.rows();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const Vector& ev = solver.eigenvalues();
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return ev[a] > ev[b]; });

  SpectralBundle out;
  out.eigenvalues.resize(n);
  out.eigenvectors.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.eigenvalues[i] = ev[order[static_cast<std::size_t>(i)]];
    out.eigenvectors.col(i) = solver.eigenvectors().col(order[static_cast<std::size_t>(i)]);
    detail::canonicalize_sign(out.eigenvectors.col(i));
  }
  return out;
}

/// Logarithmic 2-norm: the largest eigenvalue of sym(M).
inline double mu2(const Matrix& M) {
  detail::require_square(M, "mu2");
  Eigen::SelfAdjointEigenSolver<Matrix> solver(sym(M), Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw ConvergenceError("mu2: eigensolver failed");
  return solver.eigenvalues()[M.rows() - 1];
}

/// Spectral norm (largest singular value).
inline double spectral_norm(const Matrix& M) {
  if (M.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(M);
  return svd.singularValues()[0];
}

/// Returns M / ||M||_F. Throws ContractViolation for the zero matrix.
inline Matrix normalized(const Matrix& M) {
  const double n = frobenius_norm(M);
  if (!(n > 0.0)) throw ContractViolation("normalized: zero matrix has no direction");
  return M / n;
}

}  // namespace logstab
