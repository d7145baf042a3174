#pragma once

// The 3 x 3 example: A + 0.3 E(t), E(t) = M(t) / ||M(t)||_F on t in [0, 1]
// with m = 0.5, tracking the worst-case diagonal by the warm-started sign
// iteration.

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "logstab/extremal_diag.hpp"
#include "logstab/linalg.hpp"
#include "logstab/matrix_io.hpp"

namespace logstab::illustrative {

inline constexpr double kEpsilon = 0.3;
inline constexpr double kM = 0.5;

inline Matrix base_matrix() {
  Matrix A(3, 3);
  A << -0.39, -1.16, 0.74,  //
      1.14, 0.96, 0.15,     //
      0.42, -0.14, -2.32;
  return A;
}

inline Matrix direction(double t) {
  Matrix M(3, 3);
  const double s = std::sin(t);
  M << -std::sin(2.0 * t) / 2.0, std::sin(t * t), t,  //
      -t / 4.0, -t, std::sin(t / 2.0),                 //
      -s * s, std::cos(t), t;
  return M / frobenius_norm(M);
}

inline Matrix perturbed(double t) { return base_matrix() + kEpsilon * direction(t); }

struct Row {
  double t = 0.0;
  double mu = 0.0;
  DiagonalPoint d;
  int iterations = 0;
};

/// A sign-iteration step that moved the diagonal: the gradient at the old
/// diagonal and at the new one.
struct Transition {
  double t = 0.0;
  DiagonalPoint from;
  Vector g_from;
  DiagonalPoint to;
  Vector g_to;
};

struct Run {
  std::vector<Row> rows;
  std::vector<Transition> transitions;
};

/// Samples t = 0, h, 2h, ... <= 1. The first point starts from D = I; each
/// later one is warm-started from the previous extremizer.
inline Run run(double h = 0.05) {
  Run out;
  DiagonalPoint d = DiagonalPoint::ones(3, kM);
  const int count = static_cast<int>(std::floor(1.0 / h + 1e-9));
  for (int k = 0; k <= count; ++k) {
    const double t = k * h;
    const Matrix P = perturbed(t);
    Row row;
    row.t = t;
    for (int it = 0; it < 20; ++it) {
      const DiagGradient g = diag_gradient(P, d);
      const DiagonalPoint next = update_vertex(d, g.g);
      ++row.iterations;
      if (next == d) break;
      out.transitions.push_back({t, d, g.g, next, diag_gradient(P, next).g});
      d = next;
    }
    row.d = d;
    row.mu = mu2(d.d.asDiagonal() * P);
    out.rows.push_back(row);
  }
  return out;
}

inline std::string rows_csv(const Run& r) {
  std::ostringstream os;
  os << "t,mu,d1,d2,d3\n";
  for (const auto& row : r.rows) {
    os << format_real(row.t) << ',' << format_real(row.mu);
    for (Eigen::Index i = 0; i < 3; ++i) os << ',' << format_real(row.d.d[i]);
    os << '\n';
  }
  return os.str();
}

inline std::string transitions_log(const Run& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  auto vec = [&](const Vector& v) {
    os << '(';
    for (Eigen::Index i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
    os << ')';
  };
  for (const auto& tr : r.transitions) {
    os << "t = " << tr.t << ": D = diag(" << tr.from.pattern() << ") gradient ";
    vec(tr.g_from);
    os << " -> D = diag(" << tr.to.pattern() << ") gradient ";
    vec(tr.g_to);
    os << '\n';
  }
  return os.str();
}

}  // namespace logstab::illustrative
