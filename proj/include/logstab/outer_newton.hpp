#pragma once

// Outer iteration: find the smallest amplitude eps* at which the inner
// minimum f(eps) = F_eps(E*(eps)) vanishes. f has a double zero at eps*,
// so Newton from the left with f'(eps) = -||G(eps)||_F converges
// monotonically with the error roughly halving per step.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "logstab/errors.hpp"
#include "logstab/extremal_diag.hpp"
#include "logstab/inner_flow.hpp"
#include "logstab/linalg.hpp"

namespace logstab {

struct OuterTrace {
  std::vector<double> epsilons;
  std::vector<double> f_values;
  std::vector<double> fprime_values;
  std::vector<int> warm_start_steps;  // free-flow Euler steps into each iterate (0 for the first)
  std::vector<int> inner_steps;       // accepted constrained-flow steps at each iterate
  int restarts = 0;                   // eps0 halvings
  int backtracks = 0;                 // Newton steps that overshot eps* and were bisected

  std::size_t size() const { return epsilons.size(); }
};

struct StabilizationResult {
  double delta = 0.0;
  double m = 1.0;
  Structure structure = Structure::full;
  double epsilon_star = 0.0;
  Matrix E_star;
  Matrix A_hat;
  double achieved_mu = 0.0;  // max over Omega_m of mu2(D A_hat), searched cold
  DiagonalPoint d_star;
  OuterTrace trace;
  double schur_bound = 0.0;  // schur_upper_bound(A, m, delta)
  double shift_bound = 0.0;  // shift_upper_bound(A, m, delta)
  bool already_satisfied = false;
  bool converged = false;
  int total_inner_steps = 0;
  std::string message;

  int outer_iterations() const { return trace.size() == 0 ? 0 : static_cast<int>(trace.size()) - 1; }
};

/// Norm of the positive eigenvalue excesses of Sym(D* A) over delta:
/// the size of the diagonal shift of the Schur factor of Sym(D* A) that
/// brings its spectrum down to delta. Returns 0 when the bound already holds.
///
/// Since any admissible perturbation must in particular lower the spectrum
/// of Sym(D*(A + Delta)) below delta, and ||Sym(D* Delta)||_F <= ||Delta||_F,
/// the Hoffman-Wielandt inequality makes this a lower bound on eps*; it is
/// attained when D* = I and the shift needs no other diagonal to settle.
inline double schur_upper_bound(const Matrix& A, double m, double delta) {
  ExtremizerReport x = find_extremizer(A, m);
  SpectralBundle b = symmetric_eig(sym(x.d_star.d.asDiagonal() * A));
  return std::sqrt(2.0 * spectral_penalty(b.eigenvalues, delta));
}

/// sqrt(n) (max_D mu2(D A) - delta) / m: the norm of the identity shift
/// -c I with c m = max_D mu2(D A) - delta, which is always admissible since
/// mu2(D A - c D) <= mu2(D A) - c m. A rigorous upper bound on eps* for both
/// the full and the diagonal structure.
inline double shift_upper_bound(const Matrix& A, double m, double delta) {
  const double excess = find_extremizer(A, m).mu_value - delta;
  if (excess <= 0.0) return 0.0;
  return std::sqrt(static_cast<double>(A.rows())) * excess / m;
}

struct FDerivative {
  double f = 0.0;
  double fprime = 0.0;
  bool defined = false;  // false when f = 0
};

/// f = F at a converged inner minimizer and f' = -||G||_F there.
inline FDerivative f_and_derivative(const FlowState& minimizer) {
  FDerivative out;
  out.f = minimizer.F;
  if (minimizer.F == 0.0) return out;
  const double g = frobenius_norm(minimizer.G);
  if (!(g > 0.0)) {
    throw ContractViolation("f_and_derivative: zero gradient with positive penalty cannot occur at a minimizer");
  }
  out.fprime = -g;
  out.defined = true;
  return out;
}

struct WarmStartOptions {
  double step_factor = 0.05;  // constant step h = step_factor * eps_prev
  int max_steps = 10000;
  int newton_iterations = 60;
  ExtremizerOptions extremizer{};
};

struct WarmStartResult {
  Matrix E;             // unit norm initial datum for the next inner run
  Matrix unnormalized;  // last free-flow iterate, norm eps_next unless fallback
  int steps = 0;
  double last_step = 0.0;
  bool fallback = false;
};

/// Integrates the free gradient system dY/dt = -G(Y) from Y = eps_prev E_prev
/// with constant Euler steps until ||Y||_F would pass eps_next, tunes the
/// last step by Newton so that ||Y||_F = eps_next, and normalizes.
inline WarmStartResult warm_start_transition(const Matrix& E_prev, double eps_prev, double eps_next,
                                             const PenaltyFunctional& P, const WarmStartOptions& opts = {},
                                             std::optional<DiagonalPoint> warm_d = std::nullopt,
                                             WorkingSet working_set = {}) {
  if (eps_next < eps_prev) throw ContractViolation("warm_start_transition: eps_next must not decrease");
  WarmStartResult out;
  if (eps_next == eps_prev) {
    out.E = E_prev;
    out.unnormalized = eps_prev * E_prev;
    return out;
  }
  const double h = opts.step_factor * eps_prev;
  Matrix Y = eps_prev * E_prev;
  for (int step = 0; step < opts.max_steps; ++step) {
    Evaluation ev = evaluate_perturbation(P.base, P.delta, P.m, Y, warm_d, opts.extremizer, working_set);
    warm_d = ev.d_star;
    detail::remember(working_set, ev.d_star);
    const Matrix G = project_structured(free_gradient(P, ev), P.structure);
    if (ev.F == 0.0 || frobenius_norm(G) == 0.0) break;
    Matrix next = Y - h * G;
    ++out.steps;
    if (frobenius_norm(next) >= eps_next) {
      // Newton on g(s) = ||Y - s G||^2 - eps_next^2, root bracketed in [0, h].
      const double target = eps_next * eps_next;
      double s = 0.5 * h;
      double lo = 0.0;
      double hi = h;
      for (int it = 0; it < opts.newton_iterations; ++it) {
        const Matrix Ys = Y - s * G;
        const double g = (Ys.array() * Ys.array()).sum() - target;
        if (std::abs(g) <= 1e-15 * target) break;
        if (g > 0.0) {
          hi = s;
        } else {
          lo = s;
        }
        const double gp = -2.0 * frobenius_inner(Ys, G);
        double s_next = (gp != 0.0) ? s - g / gp : 0.5 * (lo + hi);
        if (!(s_next > lo && s_next < hi)) s_next = 0.5 * (lo + hi);
        if (s_next == s) break;
        s = s_next;
      }
      out.last_step = s;
      out.unnormalized = Y - s * G;
      out.E = out.unnormalized / frobenius_norm(out.unnormalized);
      return out;
    }
    Y = std::move(next);
  }
  out.fallback = true;
  out.unnormalized = Y;
  out.E = E_prev / frobenius_norm(E_prev);
  return out;
}

struct StabilizeOptions {
  double tol = 1e-13;  // absolute, on f
  std::optional<double> eps0;
  Structure structure = Structure::full;
  int max_outer = 50;
  int max_restarts = 60;
  int max_backtracks = 60;
  MinimizeOptions inner{};
  WarmStartOptions warm{};
};

/// Smallest Frobenius-norm perturbation eps* E* with
/// max over Omega_m of mu2(D (A + eps* E*)) = delta.
inline StabilizationResult stabilize(const Matrix& A, double delta, double m, const StabilizeOptions& opts = {}) {
  detail::require_square(A, "stabilize");
  if (!(m > 0.0 && m <= 1.0)) throw ContractViolation("stabilize: m must lie in (0, 1]");
  if (!std::isfinite(delta)) throw ContractViolation("stabilize: delta must be finite");

  StabilizationResult res;
  res.delta = delta;
  res.m = m;
  res.structure = opts.structure;
  const Eigen::Index n = A.rows();

  ExtremizerReport base = find_extremizer(A, m, std::nullopt, opts.inner.step.extremizer);
  if (base.mu_value <= delta) {
    res.already_satisfied = true;
    res.converged = true;
    res.E_star = Matrix::Zero(n, n);
    res.A_hat = A;
    res.achieved_mu = base.mu_value;
    res.d_star = base.d_star;
    res.message = "already satisfied";
    return res;
  }

  res.schur_bound = schur_upper_bound(A, m, delta);
  res.shift_bound = std::sqrt(static_cast<double>(n)) * (base.mu_value - delta) / m;
  const double bound = res.shift_bound;
  PenaltyFunctional P{A, delta, m, 1.0, opts.structure};

  // Initial direction: minus the normalized gradient at E = 0.
  Evaluation at_zero = evaluate_perturbation(A, delta, m, Matrix::Zero(n, n), base.d_star, opts.inner.step.extremizer);
  const Matrix G0 = project_structured(free_gradient(P, at_zero), opts.structure);
  if (!(frobenius_norm(G0) > 0.0)) throw ContractViolation("stabilize: zero initial gradient");
  const Matrix E0 = -G0 / frobenius_norm(G0);

  double eps = opts.eps0.value_or(0.01 * res.schur_bound);
  if (!(eps > 0.0)) throw ContractViolation("stabilize: eps0 must be positive");

  auto run_inner = [&](double e, const Matrix& start, const std::optional<DiagonalPoint>& wd,
                       const WorkingSet& ws) {
    MinimizeOptions io = opts.inner;
    io.warm_d = wd;
    io.working_set = ws;
    FlowState s = minimize(P.at(e), start, io);
    res.total_inner_steps += s.steps;
    return s;
  };

  FlowState state = run_inner(eps, E0, at_zero.d_star, {});
  while (state.F == 0.0) {
    if (++res.trace.restarts > opts.max_restarts) {
      throw ConvergenceError("stabilize: could not find eps0 below eps*");
    }
    eps *= 0.5;
    state = run_inner(eps, E0, at_zero.d_star, state.working_set);
  }

  auto record = [&](double e, const FlowState& s, int warm_steps) {
    res.trace.epsilons.push_back(e);
    res.trace.f_values.push_back(s.F);
    res.trace.fprime_values.push_back(s.F > 0.0 ? -frobenius_norm(s.G) : 0.0);
    res.trace.warm_start_steps.push_back(warm_steps);
    res.trace.inner_steps.push_back(s.steps);
  };
  record(eps, state, 0);

  const double mu_tol = std::sqrt(2.0 * opts.tol);
  int k = 0;
  while (state.F > opts.tol && k < opts.max_outer) {
    const FDerivative fd = f_and_derivative(state);
    double eps_next = eps - fd.f / fd.fprime;
    if (eps_next > bound) eps_next = 0.5 * (eps + bound);

    FlowState next_state;
    int warm_steps = 0;
    int backtracks = 0;
    while (true) {
      WarmStartResult ws =
          warm_start_transition(state.E, eps, eps_next, P, opts.warm, state.d_star, state.working_set);
      if (!in_structure(ws.E, opts.structure)) ws.E = project_structured(ws.E, opts.structure).normalized();
      warm_steps = ws.steps;
      next_state = run_inner(eps_next, ws.E, state.d_star, state.working_set);
      if (next_state.F > 0.0) break;
      // Overshot eps*: accept if the log-norm sits within tolerance of delta, else bisect back.
      if (delta - next_state.mu <= mu_tol) break;
      if (++backtracks > opts.max_backtracks) break;
      ++res.trace.backtracks;
      eps_next = 0.5 * (eps + eps_next);
    }
    eps = eps_next;
    state = std::move(next_state);
    record(eps, state, warm_steps);
    ++k;
  }

  res.epsilon_star = eps;
  res.E_star = state.E;
  res.A_hat = A + eps * state.E;
  ExtremizerReport cert = find_extremizer(res.A_hat, m, std::nullopt, opts.inner.step.extremizer);
  res.achieved_mu = cert.mu_value;
  res.d_star = cert.d_star;
  res.converged = state.F <= opts.tol && std::abs(res.achieved_mu - delta) <= std::max(mu_tol, 1e-12);
  if (!res.converged) {
    res.message = k >= opts.max_outer ? "outer iteration limit reached" : "certificate outside tolerance";
  }
  return res;
}

}  // namespace logstab
