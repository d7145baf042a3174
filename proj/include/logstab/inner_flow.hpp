#pragma once

// Inner iteration: for a fixed amplitude epsilon, minimize
//
//   F(E) = 1/2 sum_i (lambda_i(Sym(D*(A + eps E))) - delta)_+^2
//
// over unit Frobenius-norm E by integrating the norm-preserving gradient
// system dE/dt = -G + <G, E> E with explicit Euler and step rejection.
// D* is the worst-case activation diagonal at the current point; it is
// treated as locally constant and recomputed after every trial step.
//
// Every vertex that has served as D* stays in a working set and keeps
// contributing its own penalty term. Near a point where two vertices tie
// for the maximum, the single-D* penalty jumps as D* flips between them and
// the flow stalls on the ridge; the summed penalty stays continuous there
// and has the same zero set.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "logstab/errors.hpp"
#include "logstab/extremal_diag.hpp"
#include "logstab/linalg.hpp"

namespace logstab {

/// Admissible perturbation subspace.
enum class Structure { full, diagonal };

inline const char* to_string(Structure s) { return s == Structure::full ? "full" : "diagonal"; }

inline Structure parse_structure(const std::string& s) {
  if (s == "full") return Structure::full;
  if (s == "diagonal") return Structure::diagonal;
  throw ContractViolation("unknown structure '" + s + "' (expected full or diagonal)");
}

struct PenaltyFunctional {
  Matrix base;  // A
  double delta = 0.0;
  double m = 1.0;
  double epsilon = 0.0;
  Structure structure = Structure::full;

  void validate() const {
    detail::require_square(base, "PenaltyFunctional");
    if (!(epsilon > 0.0)) throw ContractViolation("PenaltyFunctional: epsilon must be positive");
    if (!(m > 0.0 && m <= 1.0)) throw ContractViolation("PenaltyFunctional: m must lie in (0, 1]");
  }

  PenaltyFunctional at(double eps) const {
    PenaltyFunctional p = *this;
    p.epsilon = eps;
    return p;
  }
};

/// Penalty contribution of one vertex diagonal.
struct VertexTerm {
  DiagonalPoint d;
  SpectralBundle bundle;  // of Sym(diag(d) (A + perturbation))
  double F = 0.0;
};

/// Result of evaluating the functional at a perturbation.
///
/// `terms[0]` belongs to the extremizer D* found at this point; further
/// terms come from the working set of vertices met earlier in the flow.
/// At a point where D* is the only vertex above delta, F reduces to
/// 1/2 sum (lambda_i(Sym(D*(A + eps E))) - delta)_+^2.
struct Evaluation {
  double F = 0.0;
  SpectralBundle bundle;
  DiagonalPoint d_star;
  ExtremizerReport extremizer;
  std::vector<VertexTerm> terms;

  double mu() const { return bundle.eigenvalues[0]; }
};

/// 1/2 sum (lambda_i - delta)_+^2 over the spectrum.
inline double spectral_penalty(const Vector& eigenvalues, double delta) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < eigenvalues.size(); ++i) {
    const double g = eigenvalues[i] - delta;
    if (g > 0.0) s += g * g;
  }
  return 0.5 * s;
}

inline int active_count(const Vector& eigenvalues, double delta) {
  int k = 0;
  for (Eigen::Index i = 0; i < eigenvalues.size(); ++i) k += eigenvalues[i] > delta ? 1 : 0;
  return k;
}

using WorkingSet = std::vector<DiagonalPoint>;

inline bool contains(const WorkingSet& w, const DiagonalPoint& d) {
  for (const auto& v : w) {
    if (v == d) return true;
  }
  return false;
}

/// Evaluates the penalty at A + X for an arbitrary perturbation X (not
/// necessarily unit norm). D* is searched warm from `warm` when given;
/// every vertex of `working_set` contributes its own penalty term.
inline Evaluation evaluate_perturbation(const Matrix& A, double delta, double m, const Matrix& X,
                                        const std::optional<DiagonalPoint>& warm = std::nullopt,
                                        const ExtremizerOptions& xopts = {}, const WorkingSet& working_set = {}) {
  detail::require_same_shape(A, X, "evaluate_perturbation");
  const Matrix P = A + X;
  Evaluation ev;
  ev.extremizer = find_extremizer(P, m, warm, xopts);
  ev.d_star = ev.extremizer.d_star;
  auto add_term = [&](const DiagonalPoint& d) {
    VertexTerm t;
    t.d = d;
    t.bundle = symmetric_eig(sym(d.d.asDiagonal() * P));
    t.F = spectral_penalty(t.bundle.eigenvalues, delta);
    ev.F += t.F;
    ev.terms.push_back(std::move(t));
  };
  add_term(ev.d_star);
  for (const auto& d : working_set) {
    if (!(d == ev.d_star)) add_term(d);
  }
  ev.bundle = ev.terms.front().bundle;
  return ev;
}

/// F_eps(E) with D* computed on A + eps E.
inline Evaluation eval_functional(const PenaltyFunctional& P, const Matrix& E,
                                  const std::optional<DiagonalPoint>& warm = std::nullopt,
                                  const ExtremizerOptions& xopts = {}, const WorkingSet& working_set = {}) {
  P.validate();
  detail::require_same_shape(P.base, E, "eval_functional");
  const double nrm = frobenius_norm(E);
  if (std::abs(nrm - 1.0) > 1e-10) {
    throw ContractViolation("eval_functional: E must have unit Frobenius norm (got " + std::to_string(nrm) + ")");
  }
  return evaluate_perturbation(P.base, P.delta, P.m, P.epsilon * E, warm, xopts, working_set);
}

/// G = sum over eigenvalues above delta of (lambda_i - delta) (D* x_i) x_i^T.
inline Matrix free_gradient(double delta, const SpectralBundle& bundle, const DiagonalPoint& d_star) {
  const Eigen::Index n = bundle.size();
  Matrix G = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double gamma = bundle.eigenvalues[i] - delta;
    if (gamma <= 0.0) break;  // eigenvalues are sorted descending
    const Vector x = bundle.eigenvectors.col(i);
    G.noalias() += gamma * (d_star.d.cwiseProduct(x)) * x.transpose();
  }
  return G;
}

/// Gradient of the full evaluation: the sum of the per-vertex gradients.
inline Matrix free_gradient(const PenaltyFunctional& P, const Evaluation& ev) {
  Matrix G = free_gradient(P.delta, ev.terms.front().bundle, ev.terms.front().d);
  for (std::size_t k = 1; k < ev.terms.size(); ++k) {
    if (ev.terms[k].F > 0.0) G += free_gradient(P.delta, ev.terms[k].bundle, ev.terms[k].d);
  }
  return G;
}

/// Orthogonal projection onto the admissible subspace.
inline Matrix project_structured(const Matrix& G, Structure s) {
  if (s == Structure::full) return G;
  Matrix out = Matrix::Zero(G.rows(), G.cols());
  out.diagonal() = G.diagonal();
  return out;
}

inline bool in_structure(const Matrix& E, Structure s) {
  if (s == Structure::full) return true;
  for (Eigen::Index i = 0; i < E.rows(); ++i) {
    for (Eigen::Index j = 0; j < E.cols(); ++j) {
      if (i != j && E(i, j) != 0.0) return false;
    }
  }
  return true;
}

/// -G + <G, E> E: the steepest descent direction tangent to the unit sphere at E.
inline Matrix constrained_direction(const Matrix& E, const Matrix& G) {
  const double mu = frobenius_inner(G, E);
  return -G + mu * E;
}

/// Snapshot of the integrator. `G` is the free gradient projected onto the
/// admissible subspace.
struct FlowState {
  Matrix E;
  DiagonalPoint d_star;
  double F = 0.0;
  Matrix G;
  double h = 0.1;
  double t = 0.0;
  double mu = 0.0;         // largest eigenvalue of Sym(D*(A + eps E))
  int active = 0;          // eigenvalues above delta
  int steps = 0;           // accepted steps
  int rejections = 0;      // rejected trial steps
  int dstar_switches = 0;  // global D* corrections applied
  int set_version = 0;     // bumped whenever the working set grows (F changes definition)
  WorkingSet working_set;
  bool stationary = false;
  bool converged = false;
};

namespace detail {

inline constexpr std::size_t kMaxWorkingSet = 64;

inline void remember(WorkingSet& w, const DiagonalPoint& d) {
  if (contains(w, d)) return;
  if (w.size() >= kMaxWorkingSet) w.erase(w.begin());
  w.push_back(d);
}

inline FlowState state_from(const PenaltyFunctional& P, Matrix E, const Evaluation& ev, const WorkingSet& w) {
  FlowState s;
  s.working_set = w;
  remember(s.working_set, ev.d_star);
  s.E = std::move(E);
  s.d_star = ev.d_star;
  s.F = ev.F;
  s.G = project_structured(free_gradient(P, ev), P.structure);
  s.mu = ev.mu();
  s.active = active_count(ev.bundle.eigenvalues, P.delta);
  return s;
}

}  // namespace detail

/// Builds a consistent FlowState at E (searching D* warm from `warm`).
inline FlowState make_state(const PenaltyFunctional& P, const Matrix& E,
                            const std::optional<DiagonalPoint>& warm = std::nullopt, double h = 0.1,
                            const ExtremizerOptions& xopts = {}, const WorkingSet& working_set = {}) {
  Evaluation ev = eval_functional(P, E, warm, xopts, working_set);
  FlowState s = detail::state_from(P, E, ev, working_set);
  s.h = h;
  return s;
}

struct StepOptions {
  double min_step = 1e-14;
  double max_step = 1e8;
  ExtremizerOptions extremizer{};
};

/// One Euler step with step rejection.
///
/// Trial points E(h) = normalize(E + h dE) are accepted once F strictly
/// decreases; otherwise h is divided by theta. Without rejections the next
/// proposed step is theta * h. If h falls below `min_step` the input state
/// is returned marked stationary.
///
/// A trial point whose D* is not yet in the working set enlarges the set;
/// the current point is then re-evaluated under the enlarged set and the
/// step restarts from there.
inline FlowState euler_step(const FlowState& input, const PenaltyFunctional& P, double theta = 2.0,
                            const StepOptions& opts = {}) {
  if (!(theta > 1.0)) throw ContractViolation("euler_step: theta must exceed 1");
  FlowState state = input;
  Matrix dir = constrained_direction(state.E, state.G);
  if (frobenius_norm(dir) == 0.0 || state.F == 0.0) {
    FlowState same = state;
    same.stationary = true;
    return same;
  }
  double h = state.h;
  bool rejected = false;
  int rejections = 0;
  while (h >= opts.min_step) {
    Matrix trial = state.E + h * dir;
    const double nrm = frobenius_norm(trial);
    trial /= nrm;
    Evaluation ev = evaluate_perturbation(P.base, P.delta, P.m, P.epsilon * trial, state.d_star, opts.extremizer,
                                          state.working_set);
    if (!contains(state.working_set, ev.d_star)) {
      WorkingSet grown = state.working_set;
      detail::remember(grown, ev.d_star);
      Evaluation here = evaluate_perturbation(P.base, P.delta, P.m, P.epsilon * state.E, state.d_star,
                                              opts.extremizer, grown);
      FlowState regrown = detail::state_from(P, state.E, here, grown);
      regrown.t = state.t;
      regrown.h = state.h;
      regrown.steps = state.steps;
      regrown.rejections = state.rejections;
      regrown.dstar_switches = state.dstar_switches;
      regrown.set_version = state.set_version + 1;
      state = std::move(regrown);
      if (state.F == 0.0) break;
      dir = constrained_direction(state.E, state.G);
      if (frobenius_norm(dir) == 0.0) break;
      continue;
    }
    if (ev.F < state.F) {
      FlowState next = detail::state_from(P, std::move(trial), ev, state.working_set);
      next.t = state.t + h;
      next.h = rejected ? h : std::min(theta * h, opts.max_step);
      next.steps = state.steps + 1;
      next.rejections = state.rejections + rejections;
      next.dstar_switches = state.dstar_switches;
      next.set_version = state.set_version;
      return next;
    }
    h /= theta;
    rejected = true;
    ++rejections;
  }
  FlowState same = state;
  same.stationary = true;
  same.rejections += rejections;
  return same;
}

struct MinimizeOptions {
  double theta = 2.0;
  double stall_tol = 1e-9;
  // Also stop once F has dropped by less than stall_rel * F over the last
  // stall_window accepted steps under an unchanged working set.
  int stall_window = 100;
  double stall_rel = 1e-6;
  // Propose the next step length by the Barzilai-Borwein rule instead of
  // theta * h (the step is still rejected until F decreases).
  bool bb_steps = true;
  int max_steps = 5000;
  double f_floor = 1e-14;
  double h0 = 0.1;
  /// On termination, re-search D* cold at the final point and continue if a
  /// strictly larger log-norm is found.
  bool global_check = true;
  int max_global_restarts = 10;
  std::optional<DiagonalPoint> warm_d;
  WorkingSet working_set;
  StepOptions step{};
  /// Called with the initial state and after every accepted step.
  std::function<void(const FlowState&)> observer;
};

/// ||-G + <G,E> E||_F relative to max(1, ||G||_F).
inline double stationarity_residual(const FlowState& s) {
  return frobenius_norm(constrained_direction(s.E, s.G)) / std::max(1.0, frobenius_norm(s.G));
}

/// Integrates the constrained gradient system from E0 until stationarity,
/// F <= f_floor, step underflow, or max_steps accepted steps.
inline FlowState minimize(const PenaltyFunctional& P, const Matrix& E0, const MinimizeOptions& opts = {}) {
  P.validate();
  detail::require_same_shape(P.base, E0, "minimize");
  if (std::abs(frobenius_norm(E0) - 1.0) > 1e-10) throw ContractViolation("minimize: E0 must have unit norm");
  if (!in_structure(E0, P.structure)) {
    throw ContractViolation("minimize: E0 does not lie in the admissible subspace");
  }
  FlowState s = make_state(P, E0, opts.warm_d, opts.h0, opts.step.extremizer, opts.working_set);
  if (opts.observer) opts.observer(s);

  int restarts = 0;
  while (true) {
    std::vector<double> history{s.F};
    while (s.steps < opts.max_steps) {
      if (s.F <= opts.f_floor || stationarity_residual(s) <= opts.stall_tol) {
        s.converged = true;
        break;
      }
      const int version = s.set_version;
      FlowState next = euler_step(s, P, opts.theta, opts.step);
      if (next.stationary) {
        s = std::move(next);
        s.converged = true;
        break;
      }
      if (opts.bb_steps && next.set_version == version) {
        const Matrix step = next.E - s.E;
        const Matrix change = constrained_direction(s.E, s.G) - constrained_direction(next.E, next.G);
        const double curv = frobenius_inner(step, change);
        if (curv > 0.0) next.h = std::clamp(frobenius_inner(step, step) / curv, opts.step.min_step, opts.step.max_step);
      }
      s = std::move(next);
      if (opts.observer) opts.observer(s);
      if (s.set_version != version) history.clear();
      history.push_back(s.F);
      const auto w = static_cast<std::size_t>(opts.stall_window);
      if (opts.stall_window > 0 && history.size() > w) {
        const double old = history[history.size() - 1 - w];
        if (old - s.F <= opts.stall_rel * old) {
          s.converged = true;
          break;
        }
      }
    }
    if (!opts.global_check || restarts >= opts.max_global_restarts || s.F == 0.0) break;
    ExtremizerReport cold = find_extremizer(P.base + P.epsilon * s.E, P.m, std::nullopt, opts.step.extremizer);
    if (!detail::better(cold.mu_value, s.mu)) break;
    // The flow was tracking a non-global local maximizer; restart from the better one.
    const int steps = s.steps;
    const int rej = s.rejections;
    const double t = s.t;
    const double h = s.h;
    const int version = s.set_version;
    WorkingSet grown = s.working_set;
    detail::remember(grown, cold.d_star);
    s = make_state(P, s.E, cold.d_star, h, opts.step.extremizer, grown);
    s.set_version = version + 1;
    s.steps = steps;
    s.rejections = rej;
    s.t = t;
    s.dstar_switches = ++restarts;
    if (opts.observer) opts.observer(s);
  }
  if (s.steps >= opts.max_steps && !s.converged) s.converged = false;
  return s;
}

}  // namespace logstab
