#pragma once

// Two-layer vector field sigma(A2 sigma(A1 x + b1) + b2). Its Jacobian is
// D2 A2 D1 A1 with D1, D2 ranging over Omega_m, and both weights receive a
// perturbation of the same amplitude eps:
//
//   F(E1, E2) = 1/2 sum_i (lambda_i(Sym(D2 (A2 + eps E2) D1 (A1 + eps E1))) - delta)_+^2.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "logstab/errors.hpp"
#include "logstab/extremal_diag.hpp"
#include "logstab/inner_flow.hpp"
#include "logstab/linalg.hpp"
#include "logstab/outer_newton.hpp"

namespace logstab {

/// A1 is k x n (inner layer), A2 is n x k (outer layer).
struct TwoLayerInstance {
  Matrix A1;
  Matrix A2;
  double m = 1.0;
  double delta = 0.0;

  void validate() const {
    if (A1.rows() == 0 || A1.cols() == 0) throw DimensionError("two-layer: empty A1");
    if (A2.rows() != A1.cols() || A2.cols() != A1.rows()) {
      throw DimensionError("two-layer: A2 " + detail::shape_str(A2) + " does not close A1 " +
                           detail::shape_str(A1) + " into a square product");
    }
    if (!(m > 0.0 && m <= 1.0)) throw ContractViolation("two-layer: m must lie in (0, 1]");
    if (!std::isfinite(delta)) throw ContractViolation("two-layer: delta must be finite");
  }
};

struct DiagonalPair {
  DiagonalPoint d1;  // hidden layer, length k
  DiagonalPoint d2;  // output layer, length n

  bool operator==(const DiagonalPair& o) const { return d1 == o.d1 && d2 == o.d2; }
};

inline Matrix two_layer_product(const Matrix& A1, const Matrix& A2, const DiagonalPair& p) {
  return p.d2.d.asDiagonal() * A2 * p.d1.d.asDiagonal() * A1;
}

struct JointExtremizerReport {
  DiagonalPair d;
  double mu_value = 0.0;
  int sweeps = 0;
  bool converged = true;  // false when a sweep cap was hit before a joint fixed point
  ExtremizerMethod method = ExtremizerMethod::semi_combinatorial;
};

struct JointExtremizerOptions {
  int max_sweeps = 50;
  bool joint_escape = true;  // flip single entries of D1 and re-maximize over D2
  // Cold searches start the alternation from every D1 vertex when the
  // hidden width is at most this.
  int exhaustive_hidden = 8;
  ExtremizerOptions inner{};
};

namespace detail {

inline DiagObjective outer_objective(const Matrix& A1, const Matrix& A2, const Vector& d1) {
  return DiagObjective::one_layer(A2 * d1.asDiagonal() * A1);
}

inline DiagObjective inner_objective(const Matrix& A1, const Matrix& A2, const Vector& d2) {
  return DiagObjective(d2.asDiagonal() * A2, A1);
}

/// Alternating maximization over D2 and D1 until neither moves.
inline JointExtremizerReport alternate(const Matrix& A1, const Matrix& A2, double m, Vector d1,
                                       std::optional<Vector> d2, const JointExtremizerOptions& opts) {
  JointExtremizerReport rep;
  rep.converged = false;
  Vector cur2;
  for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
    ++rep.sweeps;
    ExtremizerReport r2 = search(outer_objective(A1, A2, d1), m, d2, opts.inner);
    ExtremizerReport r1 = search(inner_objective(A1, A2, r2.d_star.d), m, d1, opts.inner);
    if (r1.method == ExtremizerMethod::projected_flow || r2.method == ExtremizerMethod::projected_flow) {
      rep.method = ExtremizerMethod::projected_flow;
    }
    const bool fixed = d2 && *d2 == r2.d_star.d && d1 == r1.d_star.d;
    d1 = r1.d_star.d;
    d2 = r2.d_star.d;
    if (fixed) {
      rep.converged = true;
      break;
    }
  }
  rep.d = {{d1, m}, {*d2, m}};
  rep.mu_value = mu2(two_layer_product(A1, A2, rep.d));
  return rep;
}

inline JointExtremizerReport joint_search(const Matrix& A1, const Matrix& A2, double m,
                                          const std::optional<DiagonalPair>& warm,
                                          const JointExtremizerOptions& opts) {
  const Eigen::Index k = A1.rows();
  JointExtremizerReport best;
  if (warm) {
    best = alternate(A1, A2, m, warm->d1.d, warm->d2.d, opts);
  } else if (k <= opts.exhaustive_hidden) {
    int total = 0;
    Vector d1(k);
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << k); ++mask) {
      for (Eigen::Index i = 0; i < k; ++i) d1[i] = (mask >> i) & 1U ? 1.0 : m;
      JointExtremizerReport r = alternate(A1, A2, m, d1, std::nullopt, opts);
      total += r.sweeps;
      if (mask == 0 || better(r.mu_value, best.mu_value)) best = std::move(r);
    }
    best.sweeps = total;
  } else {
    best = alternate(A1, A2, m, Vector::Ones(k), std::nullopt, opts);
    JointExtremizerReport low = alternate(A1, A2, m, Vector::Constant(k, m), std::nullopt, opts);
    if (better(low.mu_value, best.mu_value)) best = std::move(low);
  }
  if (!opts.joint_escape) return best;
  int total = best.sweeps;
  const int max_rounds = 4 * static_cast<int>(k) + 8;
  for (int round = 0; round < max_rounds; ++round) {
    bool improved = false;
    for (Eigen::Index i = 0; i < k; ++i) {
      Vector d1 = best.d.d1.d;
      d1[i] = (d1[i] == 1.0) ? m : 1.0;
      JointExtremizerReport r = alternate(A1, A2, m, std::move(d1), best.d.d2.d, opts);
      total += r.sweeps;
      if (better(r.mu_value, best.mu_value)) {
        best = std::move(r);
        improved = true;
        break;
      }
    }
    if (!improved) break;
  }
  best.sweeps = total;
  return best;
}

}  // namespace detail

/// argmax over Omega_m x Omega_m of mu2(D2 A2 D1 A1).
inline JointExtremizerReport joint_extremizer(const Matrix& A1, const Matrix& A2, double m,
                                              const std::optional<DiagonalPair>& warm = std::nullopt,
                                              const JointExtremizerOptions& opts = {}) {
  TwoLayerInstance{A1, A2, m, 0.0}.validate();
  return detail::joint_search(A1, A2, m, warm, opts);
}

/// Exhaustive maximization over all vertex pairs (k + n <= 20).
inline JointExtremizerReport double_vertex_oracle(const Matrix& A1, const Matrix& A2, double m) {
  TwoLayerInstance{A1, A2, m, 0.0}.validate();
  const Eigen::Index k = A1.rows();
  const Eigen::Index n = A1.cols();
  if (k + n > 20) {
    throw CapacityError("double_vertex_oracle: k + n = " + std::to_string(k + n) + " exceeds the limit of 20");
  }
  JointExtremizerReport rep;
  rep.method = ExtremizerMethod::vertex_oracle;
  rep.mu_value = -std::numeric_limits<double>::infinity();
  Vector d1(k);
  const std::uint64_t count = std::uint64_t{1} << k;
  for (std::uint64_t mask = 0; mask < count; ++mask) {
    for (Eigen::Index i = 0; i < k; ++i) d1[i] = ((mask >> i) & 1u) ? 1.0 : m;
    ExtremizerReport r = detail::enumerate_vertices(detail::outer_objective(A1, A2, d1), m);
    if (r.mu_value > rep.mu_value) {
      rep.mu_value = r.mu_value;
      rep.d = {{d1, m}, r.d_star};
    }
  }
  rep.sweeps = 0;
  return rep;
}

struct PairTerm {
  DiagonalPair d;
  SpectralBundle bundle;
  double F = 0.0;
};

using PairWorkingSet = std::vector<DiagonalPair>;

struct TwoLayerEvaluation {
  double F = 0.0;
  SpectralBundle bundle;
  DiagonalPair d;
  JointExtremizerReport extremizer;
  std::vector<PairTerm> terms;  // terms[0] belongs to the extremizer pair

  double mu() const { return bundle.eigenvalues[0]; }
};

namespace detail {

inline void remember(PairWorkingSet& w, const DiagonalPair& p) {
  for (const auto& q : w) {
    if (q == p) return;
  }
  if (w.size() >= kMaxWorkingSet) w.erase(w.begin());
  w.push_back(p);
}

inline bool contains(const PairWorkingSet& w, const DiagonalPair& p) {
  for (const auto& q : w) {
    if (q == p) return true;
  }
  return false;
}

inline TwoLayerEvaluation evaluate_pair(const TwoLayerInstance& inst, const Matrix& A1h, const Matrix& A2h,
                                        const std::optional<DiagonalPair>& warm, const JointExtremizerOptions& xopts,
                                        const PairWorkingSet& working_set) {
  TwoLayerEvaluation ev;
  ev.extremizer = joint_search(A1h, A2h, inst.m, warm, xopts);
  ev.d = ev.extremizer.d;
  auto add = [&](const DiagonalPair& p) {
    PairTerm t;
    t.d = p;
    t.bundle = symmetric_eig(sym(two_layer_product(A1h, A2h, p)));
    t.F = spectral_penalty(t.bundle.eigenvalues, inst.delta);
    ev.F += t.F;
    ev.terms.push_back(std::move(t));
  };
  add(ev.d);
  for (const auto& p : working_set) {
    if (!(p == ev.d)) add(p);
  }
  ev.bundle = ev.terms.front().bundle;
  return ev;
}

}  // namespace detail

/// F at amplitude eps for unit-norm E1, E2.
inline TwoLayerEvaluation eval_two_layer(const TwoLayerInstance& inst, double eps, const Matrix& E1, const Matrix& E2,
                                         const std::optional<DiagonalPair>& warm = std::nullopt,
                                         const JointExtremizerOptions& xopts = {},
                                         const PairWorkingSet& working_set = {}) {
  inst.validate();
  detail::require_same_shape(inst.A1, E1, "eval_two_layer");
  detail::require_same_shape(inst.A2, E2, "eval_two_layer");
  for (const Matrix* E : {&E1, &E2}) {
    const double nrm = frobenius_norm(*E);
    if (std::abs(nrm - 1.0) > 1e-10) {
      throw ContractViolation("eval_two_layer: perturbations must have unit Frobenius norm (got " +
                              std::to_string(nrm) + ")");
    }
  }
  return detail::evaluate_pair(inst, inst.A1 + eps * E1, inst.A2 + eps * E2, warm, xopts, working_set);
}

struct TwoLayerGradients {
  Matrix G1;  // k x n
  Matrix G2;  // n x k
};

/// G1 = sum gamma_i (D1 A2h^T D2 x_i) x_i^T, G2 = sum gamma_i (D2 x_i)(D1 A1h x_i)^T
/// over eigenvalues above delta, with A_kh = A_k + eps E_k.
inline TwoLayerGradients two_layer_gradients(const Matrix& A1h, const Matrix& A2h, double delta,
                                             const SpectralBundle& bundle, const DiagonalPair& d) {
  TwoLayerGradients g{Matrix::Zero(A1h.rows(), A1h.cols()), Matrix::Zero(A2h.rows(), A2h.cols())};
  const Matrix left1 = d.d1.d.asDiagonal() * A2h.transpose() * d.d2.d.asDiagonal();
  const Matrix right2 = d.d1.d.asDiagonal() * A1h;
  for (Eigen::Index i = 0; i < bundle.size(); ++i) {
    const double gamma = bundle.eigenvalues[i] - delta;
    if (gamma <= 0.0) break;
    const Vector x = bundle.eigenvectors.col(i);
    g.G1.noalias() += gamma * (left1 * x) * x.transpose();
    g.G2.noalias() += gamma * d.d2.d.cwiseProduct(x) * (right2 * x).transpose();
  }
  return g;
}

inline TwoLayerGradients two_layer_gradients(const TwoLayerInstance& inst, double eps, const Matrix& E1,
                                             const Matrix& E2, const TwoLayerEvaluation& ev) {
  const Matrix A1h = inst.A1 + eps * E1;
  const Matrix A2h = inst.A2 + eps * E2;
  TwoLayerGradients g = two_layer_gradients(A1h, A2h, inst.delta, ev.terms.front().bundle, ev.terms.front().d);
  for (std::size_t t = 1; t < ev.terms.size(); ++t) {
    if (ev.terms[t].F == 0.0) continue;
    TwoLayerGradients gt = two_layer_gradients(A1h, A2h, inst.delta, ev.terms[t].bundle, ev.terms[t].d);
    g.G1 += gt.G1;
    g.G2 += gt.G2;
  }
  return g;
}

struct TwoLayerFlowState {
  Matrix E1;
  Matrix E2;
  DiagonalPair d_star;
  double F = 0.0;
  Matrix G1;
  Matrix G2;
  double h = 0.1;
  double t = 0.0;
  double mu = 0.0;
  int steps = 0;
  int rejections = 0;
  int set_version = 0;
  PairWorkingSet working_set;
  bool stationary = false;
  bool converged = false;
};

struct TwoLayerMinimizeOptions {
  double theta = 2.0;
  double stall_tol = 1e-9;
  int stall_window = 100;
  double stall_rel = 1e-6;
  bool bb_steps = true;
  int max_steps = 5000;
  double f_floor = 1e-14;
  double h0 = 0.1;
  double min_step = 1e-14;
  double max_step = 1e8;
  bool global_check = true;
  int max_global_restarts = 10;
  std::optional<DiagonalPair> warm_d;
  PairWorkingSet working_set;
  JointExtremizerOptions extremizer{};
  std::function<void(const TwoLayerFlowState&)> observer;
};

namespace detail {

inline TwoLayerFlowState pair_state(const TwoLayerInstance& inst, double eps, Matrix E1, Matrix E2,
                                    const TwoLayerEvaluation& ev, const PairWorkingSet& w) {
  TwoLayerFlowState s;
  TwoLayerGradients g = two_layer_gradients(inst, eps, E1, E2, ev);
  s.E1 = std::move(E1);
  s.E2 = std::move(E2);
  s.d_star = ev.d;
  s.F = ev.F;
  s.G1 = std::move(g.G1);
  s.G2 = std::move(g.G2);
  s.mu = ev.mu();
  s.working_set = w;
  remember(s.working_set, ev.d);
  return s;
}

inline TwoLayerFlowState pair_state_at(const TwoLayerInstance& inst, double eps, const Matrix& E1, const Matrix& E2,
                                       const std::optional<DiagonalPair>& warm, const JointExtremizerOptions& xopts,
                                       const PairWorkingSet& w) {
  TwoLayerEvaluation ev = eval_two_layer(inst, eps, E1, E2, warm, xopts, w);
  return pair_state(inst, eps, E1, E2, ev, w);
}

inline double pair_residual(const TwoLayerFlowState& s) {
  const double r1 = frobenius_norm(constrained_direction(s.E1, s.G1)) / std::max(1.0, frobenius_norm(s.G1));
  const double r2 = frobenius_norm(constrained_direction(s.E2, s.G2)) / std::max(1.0, frobenius_norm(s.G2));
  return std::max(r1, r2);
}

}  // namespace detail

/// One coupled Euler step: both factors move with the same h and are
/// accepted or rejected together on the joint F.
inline TwoLayerFlowState two_layer_euler_step(const TwoLayerFlowState& input, const TwoLayerInstance& inst, double eps,
                                              const TwoLayerMinimizeOptions& opts = {}) {
  if (!(opts.theta > 1.0)) throw ContractViolation("two_layer_euler_step: theta must exceed 1");
  TwoLayerFlowState state = input;
  Matrix dir1 = constrained_direction(state.E1, state.G1);
  Matrix dir2 = constrained_direction(state.E2, state.G2);
  double h = state.h;
  bool rejected = false;
  int rejections = 0;
  while (state.F > 0.0 && h >= opts.min_step) {
    Matrix T1 = state.E1 + h * dir1;
    Matrix T2 = state.E2 + h * dir2;
    T1 /= frobenius_norm(T1);
    T2 /= frobenius_norm(T2);
    TwoLayerEvaluation ev = eval_two_layer(inst, eps, T1, T2, state.d_star, opts.extremizer, state.working_set);
    if (!detail::contains(state.working_set, ev.d)) {
      PairWorkingSet grown = state.working_set;
      detail::remember(grown, ev.d);
      TwoLayerFlowState regrown =
          detail::pair_state_at(inst, eps, state.E1, state.E2, state.d_star, opts.extremizer, grown);
      regrown.t = state.t;
      regrown.h = state.h;
      regrown.steps = state.steps;
      regrown.rejections = state.rejections;
      regrown.set_version = state.set_version + 1;
      state = std::move(regrown);
      dir1 = constrained_direction(state.E1, state.G1);
      dir2 = constrained_direction(state.E2, state.G2);
      continue;
    }
    if (ev.F < state.F) {
      TwoLayerFlowState next = detail::pair_state(inst, eps, std::move(T1), std::move(T2), ev, state.working_set);
      next.t = state.t + h;
      next.h = rejected ? h : std::min(opts.theta * h, opts.max_step);
      next.steps = state.steps + 1;
      next.rejections = state.rejections + rejections;
      next.set_version = state.set_version;
      return next;
    }
    h /= opts.theta;
    rejected = true;
    ++rejections;
  }
  state.stationary = true;
  state.rejections += rejections;
  return state;
}

inline TwoLayerFlowState two_layer_minimize(const TwoLayerInstance& inst, double eps, const Matrix& E1,
                                            const Matrix& E2, const TwoLayerMinimizeOptions& opts = {}) {
  if (!(eps > 0.0)) throw ContractViolation("two_layer_minimize: eps must be positive");
  TwoLayerFlowState s = detail::pair_state_at(inst, eps, E1, E2, opts.warm_d, opts.extremizer, opts.working_set);
  s.h = opts.h0;
  if (opts.observer) opts.observer(s);
  int restarts = 0;
  while (true) {
    std::vector<double> history{s.F};
    while (s.steps < opts.max_steps) {
      if (s.F <= opts.f_floor || detail::pair_residual(s) <= opts.stall_tol) {
        s.converged = true;
        break;
      }
      const int version = s.set_version;
      TwoLayerFlowState next = two_layer_euler_step(s, inst, eps, opts);
      if (next.stationary) {
        s = std::move(next);
        s.converged = true;
        break;
      }
      if (opts.bb_steps && next.set_version == version) {
        // Barzilai-Borwein proposal on the product of the two spheres
        const Matrix s1 = next.E1 - s.E1;
        const Matrix s2 = next.E2 - s.E2;
        const Matrix y1 = constrained_direction(s.E1, s.G1) - constrained_direction(next.E1, next.G1);
        const Matrix y2 = constrained_direction(s.E2, s.G2) - constrained_direction(next.E2, next.G2);
        const double curv = frobenius_inner(s1, y1) + frobenius_inner(s2, y2);
        if (curv > 0.0) {
          next.h = std::clamp((frobenius_inner(s1, s1) + frobenius_inner(s2, s2)) / curv, opts.min_step, opts.max_step);
        }
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
    JointExtremizerReport cold =
        detail::joint_search(inst.A1 + eps * s.E1, inst.A2 + eps * s.E2, inst.m, std::nullopt, opts.extremizer);
    if (!detail::better(cold.mu_value, s.mu)) break;
    ++restarts;
    PairWorkingSet grown = s.working_set;
    detail::remember(grown, cold.d);
    TwoLayerFlowState r = detail::pair_state_at(inst, eps, s.E1, s.E2, cold.d, opts.extremizer, grown);
    r.h = s.h;
    r.t = s.t;
    r.steps = s.steps;
    r.rejections = s.rejections;
    r.set_version = s.set_version + 1;
    s = std::move(r);
    if (opts.observer) opts.observer(s);
  }
  return s;
}

struct TwoLayerResult {
  double delta = 0.0;
  double m = 1.0;
  double epsilon_star = 0.0;
  Matrix E1_star;
  Matrix E2_star;
  Matrix A1_hat;
  Matrix A2_hat;
  double achieved_mu = 0.0;
  DiagonalPair d_star;
  OuterTrace trace;
  bool already_satisfied = false;
  bool converged = false;
  int total_inner_steps = 0;
  std::string message;

  int outer_iterations() const { return trace.size() == 0 ? 0 : static_cast<int>(trace.size()) - 1; }
};

struct TwoLayerStabilizeOptions {
  double tol = 1e-13;
  std::optional<double> eps0;
  int max_outer = 50;
  int max_restarts = 60;
  int max_backtracks = 60;
  TwoLayerMinimizeOptions inner{};
};

/// Smallest shared amplitude eps* with max over D1, D2 of
/// mu2(D2 (A2 + eps* E2) D1 (A1 + eps* E1)) = delta.
///
/// Newton uses f'(eps) = -(||G1|| + ||G2||); each inner run starts from
/// the previous unit-norm pair.
inline TwoLayerResult two_layer_stabilize(const TwoLayerInstance& inst, const TwoLayerStabilizeOptions& opts = {}) {
  inst.validate();
  TwoLayerResult res;
  res.delta = inst.delta;
  res.m = inst.m;
  const Matrix Z1 = Matrix::Zero(inst.A1.rows(), inst.A1.cols());
  const Matrix Z2 = Matrix::Zero(inst.A2.rows(), inst.A2.cols());

  JointExtremizerReport base = detail::joint_search(inst.A1, inst.A2, inst.m, std::nullopt, opts.inner.extremizer);
  if (base.mu_value <= inst.delta) {
    res.already_satisfied = true;
    res.converged = true;
    res.E1_star = Z1;
    res.E2_star = Z2;
    res.A1_hat = inst.A1;
    res.A2_hat = inst.A2;
    res.achieved_mu = base.mu_value;
    res.d_star = base.d;
    res.message = "already satisfied";
    return res;
  }

  TwoLayerEvaluation at_zero = detail::evaluate_pair(inst, inst.A1, inst.A2, base.d, opts.inner.extremizer, {});
  TwoLayerGradients g0 = two_layer_gradients(inst, 0.0, Z1, Z2, at_zero);
  const double n1 = frobenius_norm(g0.G1);
  const double n2 = frobenius_norm(g0.G2);
  if (!(n1 > 0.0) || !(n2 > 0.0)) throw ContractViolation("two_layer_stabilize: zero initial gradient");
  const Matrix E10 = -g0.G1 / n1;
  const Matrix E20 = -g0.G2 / n2;

  // 1% of the first Newton step from eps = 0.
  double eps = opts.eps0.value_or(0.01 * at_zero.F / (n1 + n2));
  if (!(eps > 0.0)) throw ContractViolation("two_layer_stabilize: eps0 must be positive");

  auto run_inner = [&](double e, const Matrix& E1, const Matrix& E2, const std::optional<DiagonalPair>& wd,
                       const PairWorkingSet& ws) {
    TwoLayerMinimizeOptions io = opts.inner;
    io.warm_d = wd;
    io.working_set = ws;
    TwoLayerFlowState s = two_layer_minimize(inst, e, E1, E2, io);
    res.total_inner_steps += s.steps;
    return s;
  };

  TwoLayerFlowState state = run_inner(eps, E10, E20, base.d, {});
  while (state.F == 0.0) {
    if (++res.trace.restarts > opts.max_restarts) {
      throw ConvergenceError("two_layer_stabilize: could not find eps0 below eps*");
    }
    eps *= 0.5;
    state = run_inner(eps, E10, E20, base.d, state.working_set);
  }

  auto record = [&](double e, const TwoLayerFlowState& s) {
    res.trace.epsilons.push_back(e);
    res.trace.f_values.push_back(s.F);
    res.trace.fprime_values.push_back(s.F > 0.0 ? -(frobenius_norm(s.G1) + frobenius_norm(s.G2)) : 0.0);
    res.trace.warm_start_steps.push_back(0);
    res.trace.inner_steps.push_back(s.steps);
  };
  record(eps, state);

  const double mu_tol = std::sqrt(2.0 * opts.tol);
  int k = 0;
  while (state.F > opts.tol && k < opts.max_outer) {
    const double fprime = -(frobenius_norm(state.G1) + frobenius_norm(state.G2));
    if (!(fprime < 0.0)) throw ContractViolation("two_layer_stabilize: zero gradient with positive penalty");
    double eps_next = eps - state.F / fprime;
    TwoLayerFlowState next_state;
    int backtracks = 0;
    while (true) {
      next_state = run_inner(eps_next, state.E1, state.E2, state.d_star, state.working_set);
      if (next_state.F > 0.0) break;
      if (inst.delta - next_state.mu <= mu_tol) break;
      if (++backtracks > opts.max_backtracks) break;
      ++res.trace.backtracks;
      eps_next = 0.5 * (eps + eps_next);
    }
    eps = eps_next;
    state = std::move(next_state);
    record(eps, state);
    ++k;
  }

  res.epsilon_star = eps;
  res.E1_star = state.E1;
  res.E2_star = state.E2;
  res.A1_hat = inst.A1 + eps * state.E1;
  res.A2_hat = inst.A2 + eps * state.E2;
  JointExtremizerReport cert =
      detail::joint_search(res.A1_hat, res.A2_hat, inst.m, std::nullopt, opts.inner.extremizer);
  res.achieved_mu = cert.mu_value;
  res.d_star = cert.d;
  res.converged = state.F <= opts.tol && std::abs(res.achieved_mu - inst.delta) <= std::max(mu_tol, 1e-12);
  if (!res.converged) {
    res.message = k >= opts.max_outer ? "outer iteration limit reached" : "certificate outside tolerance";
  }
  return res;
}

}  // namespace logstab
