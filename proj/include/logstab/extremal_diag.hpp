#pragma once

// Worst-case activation diagonal: D* = argmax over m <= d_i <= 1 of
// mu2(diag(d) M).
//
// d -> lambda_max(Sym(L diag(d) R)) is a pointwise maximum of functions
// linear in d, hence convex, so maximizers sit on vertices of the box but
// local maxima that are not global are common. The search combines the
// sign iteration (move each coordinate to the bound its partial derivative
// points at) with a flip-neighbourhood escape and, on cold starts, a small
// multistart seeded from the spectrum of Sym(L R).

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "logstab/errors.hpp"
#include "logstab/linalg.hpp"

namespace logstab {

/// A point of the box [m, 1]^n, i.e. a diagonal matrix of Omega_m.
struct DiagonalPoint {
  Vector d;
  double m = 1.0;

  static DiagonalPoint ones(Eigen::Index n, double m) { return {Vector::Ones(n), m}; }
  static DiagonalPoint lower(Eigen::Index n, double m) { return {Vector::Constant(n, m), m}; }

  Eigen::Index size() const { return d.size(); }
  Matrix matrix() const { return d.asDiagonal(); }

  bool is_vertex() const {
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      if (d[i] != 1.0 && d[i] != m) return false;
    }
    return true;
  }

  bool operator==(const DiagonalPoint& o) const { return m == o.m && d.size() == o.d.size() && d == o.d; }

  /// "1" for entries at the upper bound, "m" at the lower bound, value otherwise.
  std::string pattern() const {
    std::string s;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      if (i) s += ' ';
      if (d[i] == 1.0) {
        s += '1';
      } else if (d[i] == m) {
        s += 'm';
      } else {
        s += std::to_string(d[i]);
      }
    }
    return s;
  }
};

enum class ExtremizerMethod { semi_combinatorial, projected_flow, vertex_oracle };

inline const char* to_string(ExtremizerMethod m) {
  switch (m) {
    case ExtremizerMethod::semi_combinatorial: return "semi_combinatorial";
    case ExtremizerMethod::projected_flow: return "projected_flow";
    case ExtremizerMethod::vertex_oracle: return "vertex_oracle";
  }
  return "unknown";
}

struct ExtremizerReport {
  DiagonalPoint d_star;
  double mu_value = 0.0;
  int iterations = 0;
  ExtremizerMethod method = ExtremizerMethod::semi_combinatorial;
  bool degenerate = false;  // leading eigenvalue not simple at some visited point
  bool stalled = false;     // projected flow stopped on step underflow
  bool refined = false;     // neighbourhood escape or multistart improved on the sign iteration
};

struct DiagGradient {
  Vector g;
  double mu = 0.0;
  Vector x;  // leading unit eigenvector
  bool degenerate = false;
};

/// Controls the vertex search in find_extremizer.
///
/// The sign iteration alone (neighbourhood 0, no multistart) reproduces
/// the bare semi-combinatorial update; the escapes only ever move to
/// strictly better vertices.
struct ExtremizerOptions {
  int maxit = 20;
  int warm_neighbourhood = 1;  // flip radius checked when warm-started
  int cold_neighbourhood = 2;  // flip radius checked when cold-started
  bool cold_multistart = true;

  static ExtremizerOptions sign_iteration_only() { return {20, 0, 0, false}; }
};

struct ProjectedFlowOptions {
  double initial_step = 0.1;
  double grad_tol = 1e-9;
  int max_steps = 10000;
  double min_step = 1e-14;
};

namespace detail {

constexpr double kGapTol = 1e-10;

inline bool better(double candidate, double incumbent) {
  return candidate > incumbent + 1e-14 * std::max(1.0, std::abs(incumbent));
}

/// d -> lambda_max(Sym(L diag(d) R)) with L: n x k, R: k x n. An empty L
/// stands for the identity (one-layer case).
class DiagObjective {
 public:
  static DiagObjective one_layer(const Matrix& M) {
    detail::require_square(M, "extremizer");
    return DiagObjective(Matrix(), M);
  }

  DiagObjective(Matrix L, Matrix R) : L_(std::move(L)), R_(std::move(R)) {
    if (L_.size() != 0 && (L_.cols() != R_.rows() || L_.rows() != R_.cols())) {
      throw DimensionError("extremizer: incompatible factors " + shape_str(L_) + " and " + shape_str(R_));
    }
  }

  Eigen::Index dim() const { return R_.rows(); }

  Matrix product(const Vector& d) const {
    if (L_.size() == 0) return d.asDiagonal() * R_;
    return L_ * d.asDiagonal() * R_;
  }

  double value(const Vector& d) const { return mu2(product(d)); }

  DiagGradient gradient(const Vector& d) const {
    SpectralBundle b = symmetric_eig(sym(product(d)));
    DiagGradient out;
    out.mu = b.eigenvalues[0];
    out.x = b.eigenvectors.col(0);
    if (b.size() > 1) {
      out.degenerate = (b.eigenvalues[0] - b.eigenvalues[1]) <= kGapTol * std::max(1.0, std::abs(out.mu));
    }
    const Vector rx = R_ * out.x;
    if (L_.size() == 0) {
      out.g = out.x.cwiseProduct(rx);
    } else {
      out.g = (L_.transpose() * out.x).cwiseProduct(rx);
    }
    return out;
  }

  /// Vertex seeds from the eigenvectors u of Sym(L R): d_i picks the bound
  /// that maximizes the linear term d_i (L^T u)_i (R u)_i.
  std::vector<Vector> spectral_seeds(double m) const {
    const Matrix LR = (L_.size() == 0) ? R_ : Matrix(L_ * R_);
    SpectralBundle b = symmetric_eig(sym(LR));
    std::vector<Vector> seeds;
    seeds.reserve(static_cast<std::size_t>(b.size()));
    for (Eigen::Index j = 0; j < b.size(); ++j) {
      const Vector u = b.eigenvectors.col(j);
      const Vector lu = (L_.size() == 0) ? u : Vector(L_.transpose() * u);
      const Vector c = lu.cwiseProduct(R_ * u);
      Vector d(c.size());
      for (Eigen::Index i = 0; i < c.size(); ++i) d[i] = c[i] > 0.0 ? 1.0 : m;
      seeds.push_back(std::move(d));
    }
    return seeds;
  }

 private:
  Matrix L_;
  Matrix R_;
};

inline Vector clamp_box(const Vector& d, double m) { return d.cwiseMax(m).cwiseMin(1.0); }

inline Vector sign_update(const Vector& d, const Vector& g, double m) {
  Vector out = d;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (g[i] > 0.0) {
      out[i] = 1.0;
    } else if (g[i] < 0.0) {
      out[i] = m;
    }
  }
  return out;
}

struct SignIterationResult {
  Vector d;
  int iterations = 0;
  bool converged = false;
  bool degenerate = false;
};

inline SignIterationResult sign_iteration(const DiagObjective& obj, double m, Vector d, int maxit) {
  SignIterationResult r;
  for (int it = 0; it < maxit; ++it) {
    DiagGradient gr = obj.gradient(d);
    r.degenerate = r.degenerate || gr.degenerate;
    Vector next = sign_update(d, gr.g, m);
    ++r.iterations;
    if (next == d) {
      r.converged = true;
      break;
    }
    d = std::move(next);
  }
  r.d = std::move(d);
  return r;
}

/// Best strictly improving vertex within Hamming radius `radius` of `d`
/// (smallest radius first). `d` must be a vertex.
inline std::optional<Vector> flip_escape(const DiagObjective& obj, double m, const Vector& d, int radius) {
  const Eigen::Index n = d.size();
  if (radius <= 0 || n == 0) return std::nullopt;
  const double current = obj.value(d);
  auto flip = [m](double v) { return v == 1.0 ? m : 1.0; };

  std::optional<Vector> best;
  double best_val = current;
  for (Eigen::Index i = 0; i < n; ++i) {
    Vector c = d;
    c[i] = flip(c[i]);
    const double v = obj.value(c);
    if (better(v, best_val)) {
      best_val = v;
      best = std::move(c);
    }
  }
  if (best || radius < 2) return best;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      Vector c = d;
      c[i] = flip(c[i]);
      c[j] = flip(c[j]);
      const double v = obj.value(c);
      if (better(v, best_val)) {
        best_val = v;
        best = std::move(c);
      }
    }
  }
  return best;
}

inline ExtremizerReport projected_flow(const DiagObjective& obj, double m, Vector d,
                                       const ProjectedFlowOptions& opts = {}) {
  d = clamp_box(d, m);
  ExtremizerReport rep;
  rep.method = ExtremizerMethod::projected_flow;
  double h = opts.initial_step;
  DiagGradient gr = obj.gradient(d);
  double f = gr.mu;
  rep.degenerate = gr.degenerate;
  for (int step = 0; step < opts.max_steps; ++step) {
    Vector pg = gr.g;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      if ((d[i] >= 1.0 && pg[i] > 0.0) || (d[i] <= m && pg[i] < 0.0)) pg[i] = 0.0;
    }
    if (pg.norm() <= opts.grad_tol) break;
    bool accepted = false;
    while (h >= opts.min_step) {
      Vector trial = clamp_box(d + h * gr.g, m);
      DiagGradient tg = obj.gradient(trial);
      ++rep.iterations;
      if (tg.mu > f) {
        d = std::move(trial);
        f = tg.mu;
        gr = std::move(tg);
        rep.degenerate = rep.degenerate || gr.degenerate;
        h *= 2.0;
        accepted = true;
        break;
      }
      h *= 0.5;
    }
    if (!accepted) {
      rep.stalled = true;
      break;
    }
  }
  rep.d_star = {d, m};
  rep.mu_value = obj.value(d);
  return rep;
}

/// Sign iteration with projected-flow fallback, then flip escapes to a
/// vertex from which no neighbour within `radius` is better.
inline ExtremizerReport local_search(const DiagObjective& obj, double m, Vector d, int radius, int maxit) {
  ExtremizerReport rep;
  rep.method = ExtremizerMethod::semi_combinatorial;
  const int max_rounds = 4 * static_cast<int>(d.size()) + 8;
  for (int round = 0; round < max_rounds; ++round) {
    SignIterationResult si = sign_iteration(obj, m, std::move(d), maxit);
    rep.iterations += si.iterations;
    rep.degenerate = rep.degenerate || si.degenerate;
    d = std::move(si.d);
    if (!si.converged) {
      ExtremizerReport pf = projected_flow(obj, m, d);
      rep.iterations += pf.iterations;
      rep.method = ExtremizerMethod::projected_flow;
      rep.stalled = pf.stalled;
      rep.degenerate = rep.degenerate || pf.degenerate;
      d = pf.d_star.d;
    }
    if (!DiagonalPoint{d, m}.is_vertex()) break;
    auto esc = flip_escape(obj, m, d, radius);
    if (!esc) break;
    d = std::move(*esc);
    rep.refined = true;
  }
  rep.d_star = {d, m};
  rep.mu_value = obj.value(d);
  return rep;
}

inline ExtremizerReport search(const DiagObjective& obj, double m, const std::optional<Vector>& warm,
                               const ExtremizerOptions& opts) {
  if (!(m > 0.0 && m <= 1.0)) throw ContractViolation("extremizer: m must lie in (0, 1]");
  const Eigen::Index n = obj.dim();
  if (warm) {
    if (warm->size() != n) throw DimensionError("extremizer: warm start has the wrong length");
    return local_search(obj, m, clamp_box(*warm, m), opts.warm_neighbourhood, opts.maxit);
  }
  ExtremizerReport best = local_search(obj, m, Vector::Ones(n), opts.cold_neighbourhood, opts.maxit);
  if (!opts.cold_multistart) return best;

  std::vector<Vector> seeds;
  seeds.push_back(Vector::Constant(n, m));
  for (auto& s : obj.spectral_seeds(m)) seeds.push_back(std::move(s));
  int total_iterations = best.iterations;
  for (auto& s : seeds) {
    ExtremizerReport r = local_search(obj, m, std::move(s), opts.cold_neighbourhood, opts.maxit);
    total_iterations += r.iterations;
    if (better(r.mu_value, best.mu_value)) {
      r.refined = true;
      best = std::move(r);
    }
  }
  best.iterations = total_iterations;
  return best;
}

inline ExtremizerReport enumerate_vertices(const DiagObjective& obj, double m) {
  const Eigen::Index n = obj.dim();
  if (n > 20) throw CapacityError("vertex_oracle: n = " + std::to_string(n) + " exceeds the limit of 20");
  if (!(m > 0.0 && m <= 1.0)) throw ContractViolation("vertex_oracle: m must lie in (0, 1]");
  ExtremizerReport rep;
  rep.method = ExtremizerMethod::vertex_oracle;
  Vector d(n);
  double best = -std::numeric_limits<double>::infinity();
  Vector best_d;
  const std::uint64_t count = std::uint64_t{1} << n;
  for (std::uint64_t mask = 0; mask < count; ++mask) {
    for (Eigen::Index i = 0; i < n; ++i) d[i] = ((mask >> i) & 1u) ? 1.0 : m;
    const double v = obj.value(d);
    // strict comparison: the earliest mask wins, so ties favour entries at m
    if (v > best) {
      best = v;
      best_d = d;
    }
  }
  rep.d_star = {best_d, m};
  rep.mu_value = best;
  rep.iterations = static_cast<int>(count);
  return rep;
}

}  // namespace detail

/// Partial derivatives of mu2(diag(d) M) with respect to d:
/// g_i = x_i (M x)_i with x the leading unit eigenvector of Sym(diag(d) M).
/// `degenerate` flags a leading eigenvalue gap below 1e-10.
inline DiagGradient diag_gradient(const Matrix& M, const DiagonalPoint& d) {
  auto obj = detail::DiagObjective::one_layer(M);
  if (d.size() != M.rows()) throw DimensionError("diag_gradient: point has the wrong length");
  return obj.gradient(d.d);
}

/// Moves each coordinate to the bound selected by the sign of g; zero
/// entries leave the coordinate unchanged.
inline DiagonalPoint update_vertex(const DiagonalPoint& d, const Vector& g) {
  if (g.size() != d.size()) throw DimensionError("update_vertex: gradient has the wrong length");
  return {detail::sign_update(d.d, g, d.m), d.m};
}

inline ExtremizerReport find_extremizer(const Matrix& M, double m,
                                        const std::optional<DiagonalPoint>& warm_start = std::nullopt,
                                        const ExtremizerOptions& opts = {}) {
  auto obj = detail::DiagObjective::one_layer(M);
  std::optional<Vector> warm;
  if (warm_start) warm = warm_start->d;
  return detail::search(obj, m, warm, opts);
}

inline ExtremizerReport projected_flow(const Matrix& M, double m, const DiagonalPoint& d0,
                                       const ProjectedFlowOptions& opts = {}) {
  if (!(m > 0.0 && m <= 1.0)) throw ContractViolation("projected_flow: m must lie in (0, 1]");
  auto obj = detail::DiagObjective::one_layer(M);
  if (d0.size() != M.rows()) throw DimensionError("projected_flow: start point has the wrong length");
  return detail::projected_flow(obj, m, d0.d, opts);
}

/// Exhaustive maximization over the 2^n vertices {m, 1}^n (n <= 20).
inline ExtremizerReport vertex_oracle(const Matrix& M, double m) {
  return detail::enumerate_vertices(detail::DiagObjective::one_layer(M), m);
}

/// max over Omega_m of mu2(D M).
inline double max_lognorm(const Matrix& M, double m) { return find_extremizer(M, m).mu_value; }

}  // namespace logstab
