#include <gtest/gtest.h>

#include "logstab/illustrative.hpp"
#include "logstab/inner_flow.hpp"
#include "support.hpp"

using namespace logstab;
using logstab::testing::random_matrix;
using logstab::testing::random_unit;

namespace {

Matrix scalar(double v) {
  Matrix M(1, 1);
  M << v;
  return M;
}

PenaltyFunctional functional(const Matrix& A, double delta, double m, double eps,
                             Structure s = Structure::full) {
  PenaltyFunctional P;
  P.base = A;
  P.delta = delta;
  P.m = m;
  P.epsilon = eps;
  P.structure = s;
  return P;
}

}  // namespace

TEST(EvalFunctional, ZeroWhenBoundHolds) {
  std::mt19937_64 rng(20);
  Matrix A = random_matrix(rng, 4, 4);
  const double top = vertex_oracle(A, 0.5).mu_value;
  Evaluation ev = evaluate_perturbation(A, top + 0.1, 0.5, Matrix::Zero(4, 4));
  EXPECT_EQ(ev.F, 0.0);
}

TEST(EvalFunctional, ScalarExample) {
  Evaluation ev = eval_functional(functional(scalar(2.0), 1.0, 0.5, 1e-12), scalar(1.0));
  EXPECT_NEAR(ev.F, 0.5, 1e-11);
}

TEST(EvalFunctional, RejectsNonUnitDirection) {
  EXPECT_THROW(eval_functional(functional(scalar(2.0), 1.0, 0.5, 0.1), scalar(0.5)), ContractViolation);
}

TEST(EvalFunctional, MatchesOracleSpectrum) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix A = random_matrix(rng, 4, 4);
    Matrix E = random_unit(rng, 4, 4);
    const double eps = 0.3;
    Evaluation ev = eval_functional(functional(A, 0.0, 0.5, eps), E);
    ExtremizerReport o = vertex_oracle(A + eps * E, 0.5);
    // independent spectrum by Sturm bisection
    const Matrix S = sym(o.d_star.d.asDiagonal() * (A + eps * E));
    double F = 0.0;
    for (Eigen::Index k = 0; k < 4; ++k) {
      const double lam = logstab::testing::bisect_eigenvalue(S, k, 60);
      if (lam > 0.0) F += 0.5 * lam * lam;
    }
    EXPECT_NEAR(ev.F, F, 1e-10) << "trial " << trial;
  }
}

TEST(FreeGradient, ScalarExample) {
  PenaltyFunctional P = functional(scalar(2.0), 1.0, 1.0, 0.1);
  Evaluation ev = eval_functional(P, scalar(1.0));
  EXPECT_NEAR(free_gradient(P, ev)(0, 0), 1.1, 1e-14);
}

TEST(FreeGradient, DirectionalDerivative) {
  std::mt19937_64 rng(22);
  const double eps = 0.2;
  const double h = 1e-6;
  int checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Matrix A = random_matrix(rng, 3, 3);
    ExtremizerReport base = find_extremizer(A, 0.5);
    SpectralBundle b = symmetric_eig(sym(base.d_star.d.asDiagonal() * A));
    // one eigenvalue above delta, well separated from the rest
    const double delta = 0.5 * (b.eigenvalues[0] + b.eigenvalues[1]);
    Matrix E = random_unit(rng, 3, 3);
    Matrix V = random_matrix(rng, 3, 3);
    PenaltyFunctional P = functional(A, delta, 0.5, eps);
    Evaluation ev = eval_functional(P, E);
    if (ev.F == 0.0) continue;
    const Matrix G = free_gradient(P, ev);
    auto F_at = [&](double s) { return evaluate_perturbation(A, delta, 0.5, eps * (E + s * V)).F; };
    const double fd = (F_at(h) - F_at(-h)) / (2.0 * h * eps);
    EXPECT_NEAR(frobenius_inner(G, V), fd, 1e-4 * std::max(1.0, std::abs(fd))) << "trial " << trial;
    ++checked;
  }
  EXPECT_GE(checked, 10);
}

TEST(ConstrainedDirection, Examples) {
  Matrix E = Matrix::Zero(2, 2);
  E(0, 0) = 1.0;
  EXPECT_EQ(constrained_direction(E, E), Matrix::Zero(2, 2));
  Matrix G = Matrix::Zero(2, 2);
  G(0, 1) = 1.0;
  EXPECT_EQ(constrained_direction(E, G), -G);
}

TEST(ConstrainedDirection, TangentAndDescending) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix E = random_unit(rng, 4, 4);
    Matrix G = random_matrix(rng, 4, 4);
    Matrix Z = constrained_direction(E, G);
    EXPECT_NEAR(frobenius_inner(Z, E), 0.0, 1e-12);
    EXPECT_LE(frobenius_inner(G, Z), 1e-12);
  }
}

TEST(ProjectStructured, KeepsDiagonal) {
  Matrix G(2, 2);
  G << 1, 2, 3, 4;
  Matrix D = project_structured(G, Structure::diagonal);
  EXPECT_EQ(D(0, 0), 1.0);
  EXPECT_EQ(D(1, 1), 4.0);
  EXPECT_EQ(D(0, 1), 0.0);
  EXPECT_EQ(D(1, 0), 0.0);
  EXPECT_EQ(project_structured(G, Structure::full), G);
}

TEST(EulerStep, StationaryPointStays) {
  // n = 1: the unit sphere is {-1, 1}, so every point is stationary
  PenaltyFunctional P = functional(scalar(3.0), 1.0, 0.5, 0.5);
  FlowState s = make_state(P, scalar(-1.0));
  FlowState next = euler_step(s, P);
  EXPECT_TRUE(next.stationary);
  EXPECT_EQ(next.E, s.E);
}

TEST(EulerStep, IllustrativeStepDecreases) {
  PenaltyFunctional P = functional(illustrative::base_matrix(), 0.0, 0.5, 0.3);
  FlowState s = make_state(P, illustrative::direction(0.0), std::nullopt, 0.05);
  ASSERT_GT(s.F, 0.0);
  FlowState next = euler_step(s, P);
  EXPECT_LT(next.F, s.F);
  EXPECT_NEAR(frobenius_norm(next.E), 1.0, 1e-12);
}

TEST(EulerStep, RejectsThetaAtMostOne) {
  PenaltyFunctional P = functional(scalar(3.0), 1.0, 0.5, 0.5);
  EXPECT_THROW(euler_step(make_state(P, scalar(1.0)), P, 1.0), ContractViolation);
}

TEST(EulerStep, FiftyStepsMonotoneOnUnitSphere) {
  std::mt19937_64 rng(24);
  Matrix A = random_matrix(rng, 5, 5);
  PenaltyFunctional P = functional(A, 0.0, 0.4, 0.3);
  FlowState s = make_state(P, random_unit(rng, 5, 5));
  for (int k = 0; k < 50 && !s.stationary && s.F > 0.0; ++k) {
    FlowState next = euler_step(s, P);
    if (next.set_version == s.set_version) EXPECT_LE(next.F, s.F) << "step " << k;
    EXPECT_NEAR(frobenius_norm(next.E), 1.0, 1e-12);
    s = next;
  }
}

TEST(Minimize, StationaryStartReturnsImmediately) {
  PenaltyFunctional P = functional(scalar(3.0), 1.0, 0.5, 0.5);
  FlowState s = minimize(P, scalar(-1.0));
  EXPECT_EQ(s.steps, 0);
  EXPECT_TRUE(s.converged);
}

TEST(Minimize, SatisfiedBoundReturnsZero) {
  std::mt19937_64 rng(25);
  Matrix A = random_matrix(rng, 4, 4);
  PenaltyFunctional P = functional(A, vertex_oracle(A, 0.5).mu_value + 10.0, 0.5, 0.1);
  FlowState s = minimize(P, random_unit(rng, 4, 4));
  EXPECT_EQ(s.F, 0.0);
  EXPECT_EQ(s.steps, 0);
}

TEST(Minimize, RejectsBadInitialDatum) {
  PenaltyFunctional P = functional(Matrix::Identity(2, 2), 0.0, 0.5, 0.1, Structure::diagonal);
  Matrix full = Matrix::Constant(2, 2, 0.5);
  EXPECT_THROW(minimize(P, full), ContractViolation);
  EXPECT_THROW(minimize(P, Matrix::Identity(2, 2)), ContractViolation);
}

TEST(Minimize, InvariantsAlongTheFlow) {
  std::mt19937_64 rng(26);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix A = random_matrix(rng, 5, 5);
    PenaltyFunctional P = functional(A, 0.0, 0.5, 0.2);
    MinimizeOptions o;
    double last_F = std::numeric_limits<double>::infinity();
    int last_version = -1;
    int violations = 0;
    o.observer = [&](const FlowState& s) {
      EXPECT_NEAR(frobenius_norm(s.E), 1.0, 1e-10);
      if (s.set_version == last_version && s.F > last_F + 1e-15) ++violations;
      last_F = s.F;
      last_version = s.set_version;
    };
    minimize(P, random_unit(rng, 5, 5), o);
    EXPECT_EQ(violations, 0) << "trial " << trial;
  }
}

TEST(Minimize, StationaryPointAlignsWithGradient) {
  std::mt19937_64 rng(27);
  int checked = 0;
  for (int trial = 0; trial < 10; ++trial) {
    Matrix A = random_matrix(rng, 5, 5);
    PenaltyFunctional P = functional(A, 0.0, 0.5, 0.05);
    FlowState s = minimize(P, random_unit(rng, 5, 5));
    if (s.F == 0.0 || !s.converged) continue;
    const double gn = frobenius_norm(s.G);
    const double sign = frobenius_inner(s.G, s.E) < 0.0 ? -1.0 : 1.0;
    // at a minimizer E is a negative multiple of G
    EXPECT_LT(sign, 0.0);
    EXPECT_LE(frobenius_norm(s.G / gn - sign * s.E), 1e-6) << "trial " << trial;
    ++checked;
  }
  EXPECT_GE(checked, 8);
}

TEST(Minimize, DiagonalStructureStaysDiagonal) {
  std::mt19937_64 rng(28);
  Matrix A = random_matrix(rng, 4, 4);
  PenaltyFunctional P = functional(A, 0.0, 0.5, 0.2, Structure::diagonal);
  Matrix E0 = Matrix::Zero(4, 4);
  E0.diagonal() = random_matrix(rng, 4, 1).col(0);
  E0 /= E0.norm();
  MinimizeOptions o;
  o.observer = [](const FlowState& s) { EXPECT_TRUE(in_structure(s.E, Structure::diagonal)); };
  FlowState s = minimize(P, E0, o);
  EXPECT_TRUE(in_structure(s.E, Structure::diagonal));
}
