#include <gtest/gtest.h>

#include "logstab/extremal_diag.hpp"
#include "logstab/illustrative.hpp"
#include "support.hpp"

using namespace logstab;
using logstab::testing::random_box;
using logstab::testing::random_matrix;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

double mu_at(const Matrix& M, const Vector& d) { return mu2(d.asDiagonal() * M); }

}  // namespace

TEST(DiagGradient, IdentityPicksFirstAxis) {
  DiagGradient g = diag_gradient(Matrix::Identity(3, 3), DiagonalPoint::ones(3, 0.5));
  EXPECT_EQ(g.x, Vector::Unit(3, 0));
  EXPECT_EQ(g.g, Vector::Unit(3, 0));
  EXPECT_TRUE(g.degenerate);
}

TEST(DiagGradient, IllustrativeTransitionGradient) {
  DiagGradient g = diag_gradient(illustrative::perturbed(0.45), {vec({0.5, 1, 1}), 0.5});
  EXPECT_NEAR(g.g[0], -0.2865, 1e-3);
  EXPECT_NEAR(g.g[1], 1.0832, 1e-3);
  EXPECT_NEAR(g.g[2], -0.0002, 1e-3);
}

TEST(DiagGradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(10);
  const double h = 1e-6;
  for (int trial = 0; trial < 20; ++trial) {
    Matrix M = random_matrix(rng, 4, 4);
    Vector d = random_box(rng, 4, 0.3);
    DiagGradient g = diag_gradient(M, {d, 0.3});
    for (Eigen::Index i = 0; i < 4; ++i) {
      Vector dp = d;
      Vector dm = d;
      dp[i] += h;
      dm[i] -= h;
      const double fd = (mu_at(M, dp) - mu_at(M, dm)) / (2.0 * h);
      EXPECT_NEAR(g.g[i], fd, 1e-5) << "trial " << trial << " coordinate " << i;
    }
  }
}

TEST(UpdateVertex, IllustrativeTransition) {
  DiagonalPoint next = update_vertex({vec({0.5, 1, 1}), 0.5}, vec({-0.2865, 1.0832, -0.0002}));
  EXPECT_EQ(next.d, vec({0.5, 1, 0.5}));
}

TEST(UpdateVertex, SignsSelectBounds) {
  DiagonalPoint d{vec({0.7, 0.8, 0.9}), 0.5};
  EXPECT_EQ(update_vertex(d, vec({1, 2, 3})).d, Vector::Ones(3));
  EXPECT_EQ(update_vertex(d, vec({-1, -2, -3})).d, Vector::Constant(3, 0.5));
  EXPECT_EQ(update_vertex(d, vec({0, 1, -1})).d, vec({0.7, 1, 0.5}));
}

TEST(FindExtremizer, IllustrativeSchedule) {
  for (double t : {0.0, 0.1, 0.2, 0.3}) {
    EXPECT_EQ(find_extremizer(illustrative::perturbed(t), 0.5).d_star.d, vec({0.5, 1, 1})) << "t = " << t;
  }
  for (double t : {0.45, 0.6, 0.8, 1.0}) {
    EXPECT_EQ(find_extremizer(illustrative::perturbed(t), 0.5).d_star.d, vec({0.5, 1, 0.5})) << "t = " << t;
  }
}

TEST(FindExtremizer, MatchesVertexOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix M = random_matrix(rng, 5, 5);
    ExtremizerReport r = find_extremizer(M, 0.5);
    ExtremizerReport o = vertex_oracle(M, 0.5);
    EXPECT_NEAR(r.mu_value, o.mu_value, 1e-8) << "trial " << trial;
    EXPECT_NEAR(r.mu_value, mu_at(M, r.d_star.d), 1e-12);
  }
}

TEST(FindExtremizer, WarmStartAtOwnOutputIsIdempotent) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix M = random_matrix(rng, 6, 6);
    ExtremizerReport r = find_extremizer(M, 0.3);
    ExtremizerReport again = find_extremizer(M, 0.3, r.d_star);
    EXPECT_EQ(again.d_star, r.d_star);
    EXPECT_EQ(again.iterations, 1);
  }
}

TEST(FindExtremizer, FixedPointsSatisfySignCondition) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    Matrix M = random_matrix(rng, 5, 5);
    ExtremizerReport r = find_extremizer(M, 0.4, std::nullopt, ExtremizerOptions::sign_iteration_only());
    if (r.method != ExtremizerMethod::semi_combinatorial) continue;
    DiagGradient g = diag_gradient(M, r.d_star);
    for (Eigen::Index i = 0; i < 5; ++i) {
      if (g.g[i] > 0.0) EXPECT_EQ(r.d_star.d[i], 1.0);
      if (g.g[i] < 0.0) EXPECT_EQ(r.d_star.d[i], 0.4);
    }
  }
}

TEST(FindExtremizer, DominatesRandomInteriorPoints) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::Index n = 4 + trial;
    Matrix M = random_matrix(rng, n, n);
    ExtremizerReport r = find_extremizer(M, 0.5);
    for (int k = 0; k < 1000; ++k) EXPECT_GE(r.mu_value, mu_at(M, random_box(rng, n, 0.5)) - 1e-8);
  }
}

TEST(FindExtremizer, RejectsBadM) {
  EXPECT_THROW(find_extremizer(Matrix::Identity(2, 2), 0.0), ContractViolation);
  EXPECT_THROW(find_extremizer(Matrix::Identity(2, 2), 1.5), ContractViolation);
}

TEST(ProjectedFlow, ScalarCases) {
  Matrix two(1, 1);
  two << 2.0;
  ExtremizerReport r = projected_flow(two, 0.5, {vec({0.7}), 0.5});
  EXPECT_EQ(r.d_star.d[0], 1.0);
  EXPECT_DOUBLE_EQ(r.mu_value, 2.0);
  ExtremizerReport s = projected_flow(Matrix(-two), 0.5, {vec({0.7}), 0.5});
  EXPECT_EQ(s.d_star.d[0], 0.5);
  EXPECT_DOUBLE_EQ(s.mu_value, -1.0);
}

TEST(ProjectedFlow, ReachesOracleValue) {
  std::mt19937_64 rng(15);
  int hits = 0;
  const int trials = 20;
  for (int trial = 0; trial < trials; ++trial) {
    Matrix M = random_matrix(rng, 6, 6);
    ExtremizerReport o = vertex_oracle(M, 0.3);
    // start inside the basin of the global vertex
    Vector d0 = 0.9 * o.d_star.d + 0.1 * Vector::Constant(6, 0.65);
    ExtremizerReport r = projected_flow(M, 0.3, {d0, 0.3});
    hits += std::abs(r.mu_value - o.mu_value) <= 1e-7 ? 1 : 0;
    EXPECT_LE(r.mu_value, o.mu_value + 1e-12);
  }
  EXPECT_GE(hits, trials - 1);
}

TEST(ProjectedFlow, ObjectiveNondecreasingInSteps) {
  std::mt19937_64 rng(16);
  Matrix M = random_matrix(rng, 5, 5);
  Vector d0 = Vector::Constant(5, 0.75);
  double last = mu_at(M, d0);
  for (int k = 1; k <= 30; ++k) {
    ProjectedFlowOptions o;
    o.max_steps = k;
    const double v = projected_flow(M, 0.5, {d0, 0.5}, o).mu_value;
    EXPECT_GE(v, last - 1e-15) << "after " << k << " steps";
    last = v;
  }
}

TEST(VertexOracle, DecoupledDiagonalTiesFavourM) {
  Matrix M = Vector(vec({1, -1})).asDiagonal();
  ExtremizerReport r = vertex_oracle(M, 0.5);
  EXPECT_DOUBLE_EQ(r.mu_value, 1.0);
  EXPECT_EQ(r.d_star.d[0], 1.0);
  EXPECT_EQ(r.d_star.d[1], 0.5);
}

TEST(VertexOracle, AgreesWithSearchOnIllustrative) {
  const Matrix P = illustrative::perturbed(0.0);
  EXPECT_NEAR(vertex_oracle(P, 0.5).mu_value, find_extremizer(P, 0.5).mu_value, 1e-12);
}

TEST(VertexOracle, DominatesRandomInteriorPoints) {
  std::mt19937_64 rng(17);
  Matrix M = random_matrix(rng, 7, 7);
  ExtremizerReport o = vertex_oracle(M, 0.2);
  for (int k = 0; k < 1000; ++k) EXPECT_GE(o.mu_value, mu_at(M, random_box(rng, 7, 0.2)) - 1e-12);
}

TEST(VertexOracle, CapacityLimit) { EXPECT_THROW(vertex_oracle(Matrix::Identity(21, 21), 0.5), CapacityError); }
