#include <gtest/gtest.h>

#include "logstab/two_layer.hpp"
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

double penalty_at(const Matrix& A1h, const Matrix& A2h, const DiagonalPair& d, double delta) {
  return spectral_penalty(symmetric_eig(sym(two_layer_product(A1h, A2h, d))).eigenvalues, delta);
}

}  // namespace

TEST(TwoLayerInstance, ShapeChecks) {
  TwoLayerInstance bad{Matrix::Zero(2, 3), Matrix::Zero(2, 3), 0.5, 0.0};
  EXPECT_THROW(bad.validate(), DimensionError);
  TwoLayerInstance ok{Matrix::Zero(2, 3), Matrix::Zero(3, 2), 0.5, 0.0};
  EXPECT_NO_THROW(ok.validate());
}

TEST(JointExtremizer, IdentitySecondLayerReducesToOneLayer) {
  std::mt19937_64 rng(40);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix A1 = random_matrix(rng, 4, 4);
    JointExtremizerReport r = joint_extremizer(A1, Matrix::Identity(4, 4), 1.0);
    EXPECT_NEAR(r.mu_value, mu2(A1), 1e-12);
  }
}

TEST(JointExtremizer, ScalarClosedForm) {
  for (double a : {2.0, -2.0}) {
    for (double c : {1.5, -0.5}) {
      const double ca = c * a;
      const double expected = ca > 0.0 ? ca : 0.25 * ca;
      EXPECT_NEAR(joint_extremizer(scalar(a), scalar(c), 0.5).mu_value, expected, 1e-15) << a << ' ' << c;
    }
  }
}

TEST(JointExtremizer, MatchesDoubleVertexOracle) {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix A1 = random_matrix(rng, 3, 3);
    Matrix A2 = random_matrix(rng, 3, 3);
    EXPECT_NEAR(joint_extremizer(A1, A2, 0.5).mu_value, double_vertex_oracle(A1, A2, 0.5).mu_value, 1e-7)
        << "trial " << trial;
  }
}

TEST(JointExtremizer, RectangularFactors) {
  std::mt19937_64 rng(42);
  Matrix A1 = random_matrix(rng, 5, 3);
  Matrix A2 = random_matrix(rng, 3, 5);
  EXPECT_NEAR(joint_extremizer(A1, A2, 0.3).mu_value, double_vertex_oracle(A1, A2, 0.3).mu_value, 1e-7);
}

TEST(DoubleVertexOracle, CapacityLimit) {
  EXPECT_THROW(double_vertex_oracle(Matrix::Zero(11, 10), Matrix::Zero(10, 11), 0.5), CapacityError);
}

TEST(TwoLayerGradients, ZeroWithoutActiveEigenvalues) {
  std::mt19937_64 rng(43);
  Matrix A1 = random_matrix(rng, 3, 3);
  Matrix A2 = random_matrix(rng, 3, 3);
  JointExtremizerReport r = joint_extremizer(A1, A2, 0.5);
  SpectralBundle b = symmetric_eig(sym(two_layer_product(A1, A2, r.d)));
  TwoLayerGradients g = two_layer_gradients(A1, A2, r.mu_value + 1.0, b, r.d);
  EXPECT_EQ(g.G1, Matrix::Zero(3, 3));
  EXPECT_EQ(g.G2, Matrix::Zero(3, 3));
}

TEST(TwoLayerGradients, MatchCentralDifferences) {
  std::mt19937_64 rng(44);
  const double h = 1e-6;
  for (int trial = 0; trial < 20; ++trial) {
    Matrix A1 = random_matrix(rng, 4, 3);
    Matrix A2 = random_matrix(rng, 3, 4);
    JointExtremizerReport r = joint_extremizer(A1, A2, 0.5);
    SpectralBundle b = symmetric_eig(sym(two_layer_product(A1, A2, r.d)));
    const double delta = 0.5 * (b.eigenvalues[0] + b.eigenvalues[1]);
    TwoLayerGradients g = two_layer_gradients(A1, A2, delta, b, r.d);
    Matrix V1 = random_matrix(rng, 4, 3);
    Matrix V2 = random_matrix(rng, 3, 4);
    const double fd1 = (penalty_at(A1 + h * V1, A2, r.d, delta) - penalty_at(A1 - h * V1, A2, r.d, delta)) / (2 * h);
    const double fd2 = (penalty_at(A1, A2 + h * V2, r.d, delta) - penalty_at(A1, A2 - h * V2, r.d, delta)) / (2 * h);
    EXPECT_LE(logstab::testing::rel_err(frobenius_inner(g.G1, V1), fd1), 1e-4) << "trial " << trial;
    EXPECT_LE(logstab::testing::rel_err(frobenius_inner(g.G2, V2), fd2), 1e-4) << "trial " << trial;
  }
}

TEST(TwoLayerGradients, TransposeSymmetryWithoutActivation) {
  // With D1 = D2 = I the formulas give G1 = G2^T when A1 = A2^T.
  std::mt19937_64 rng(45);
  Matrix A2 = random_matrix(rng, 3, 3);
  Matrix A1 = A2.transpose();
  JointExtremizerReport r = joint_extremizer(A1, A2, 1.0);
  SpectralBundle b = symmetric_eig(sym(two_layer_product(A1, A2, r.d)));
  TwoLayerGradients g = two_layer_gradients(A1, A2, b.eigenvalues[2] - 1.0, b, r.d);
  EXPECT_LE((g.G1 - g.G2.transpose()).norm(), 1e-12);
}

TEST(TwoLayerMinimize, InvariantsAlongTheFlow) {
  std::mt19937_64 rng(46);
  for (int trial = 0; trial < 5; ++trial) {
    TwoLayerInstance inst{random_matrix(rng, 3, 3), random_matrix(rng, 3, 3), 0.5, 0.0};
    TwoLayerMinimizeOptions o;
    double last_F = std::numeric_limits<double>::infinity();
    int last_version = -1;
    o.observer = [&](const TwoLayerFlowState& s) {
      EXPECT_NEAR(frobenius_norm(s.E1), 1.0, 1e-12);
      EXPECT_NEAR(frobenius_norm(s.E2), 1.0, 1e-12);
      if (s.set_version == last_version) EXPECT_LE(s.F, last_F);
      last_F = s.F;
      last_version = s.set_version;
    };
    two_layer_minimize(inst, 0.1, random_unit(rng, 3, 3), random_unit(rng, 3, 3), o);
  }
}

TEST(TwoLayerStabilize, AlreadySatisfied) {
  TwoLayerInstance inst{-Matrix::Identity(2, 2), Matrix::Identity(2, 2), 0.5, 0.0};
  TwoLayerResult r = two_layer_stabilize(inst);
  EXPECT_TRUE(r.already_satisfied);
  EXPECT_EQ(r.epsilon_star, 0.0);
  EXPECT_EQ(r.A1_hat, inst.A1);
}

TEST(TwoLayerStabilize, ScalarClosedForm) {
  // max_D d2 (2 + eps e2) d1 (2 + eps e1) = 1 is first reached at e = (-1, -1), eps = 1
  TwoLayerInstance inst{scalar(2.0), scalar(2.0), 0.5, 1.0};
  TwoLayerResult r = two_layer_stabilize(inst);
  ASSERT_TRUE(r.converged) << r.message;
  EXPECT_NEAR(r.epsilon_star, 1.0, 1e-6);
  EXPECT_NEAR(r.A1_hat(0, 0), 1.0, 1e-6);
  EXPECT_NEAR(r.A2_hat(0, 0), 1.0, 1e-6);
}

TEST(TwoLayerStabilize, RandomPairsCertified) {
  std::mt19937_64 rng(47);
  for (int trial = 0; trial < 5; ++trial) {
    TwoLayerInstance inst{random_matrix(rng, 3, 3), random_matrix(rng, 3, 3), 0.5, 0.0};
    if (double_vertex_oracle(inst.A1, inst.A2, 0.5).mu_value <= 0.0) continue;
    TwoLayerResult r = two_layer_stabilize(inst);
    ASSERT_TRUE(r.converged) << r.message;
    EXPECT_NEAR(frobenius_norm(r.E1_star), 1.0, 1e-10);
    EXPECT_NEAR(frobenius_norm(r.E2_star), 1.0, 1e-10);
    EXPECT_NEAR(double_vertex_oracle(r.A1_hat, r.A2_hat, 0.5).mu_value, 0.0, 1e-6);
    for (std::size_t k = 1; k < r.trace.size(); ++k) EXPECT_GT(r.trace.epsilons[k], r.trace.epsilons[k - 1]);
  }
}
