#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "logstab/node_runtime.hpp"
#include "logstab/outer_newton.hpp"
#include "support.hpp"

using namespace logstab;
using logstab::testing::random_matrix;

namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("logstab_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// root of 1 - tanh(z)^2 = alpha by bisection on [0, 20]
double z_bar_by_bisection(double alpha) {
  double lo = 0.0;
  double hi = 20.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double t = std::tanh(mid);
    if (1.0 - t * t > alpha) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace

TEST(Activation, OriginAndSlope) {
  SmoothedLeakyReLU s(0.1);
  EXPECT_EQ(s(0.0), 0.0);
  EXPECT_EQ(s.derivative(0.0), 1.0);
  EXPECT_EQ(s(2.5), 2.5);
}

TEST(Activation, JunctionConstants) {
  SmoothedLeakyReLU s(0.1);
  const double zb = z_bar_by_bisection(0.1);
  EXPECT_NEAR(s.z_bar, zb, 1e-12);
  EXPECT_NEAR(s.z_bar, 1.81845, 1e-5);
  EXPECT_NEAR(s.beta, std::tanh(-zb) + 0.1 * zb, 1e-12);
  EXPECT_NEAR(s.beta, -0.76684, 1e-5);
}

TEST(Activation, ContinuousAtJunctions) {
  SmoothedLeakyReLU s(0.1);
  const double e = 1e-10;
  EXPECT_NEAR(s(-s.z_bar - e), s(-s.z_bar + e), 1e-9);
  EXPECT_NEAR(s.derivative(-s.z_bar - e), s.derivative(-s.z_bar + e), 1e-9);
  EXPECT_NEAR(s(-e), s(e), 1e-9);
  EXPECT_NEAR(s.derivative(-e), s.derivative(e), 1e-9);
}

TEST(Activation, DerivativeRangeAndMonotonicity) {
  SmoothedLeakyReLU s(0.1);
  std::mt19937_64 rng(50);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  for (int i = 0; i < 100000; ++i) {
    const double z = u(rng);
    const double d = s.derivative(z);
    EXPECT_GE(d, 0.1);
    EXPECT_LE(d, 1.0);
    EXPECT_LE(s(z), s(z + 1e-3));
  }
}

TEST(Activation, RejectsBadAlpha) {
  EXPECT_THROW(SmoothedLeakyReLU(0.0), ContractViolation);
  EXPECT_THROW(SmoothedLeakyReLU(1.0), ContractViolation);
}

TEST(Forward, ZeroFieldKeepsState) {
  NeuralOdeModel m = NeuralOdeModel::one_layer_model(Matrix::Zero(3, 3), Vector::Zero(3), 1.0, 100);
  Vector x0 = Vector::Constant(3, 0.7);
  std::vector<Vector> traj = forward(m, x0);
  EXPECT_EQ(traj.size(), 101u);
  EXPECT_EQ(traj.back(), x0);
}

TEST(Forward, ScalarDecay) {
  NeuralOdeModel m = NeuralOdeModel::one_layer_model(-Matrix::Identity(1, 1), Vector::Zero(1), 1.0, 1000);
  Vector x0 = Vector::Constant(1, 0.5);
  EXPECT_NEAR(flow_map(m, x0)[0], 0.5 * std::exp(-1.0), 0.05 * 0.5 * std::exp(-1.0));
}

TEST(Forward, Divergence) {
  NeuralOdeModel m = NeuralOdeModel::one_layer_model(1e200 * Matrix::Identity(2, 2), Vector::Zero(2), 1.0, 10);
  EXPECT_THROW(flow_map(m, Vector::Ones(2)), DivergenceError);
}

TEST(Forward, DimensionMismatch) {
  NeuralOdeModel m = NeuralOdeModel::one_layer_model(Matrix::Zero(3, 3), Vector::Zero(3), 1.0, 10);
  EXPECT_THROW(forward(m, Vector::Zero(2)), DimensionError);
}

TEST(Forward, NsdFieldIsMonotone) {
  std::mt19937_64 rng(51);
  NeuralOdeModel m;
  m.kind = OdeKind::nsd;
  m.layers.push_back({random_matrix(rng, 6, 4), random_matrix(rng, 6, 1).col(0)});
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int t = 0; t < 10000; ++t) {
    Vector x(4);
    Vector y(4);
    for (Eigen::Index i = 0; i < 4; ++i) {
      x[i] = u(rng);
      y[i] = u(rng);
    }
    EXPECT_LE((m.field(x) - m.field(y)).dot(x - y), 1e-12);
  }
}

TEST(Model, ValidateShapes) {
  NeuralOdeModel m;
  m.kind = OdeKind::two_layer;
  m.layers.push_back({Matrix::Zero(3, 2), Vector::Zero(3)});
  EXPECT_THROW(m.validate(), ContractViolation);
  m.layers.push_back({Matrix::Zero(3, 3), Vector::Zero(3)});
  EXPECT_THROW(m.validate(), DimensionError);
  m.layers[1] = {Matrix::Zero(2, 3), Vector::Zero(2)};
  EXPECT_NO_THROW(m.validate());
}

TEST(VerifyBound, StabilizedModelsRespectTheBound) {
  std::mt19937_64 rng(52);
  for (double delta : {-0.2, 0.0}) {
    Matrix A = random_matrix(rng, 4, 4);
    StabilizationResult r = stabilize(A, delta, 0.1);
    ASSERT_TRUE(r.converged);
    NeuralOdeModel m = NeuralOdeModel::one_layer_model(r.A_hat, random_matrix(rng, 4, 1).col(0), 1.0, 500);
    BoundReport rep = verify_bound(m, delta, 200, 1e-3);
    EXPECT_EQ(rep.violations, 0) << "delta " << delta;
    EXPECT_LE(rep.max_amplification, std::exp(delta) * (1.0 + 1e-3));
    if (delta < 0.0) EXPECT_LT(rep.max_amplification, 1.0);
  }
}

TEST(VerifyBound, UnstabilizedBoundIsTightNearAFixedPoint) {
  // A symmetric with max_D mu2(D A) = 0.5 at D = I; the origin is a fixed
  // point where the flow stretches e1 by about exp(0.5 T).
  Matrix A = Vector((Vector(3) << 0.5, -1.0, -2.0).finished()).asDiagonal();
  const double mu0 = find_extremizer(A, 0.1).mu_value;
  ASSERT_NEAR(mu0, 0.5, 1e-15);
  NeuralOdeModel m = NeuralOdeModel::one_layer_model(A, Vector::Zero(3), 2.0, 2000);
  BoundReport rep = verify_bound(m, mu0, 200, 1e-3);
  EXPECT_EQ(rep.violations, 0);
  const Vector x = 1e-3 * Vector::Unit(3, 0);
  const double stretch = flow_map(m, x).norm() / x.norm();
  EXPECT_GE(stretch, 0.5 * std::exp(mu0 * 2.0));
  EXPECT_LE(stretch, std::exp(mu0 * 2.0) * (1.0 + 1e-3));
}

TEST(VerifyBound, DeterministicForSeed) {
  std::mt19937_64 rng(53);
  NeuralOdeModel m = NeuralOdeModel::one_layer_model(random_matrix(rng, 3, 3), Vector::Zero(3), 1.0, 100);
  EXPECT_EQ(format_bound_report(verify_bound(m, 0.0, 20, 1e-3)), format_bound_report(verify_bound(m, 0.0, 20, 1e-3)));
}

TEST(VerifyBound, ContractChecks) {
  NeuralOdeModel m = NeuralOdeModel::one_layer_model(Matrix::Zero(2, 2), Vector::Zero(2), 1.0, 10);
  EXPECT_THROW(verify_bound(m, 0.0, 0, 1e-3), ContractViolation);
  EXPECT_THROW(verify_bound(m, 0.0, 10, 0.0), ContractViolation);
}

TEST(LipschitzBound, Examples) {
  EXPECT_DOUBLE_EQ(lipschitz_bound({1.0, 1.0}, 0.0, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(lipschitz_bound({2.0, 3.0}, 0.0, 5.0), 6.0);
  EXPECT_NEAR(lipschitz_bound({1.0, 1.0}, -1.0, 2.0), std::exp(-2.0), 1e-16);
  EXPECT_THROW(lipschitz_bound({-1.0}, 0.0, 1.0), ContractViolation);
}

TEST(LipschitzBound, HoldsForAffineOdeAffineChain) {
  std::mt19937_64 rng(54);
  Matrix A = random_matrix(rng, 4, 4);
  StabilizationResult r = stabilize(A, 0.0, 0.1);
  ASSERT_TRUE(r.converged);
  NeuralOdeModel ode = NeuralOdeModel::one_layer_model(r.A_hat, random_matrix(rng, 4, 1).col(0), 1.0, 2000);
  Matrix A1 = random_matrix(rng, 4, 3);
  Matrix A2 = random_matrix(rng, 2, 4);
  auto softmax = [](const Vector& z) {
    Vector e = (z.array() - z.maxCoeff()).exp();
    return Vector(e / e.sum());
  };
  auto net = [&](const Vector& u) { return softmax(A2 * flow_map(ode, A1 * u)); };
  const double L = lipschitz_bound({spectral_norm(A1), spectral_norm(A2)}, 0.0, 1.0);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  for (int t = 0; t < 1000; ++t) {
    Vector u(3);
    Vector v(3);
    for (Eigen::Index i = 0; i < 3; ++i) {
      u[i] = unif(rng);
      v[i] = u[i] + 1e-2 * unif(rng);
    }
    EXPECT_LE((net(u) - net(v)).norm(), L * (1.0 + 1e-3) * (u - v).norm());
  }
}

TEST(Manifest, RoundTrip) {
  const fs::path dir = scratch_dir("manifest");
  std::mt19937_64 rng(55);
  NeuralOdeModel m;
  m.kind = OdeKind::two_layer;
  m.layers.push_back({random_matrix(rng, 5, 3), random_matrix(rng, 5, 1).col(0)});
  m.layers.push_back({random_matrix(rng, 3, 5), random_matrix(rng, 3, 1).col(0)});
  m.activation = SmoothedLeakyReLU(0.2);
  m.horizon = 1.5;
  m.steps = 300;
  write_manifest(m, dir / "net.manifest");
  NeuralOdeModel back = read_manifest(dir / "net.manifest");
  EXPECT_EQ(back.kind, m.kind);
  EXPECT_EQ(back.steps, m.steps);
  EXPECT_EQ(back.horizon, m.horizon);
  EXPECT_EQ(back.activation.alpha, 0.2);
  ASSERT_EQ(back.layers.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.layers[i].weight, m.layers[i].weight);
    EXPECT_EQ(back.layers[i].bias, m.layers[i].bias);
  }
}

TEST(Manifest, Errors) {
  const fs::path dir = scratch_dir("manifest_errors");
  NeuralOdeModel m = NeuralOdeModel::one_layer_model(Matrix::Identity(2, 2), Vector::Zero(2), 1.0, 10);
  write_manifest(m, dir / "ok.manifest");
  auto with_extra = [&](const std::string& name, const std::string& line) {
    std::ifstream in(dir / "ok.manifest");
    std::stringstream ss;
    ss << in.rdbuf() << line << '\n';
    std::ofstream(dir / name) << ss.str();
    return dir / name;
  };
  EXPECT_THROW(read_manifest(with_extra("unknown.manifest", "colour blue")), ConfigError);
  EXPECT_THROW(read_manifest(with_extra("dup.manifest", "steps 20")), ParseError);
  std::ofstream(dir / "missing.manifest") << "kind one_layer\nhorizon 1\nsteps 10\n";
  EXPECT_THROW(read_manifest(dir / "missing.manifest"), Error);
  EXPECT_THROW(read_manifest(dir / "nope.manifest"), Error);
}
