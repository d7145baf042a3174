// Stabilizes a random 5 x 5 weight to delta = 0 and checks, by integrating
// the neural ODE, that nearby trajectories no longer separate.

#include <cstdio>
#include <random>

#include "logstab/node_runtime.hpp"
#include "logstab/outer_newton.hpp"

int main() {
  using namespace logstab;
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix A(5, 5);
  for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = g(rng);

  const double m = 0.1;  // minimal slope of the activation
  const double delta = 0.0;
  std::printf("max mu2(D A) before: %.6f\n", max_lognorm(A, m));

  StabilizationResult r = stabilize(A, delta, m);
  std::printf("eps* = %.6f after %d outer iterations, certificate %.3e\n", r.epsilon_star, r.outer_iterations(),
              r.achieved_mu - delta);

  for (const Matrix* W : {&A, &r.A_hat}) {
    NeuralOdeModel model = NeuralOdeModel::one_layer_model(*W, Vector::Zero(5), 1.0, 2000, m);
    BoundReport rep = verify_bound(model, delta, 200, 1e-3);
    std::printf("%s: max amplification %.4f (bound %.4f, %d violations)\n", W == &A ? "original" : "stabilized",
                rep.max_amplification, rep.bound, rep.violations);
  }
  return r.converged ? 0 : 2;
}
