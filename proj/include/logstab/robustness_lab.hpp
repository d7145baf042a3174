#pragma once

// Desk-scale robustness experiment: a classifier
//
//   x -> A1 x + b1 -> neural ODE block (Euler, N steps) -> A2 . + b2 -> softmax
//
// trained on synthetic data, stabilized by replacing the ODE weight with the
// nearest matrix whose worst-case log-norm is delta, retrained, and
// attacked with FGSM / FGM.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "logstab/errors.hpp"
#include "logstab/extremal_diag.hpp"
#include "logstab/inner_flow.hpp"
#include "logstab/linalg.hpp"
#include "logstab/matrix_io.hpp"
#include "logstab/node_runtime.hpp"
#include "logstab/outer_newton.hpp"

namespace logstab {

// ---------------------------------------------------------------- data

enum class DatasetKind { blobs, moons };

inline const char* to_string(DatasetKind k) { return k == DatasetKind::blobs ? "blobs" : "moons"; }

inline DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "blobs") return DatasetKind::blobs;
  if (s == "moons") return DatasetKind::moons;
  throw ConfigError("unknown dataset '" + s + "' (expected blobs or moons)");
}

struct DatasetSpec {
  DatasetKind kind = DatasetKind::blobs;
  int classes = 2;
  int dimension = 2;
  int samples = 400;
  double separation = 4.0;  // blobs: distance of class means from the origin, in noise units
  double noise = 1.0;
  double validation_fraction = 0.2;
  double test_fraction = 0.25;
  std::uint64_t seed = 7;

  void validate() const {
    if (classes < 2) throw ConfigError("dataset: classes must be at least 2");
    if (dimension < 2) throw ConfigError("dataset: dimension must be at least 2");
    if (kind == DatasetKind::moons && classes != 2) throw ConfigError("dataset: moons has exactly 2 classes");
    if (samples < classes) throw ConfigError("dataset: need at least one sample per class");
    if (!(noise >= 0.0)) throw ConfigError("dataset: noise must be nonnegative");
    if (!(validation_fraction >= 0.0 && test_fraction > 0.0 && validation_fraction + test_fraction < 1.0)) {
      throw ConfigError("dataset: split fractions must leave a nonempty training set");
    }
  }
};

struct Sample {
  Vector x;
  int label = 0;
  int index = 0;  // position in the generated sequence
};

enum class Split { train, validation, test };

struct Dataset {
  int classes = 2;
  int dimension = 2;
  std::vector<Sample> train;
  std::vector<Sample> validation;
  std::vector<Sample> test;
};

namespace detail {

inline std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
  std::uint64_t out = 0;
  std::uint32_t v[2];
  seq.generate(v, v + 2);
  out = (static_cast<std::uint64_t>(v[0]) << 32) | v[1];
  return out;
}

/// Split membership depends only on (seed, index).
inline Split split_of(std::uint64_t seed, int index, const DatasetSpec& spec) {
  std::mt19937_64 rng(mix(seed, 0x5b17u + static_cast<std::uint64_t>(index) * 2654435761u));
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (u < spec.test_fraction) return Split::test;
  if (u < spec.test_fraction + spec.validation_fraction) return Split::validation;
  return Split::train;
}

inline Matrix class_means(const DatasetSpec& spec) {
  std::mt19937_64 rng(mix(spec.seed, 0x3ea5u));
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix means(spec.dimension, spec.classes);
  for (int c = 0; c < spec.classes; ++c) {
    Vector v(spec.dimension);
    do {
      for (int i = 0; i < spec.dimension; ++i) v[i] = g(rng);
    } while (v.norm() == 0.0);
    means.col(c) = 0.5 * spec.separation * spec.noise * v.normalized();
  }
  if (spec.classes == 2) means.col(1) = -means.col(0);
  return means;
}

}  // namespace detail

inline Sample generate_sample(const DatasetSpec& spec, const Matrix& means, int index) {
  std::mt19937_64 rng(detail::mix(spec.seed, 0x9e37u + static_cast<std::uint64_t>(index)));
  std::normal_distribution<double> g(0.0, 1.0);
  Sample s;
  s.index = index;
  s.label = index % spec.classes;
  s.x.resize(spec.dimension);
  if (spec.kind == DatasetKind::blobs) {
    for (int i = 0; i < spec.dimension; ++i) s.x[i] = means(i, s.label) + spec.noise * g(rng);
  } else {
    const double t = std::uniform_real_distribution<double>(0.0, M_PI)(rng);
    if (s.label == 0) {
      s.x[0] = std::cos(t);
      s.x[1] = std::sin(t);
    } else {
      s.x[0] = 1.0 - std::cos(t);
      s.x[1] = 0.5 - std::sin(t);
    }
    s.x[0] += spec.noise * g(rng);
    s.x[1] += spec.noise * g(rng);
    for (int i = 2; i < spec.dimension; ++i) s.x[i] = spec.noise * g(rng);
  }
  return s;
}

inline Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset d;
  d.classes = spec.classes;
  d.dimension = spec.dimension;
  const Matrix means = detail::class_means(spec);
  for (int i = 0; i < spec.samples; ++i) {
    Sample s = generate_sample(spec, means, i);
    switch (detail::split_of(spec.seed, i, spec)) {
      case Split::train: d.train.push_back(std::move(s)); break;
      case Split::validation: d.validation.push_back(std::move(s)); break;
      case Split::test: d.test.push_back(std::move(s)); break;
    }
  }
  if (d.train.empty() || d.test.empty()) throw ConfigError("dataset: a split came out empty; use more samples");
  return d;
}

inline std::string dataset_to_csv(const Dataset& d) {
  std::ostringstream os;
  os << "split,index,label";
  for (int i = 0; i < d.dimension; ++i) os << ",x" << i;
  os << '\n';
  auto emit = [&](const char* name, const std::vector<Sample>& v) {
    for (const auto& s : v) {
      os << name << ',' << s.index << ',' << s.label;
      for (Eigen::Index i = 0; i < s.x.size(); ++i) os << ',' << format_real(s.x[i]);
      os << '\n';
    }
  };
  emit("train", d.train);
  emit("validation", d.validation);
  emit("test", d.test);
  return os.str();
}

// ---------------------------------------------------------------- model

struct ToyClassifier {
  std::string name = "ODEnet";
  Matrix A1;  // ode_dim x input_dim
  Vector b1;
  NeuralOdeModel ode;  // one_layer or nsd
  Matrix A2;           // classes x ode_dim
  Vector b2;

  // Constraints enforced after every optimizer step.
  bool ode_weight_frozen = false;
  std::optional<double> a1_norm;  // spectral norm A1 is held at
  bool unit_a2 = false;           // ||A2||_2 = 1

  int classes() const { return static_cast<int>(A2.rows()); }
  Eigen::Index input_dim() const { return A1.cols(); }
  const Matrix& ode_weight() const { return ode.layers.front().weight; }
  Matrix& ode_weight() { return ode.layers.front().weight; }
};

inline ToyClassifier init_classifier(int input_dim, int ode_dim, int classes, OdeKind kind, double horizon,
                                     int steps, double alpha, std::uint64_t seed) {
  if (kind == OdeKind::two_layer) throw ConfigError("classifier: the ODE block must be one_layer or nsd");
  std::mt19937_64 rng(detail::mix(seed, 0x1417u));
  std::normal_distribution<double> g(0.0, 1.0);
  auto randn = [&](Eigen::Index r, Eigen::Index c, double s) {
    Matrix M(r, c);
    for (Eigen::Index j = 0; j < c; ++j) {
      for (Eigen::Index i = 0; i < r; ++i) M(i, j) = s * g(rng);
    }
    return M;
  };
  ToyClassifier m;
  m.A1 = randn(ode_dim, input_dim, 1.0 / std::sqrt(static_cast<double>(input_dim)));
  m.b1 = Vector::Zero(ode_dim);
  m.ode.kind = kind;
  m.ode.layers.push_back({randn(ode_dim, ode_dim, 1.0 / std::sqrt(static_cast<double>(ode_dim))),
                          Vector::Zero(ode_dim)});
  m.ode.activation = SmoothedLeakyReLU(alpha);
  m.ode.horizon = horizon;
  m.ode.steps = steps;
  m.A2 = randn(classes, ode_dim, 1.0 / std::sqrt(static_cast<double>(ode_dim)));
  m.b2 = Vector::Zero(classes);
  m.ode.validate();
  return m;
}

struct ForwardCache {
  Vector input;
  std::vector<Vector> states;  // x_0 .. x_N of the ODE block
  std::vector<Vector> pre;     // A x_k + b for k < N
  Vector probs;
};

inline Vector softmax(const Vector& z) {
  const double mx = z.maxCoeff();
  Vector e = (z.array() - mx).exp().matrix();
  return e / e.sum();
}

inline ForwardCache forward_pass(const ToyClassifier& m, const Vector& x) {
  if (x.size() != m.input_dim()) throw DimensionError("classifier: input has the wrong dimension");
  ForwardCache c;
  c.input = x;
  const Matrix& A = m.ode_weight();
  const Vector& b = m.ode.layers.front().bias;
  const double h = m.ode.step_size();
  const auto& act = m.ode.activation;
  c.states.reserve(static_cast<std::size_t>(m.ode.steps) + 1);
  c.pre.reserve(static_cast<std::size_t>(m.ode.steps));
  c.states.push_back(m.A1 * x + m.b1);
  for (int k = 0; k < m.ode.steps; ++k) {
    const Vector& xk = c.states.back();
    Vector u = A * xk + b;
    Vector f = (m.ode.kind == OdeKind::nsd) ? Vector(-A.transpose() * act.apply(u)) : act.apply(u);
    Vector next = xk + h * f;
    if (!next.allFinite()) throw DivergenceError("classifier: non-finite ODE state at step " + std::to_string(k + 1));
    c.pre.push_back(std::move(u));
    c.states.push_back(std::move(next));
  }
  c.probs = softmax(m.A2 * c.states.back() + m.b2);
  return c;
}

inline int predict(const ToyClassifier& m, const Vector& x) {
  Eigen::Index k = 0;
  forward_pass(m, x).probs.maxCoeff(&k);
  return static_cast<int>(k);
}

inline double sample_loss(const ToyClassifier& m, const Vector& x, int label) {
  return -std::log(std::max(forward_pass(m, x).probs[label], 1e-300));
}

struct ClassifierGradients {
  Matrix A1;
  Vector b1;
  Matrix A;
  Vector b;
  Matrix A2;
  Vector b2;
  Vector input;
  double loss = 0.0;

  static ClassifierGradients zeros_like(const ToyClassifier& m) {
    return {Matrix::Zero(m.A1.rows(), m.A1.cols()),
            Vector::Zero(m.b1.size()),
            Matrix::Zero(m.ode_weight().rows(), m.ode_weight().cols()),
            Vector::Zero(m.ode.layers.front().bias.size()),
            Matrix::Zero(m.A2.rows(), m.A2.cols()),
            Vector::Zero(m.b2.size()),
            Vector::Zero(m.input_dim()),
            0.0};
  }

  void add(const ClassifierGradients& o, double w) {
    A1 += w * o.A1;
    b1 += w * o.b1;
    A += w * o.A;
    b += w * o.b;
    A2 += w * o.A2;
    b2 += w * o.b2;
    loss += w * o.loss;
  }
};

/// Reverse pass of the cross-entropy loss through the unrolled Euler steps.
inline ClassifierGradients backprop(const ToyClassifier& m, const ForwardCache& c, int label) {
  if (label < 0 || label >= m.classes()) throw ContractViolation("classifier: label out of range");
  ClassifierGradients g = ClassifierGradients::zeros_like(m);
  g.loss = -std::log(std::max(c.probs[label], 1e-300));
  Vector dz = c.probs;
  dz[label] -= 1.0;
  g.A2 = dz * c.states.back().transpose();
  g.b2 = dz;
  Vector a = m.A2.transpose() * dz;
  const Matrix& A = m.ode_weight();
  const double h = m.ode.step_size();
  const auto& act = m.ode.activation;
  for (int k = m.ode.steps - 1; k >= 0; --k) {
    const Vector& xk = c.states[static_cast<std::size_t>(k)];
    const Vector& u = c.pre[static_cast<std::size_t>(k)];
    const Vector s1 = act.apply_derivative(u);
    if (m.ode.kind == OdeKind::nsd) {
      // f = -A^T sigma(u), u = A x + b
      const Vector Aa = A * a;
      const Vector dAa = s1.cwiseProduct(Aa);
      g.A.noalias() -= h * (act.apply(u) * a.transpose() + dAa * xk.transpose());
      g.b.noalias() -= h * dAa;
      a -= h * (A.transpose() * dAa);
    } else {
      const Vector da = s1.cwiseProduct(a);
      g.A.noalias() += h * da * xk.transpose();
      g.b.noalias() += h * da;
      a += h * (A.transpose() * da);
    }
  }
  g.A1 = a * c.input.transpose();
  g.b1 = a;
  g.input = m.A1.transpose() * a;
  return g;
}

inline ClassifierGradients loss_gradients(const ToyClassifier& m, const Vector& x, int label) {
  return backprop(m, forward_pass(m, x), label);
}

// ---------------------------------------------------------------- training

enum class Optimizer { sgd, adam };

inline const char* to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }

inline Optimizer parse_optimizer(const std::string& s) {
  if (s == "sgd") return Optimizer::sgd;
  if (s == "adam") return Optimizer::adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

struct TrainingConfig {
  int epochs = 30;
  double learning_rate = 0.05;
  int batch_size = 32;
  Optimizer optimizer = Optimizer::sgd;
  std::uint64_t seed = 7;
};

struct TrainingReport {
  std::vector<double> loss_curve;  // mean training loss per epoch
  double train_accuracy = 0.0;
};

inline double accuracy(const ToyClassifier& m, const std::vector<Sample>& data) {
  if (data.empty()) return 0.0;
  int ok = 0;
  for (const auto& s : data) ok += predict(m, s.x) == s.label ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

/// Rescales A1 / A2 to their prescribed spectral norms.
inline void enforce_constraints(ToyClassifier& m) {
  if (m.a1_norm) {
    const double s = spectral_norm(m.A1);
    if (s > 0.0) m.A1 *= *m.a1_norm / s;
  }
  if (m.unit_a2) {
    const double s = spectral_norm(m.A2);
    if (s > 0.0) m.A2 /= s;
  }
}

namespace detail {

struct AdamSlot {
  Matrix m1;
  Matrix m2;
};

inline void adam_update(Matrix& p, const Matrix& g, AdamSlot& slot, double lr, int t) {
  constexpr double b1 = 0.9;
  constexpr double b2 = 0.999;
  constexpr double eps = 1e-8;
  if (slot.m1.size() == 0) {
    slot.m1 = Matrix::Zero(g.rows(), g.cols());
    slot.m2 = Matrix::Zero(g.rows(), g.cols());
  }
  slot.m1 = b1 * slot.m1 + (1.0 - b1) * g;
  slot.m2 = b2 * slot.m2 + (1.0 - b2) * g.cwiseProduct(g);
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  p.array() -= lr * (slot.m1.array() / c1) / ((slot.m2.array() / c2).sqrt() + eps);
}

}  // namespace detail

/// Mini-batch training of the cross-entropy loss. Frozen ODE weights are
/// never touched; norm constraints are re-imposed after every step.
inline TrainingReport train(ToyClassifier& m, const std::vector<Sample>& data, const TrainingConfig& cfg) {
  if (data.empty()) throw ContractViolation("train: empty training set");
  if (cfg.epochs < 0 || cfg.batch_size < 1) throw ConfigError("train: epochs >= 0 and batch_size >= 1 required");
  TrainingReport rep;
  std::mt19937_64 rng(detail::mix(cfg.seed, 0x7a11u));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<detail::AdamSlot> slots(6);
  int t = 0;
  auto step = [&](Matrix& p, const Matrix& g, std::size_t slot) {
    if (cfg.optimizer == Optimizer::sgd) {
      p -= cfg.learning_rate * g;
    } else {
      detail::adam_update(p, g, slots[slot], cfg.learning_rate, t);
    }
  };
  auto step_vec = [&](Vector& p, const Vector& g, std::size_t slot) {
    Matrix pm = p;
    step(pm, g, slot);
    p = pm.col(0);
  };
  if (cfg.learning_rate == 0.0) {
    // Nothing moves; still report the loss curve.
    for (int e = 0; e < cfg.epochs; ++e) {
      double total = 0.0;
      for (const auto& s : data) total += sample_loss(m, s.x, s.label);
      rep.loss_curve.push_back(total / static_cast<double>(data.size()));
    }
    rep.train_accuracy = accuracy(m, data);
    return rep;
  }
  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      ClassifierGradients acc = ClassifierGradients::zeros_like(m);
      const double w = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = data[order[i]];
        acc.add(loss_gradients(m, s.x, s.label), w);
      }
      if (!std::isfinite(acc.loss)) throw DivergenceError("train: non-finite loss in epoch " + std::to_string(e + 1));
      total += acc.loss * static_cast<double>(end - start);
      ++t;
      step(m.A1, acc.A1, 0);
      step_vec(m.b1, acc.b1, 1);
      if (!m.ode_weight_frozen) step(m.ode_weight(), acc.A, 2);
      step_vec(m.ode.layers.front().bias, acc.b, 3);
      step(m.A2, acc.A2, 4);
      step_vec(m.b2, acc.b2, 5);
      enforce_constraints(m);
    }
    rep.loss_curve.push_back(total / static_cast<double>(data.size()));
  }
  rep.train_accuracy = accuracy(m, data);
  return rep;
}

// ---------------------------------------------------------------- attacks

enum class AttackKind { fgsm, fgm };

inline const char* to_string(AttackKind k) { return k == AttackKind::fgsm ? "fgsm" : "fgm"; }

struct AttackSpec {
  AttackKind kind = AttackKind::fgsm;
  double eta = 0.0;
};

struct AttackResult {
  Vector x;
  bool zero_gradient = false;
};

/// x + eta * sign(g) (fgsm) or x + eta * g / ||g||_2 (fgm), g the input
/// gradient of the loss.
inline AttackResult attack(const ToyClassifier& m, const Vector& x, int label, const AttackSpec& spec) {
  if (!(spec.eta >= 0.0)) throw ContractViolation("attack: eta must be nonnegative");
  AttackResult r;
  r.x = x;
  if (spec.eta == 0.0) return r;
  const Vector g = loss_gradients(m, x, label).input;
  if (g.lpNorm<Eigen::Infinity>() == 0.0) {
    r.zero_gradient = true;
    return r;
  }
  if (spec.kind == AttackKind::fgsm) {
    r.x += spec.eta * g.unaryExpr([](double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); });
  } else {
    r.x += spec.eta * g / g.norm();
  }
  return r;
}

// ---------------------------------------------------------------- baselines and stabilization

struct ShiftBaseline {
  double c = 0.0;
  double achieved_mu = 0.0;
  int iterations = 0;
};

/// c >= 0 with max over Omega_m of mu2(D (A - c I)) = delta, by bisection.
/// The search starts from [0, (max mu - delta) / m], whose right end
/// always satisfies the bound.
inline ShiftBaseline shift_baseline(const Matrix& A, double delta, double m, double tol = 1e-10) {
  detail::require_square(A, "shift_baseline");
  auto worst = [&](double c) {
    return find_extremizer(A - c * Matrix::Identity(A.rows(), A.cols()), m).mu_value;
  };
  ShiftBaseline out;
  const double mu0 = worst(0.0);
  if (mu0 <= delta) {
    out.achieved_mu = mu0;
    return out;
  }
  double lo = 0.0;
  double hi = (mu0 - delta) / m;
  double mu_hi = worst(hi);
  while (mu_hi > delta) {  // guards against an extremizer miss
    lo = hi;
    hi *= 2.0;
    mu_hi = worst(hi);
  }
  for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double v = worst(mid);
    ++out.iterations;
    if (v > delta) {
      lo = mid;
    } else {
      hi = mid;
      mu_hi = v;
    }
    if (std::abs(mu_hi - delta) <= tol) break;
  }
  out.c = hi;
  out.achieved_mu = mu_hi;
  return out;
}

/// max over random pairs of <f(x) - f(y), x - y> / ||x - y||^2 for the ODE field.
inline double empirical_one_sided_lipschitz(const NeuralOdeModel& model, int pairs, std::uint64_t seed,
                                            double radius = 3.0) {
  std::mt19937_64 rng(detail::mix(seed, 0x0e51u));
  std::uniform_real_distribution<double> u(-radius, radius);
  const Eigen::Index n = model.dim();
  double best = -std::numeric_limits<double>::infinity();
  for (int p = 0; p < pairs; ++p) {
    Vector x(n);
    Vector y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      x[i] = u(rng);
      y[i] = u(rng);
    }
    const Vector d = x - y;
    const double nn = d.squaredNorm();
    if (nn == 0.0) continue;
    best = std::max(best, (model.field(x) - model.field(y)).dot(d) / nn);
  }
  return best;
}

struct StabilizedClassifier {
  ToyClassifier model;
  StabilizationResult stabilization;
  TrainingReport retraining;
};

/// Freezes ||A1||_2, replaces the ODE weight by its stabilized version,
/// normalizes ||A2||_2 = 1 and retrains everything except the ODE weight.
inline StabilizedClassifier stabilize_and_retrain(const ToyClassifier& pretrained, const Dataset& data, double delta,
                                                  const TrainingConfig& retrain_cfg,
                                                  Structure structure = Structure::full,
                                                  const StabilizeOptions& sopts = {}) {
  if (pretrained.ode.kind != OdeKind::one_layer) {
    throw ContractViolation("stabilize_and_retrain: needs a one_layer ODE block");
  }
  StabilizedClassifier out;
  out.model = pretrained;
  ToyClassifier& m = out.model;
  StabilizeOptions so = sopts;
  so.structure = structure;
  out.stabilization = stabilize(m.ode_weight(), delta, m.ode.activation.alpha, so);
  if (!out.stabilization.converged) {
    throw ConvergenceError("stabilize_and_retrain: stabilization did not converge (" + out.stabilization.message +
                           ", " + std::to_string(out.stabilization.outer_iterations()) + " outer iterations)");
  }
  m.ode_weight() = out.stabilization.A_hat;
  m.ode_weight_frozen = true;
  m.a1_norm = spectral_norm(m.A1);
  m.unit_a2 = true;
  enforce_constraints(m);
  out.retraining = train(m, data.train, retrain_cfg);
  return out;
}

// ---------------------------------------------------------------- experiment

struct ExperimentConfig {
  DatasetSpec dataset{};
  std::uint64_t seed = 7;
  int ode_dim = 4;
  double horizon = 1.0;
  int steps = 10;
  double alpha = 0.1;
  TrainingConfig training{};
  int retrain_epochs = 20;
  std::vector<double> delta_grid{-0.2, 0.0, 0.3};
  std::vector<double> fgsm_etas{0.0, 0.5, 1.0};
  std::vector<double> fgm_etas{0.0, 0.5, 1.0};
  bool diagonal_variant = false;
  double max_clean_drop = 0.05;  // delta candidates losing more clean validation accuracy are skipped

  void validate() const {
    dataset.validate();
    if (delta_grid.empty()) throw ConfigError("config: delta_grid must not be empty");
    if (fgsm_etas.empty() && fgm_etas.empty()) throw ConfigError("config: no attack magnitudes");
    for (double e : fgsm_etas) {
      if (!(e >= 0.0)) throw ConfigError("config: fgsm_etas must be nonnegative");
    }
    for (double e : fgm_etas) {
      if (!(e >= 0.0)) throw ConfigError("config: fgm_etas must be nonnegative");
    }
    if (ode_dim < 1 || steps < 1 || !(horizon > 0.0)) throw ConfigError("config: bad ODE block shape");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("config: alpha must lie in (0, 1)");
    if (training.epochs < 0 || retrain_epochs < 0 || training.batch_size < 1) {
      throw ConfigError("config: bad training schedule");
    }
  }

  /// Propagates the master seed into the dataset and the optimizer.
  void reseed(std::uint64_t s) {
    seed = s;
    dataset.seed = s;
    training.seed = s;
  }
};

namespace detail {

inline std::string join_reals(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ' ';
    s += format_real(v[i]);
  }
  return s;
}

inline std::vector<double> parse_reals(const std::string& s, const std::string& key) {
  std::vector<double> out;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) out.push_back(parse_double(tok, key));
  return out;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("'" + key + "': expected true or false, got " + s);
}

}  // namespace detail

inline std::string format_config(const ExperimentConfig& c) {
  std::ostringstream os;
  os << "seed " << c.seed << '\n'
     << "dataset " << to_string(c.dataset.kind) << '\n'
     << "classes " << c.dataset.classes << '\n'
     << "dimension " << c.dataset.dimension << '\n'
     << "samples " << c.dataset.samples << '\n'
     << "separation " << format_real(c.dataset.separation) << '\n'
     << "noise " << format_real(c.dataset.noise) << '\n'
     << "validation_fraction " << format_real(c.dataset.validation_fraction) << '\n'
     << "test_fraction " << format_real(c.dataset.test_fraction) << '\n'
     << "ode_dim " << c.ode_dim << '\n'
     << "horizon " << format_real(c.horizon) << '\n'
     << "steps " << c.steps << '\n'
     << "alpha " << format_real(c.alpha) << '\n'
     << "epochs " << c.training.epochs << '\n'
     << "learning_rate " << format_real(c.training.learning_rate) << '\n'
     << "batch_size " << c.training.batch_size << '\n'
     << "optimizer " << to_string(c.training.optimizer) << '\n'
     << "retrain_epochs " << c.retrain_epochs << '\n'
     << "delta_grid " << detail::join_reals(c.delta_grid) << '\n'
     << "fgsm_etas " << detail::join_reals(c.fgsm_etas) << '\n'
     << "fgm_etas " << detail::join_reals(c.fgm_etas) << '\n'
     << "diagonal_variant " << (c.diagonal_variant ? "true" : "false") << '\n'
     << "max_clean_drop " << format_real(c.max_clean_drop) << '\n';
  return os.str();
}

/// Flat "key value" file; unknown keys are rejected, missing keys keep
/// their defaults. `seed` also seeds the dataset and the optimizer.
inline ExperimentConfig parse_config(std::istream& in, const std::string& what = "config") {
  auto kv = detail::read_key_values(in, what);
  ExperimentConfig c;
  auto get = [&](const std::string& key) -> std::optional<std::string> {
    auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  using detail::parse_double;
  using detail::parse_long;
  if (auto v = get("seed")) c.reseed(static_cast<std::uint64_t>(parse_long(*v, "seed")));
  if (auto v = get("dataset")) c.dataset.kind = parse_dataset_kind(*v);
  if (auto v = get("classes")) c.dataset.classes = static_cast<int>(parse_long(*v, "classes"));
  if (auto v = get("dimension")) c.dataset.dimension = static_cast<int>(parse_long(*v, "dimension"));
  if (auto v = get("samples")) c.dataset.samples = static_cast<int>(parse_long(*v, "samples"));
  if (auto v = get("separation")) c.dataset.separation = parse_double(*v, "separation");
  if (auto v = get("noise")) c.dataset.noise = parse_double(*v, "noise");
  if (auto v = get("validation_fraction")) c.dataset.validation_fraction = parse_double(*v, "validation_fraction");
  if (auto v = get("test_fraction")) c.dataset.test_fraction = parse_double(*v, "test_fraction");
  if (auto v = get("ode_dim")) c.ode_dim = static_cast<int>(parse_long(*v, "ode_dim"));
  if (auto v = get("horizon")) c.horizon = parse_double(*v, "horizon");
  if (auto v = get("steps")) c.steps = static_cast<int>(parse_long(*v, "steps"));
  if (auto v = get("alpha")) c.alpha = parse_double(*v, "alpha");
  if (auto v = get("epochs")) c.training.epochs = static_cast<int>(parse_long(*v, "epochs"));
  if (auto v = get("learning_rate")) c.training.learning_rate = parse_double(*v, "learning_rate");
  if (auto v = get("batch_size")) c.training.batch_size = static_cast<int>(parse_long(*v, "batch_size"));
  if (auto v = get("optimizer")) c.training.optimizer = parse_optimizer(*v);
  if (auto v = get("retrain_epochs")) c.retrain_epochs = static_cast<int>(parse_long(*v, "retrain_epochs"));
  if (auto v = get("delta_grid")) c.delta_grid = detail::parse_reals(*v, "delta_grid");
  if (auto v = get("fgsm_etas")) c.fgsm_etas = detail::parse_reals(*v, "fgsm_etas");
  if (auto v = get("fgm_etas")) c.fgm_etas = detail::parse_reals(*v, "fgm_etas");
  if (auto v = get("diagonal_variant")) c.diagonal_variant = detail::parse_bool(*v, "diagonal_variant");
  if (auto v = get("max_clean_drop")) c.max_clean_drop = parse_double(*v, "max_clean_drop");
  if (!kv.empty()) throw ConfigError(what + ": unknown key '" + kv.begin()->first + "'");
  c.validate();
  return c;
}

inline ExperimentConfig parse_config_string(const std::string& s) {
  std::istringstream in(s);
  return parse_config(in);
}

struct AccuracyRow {
  std::string model;
  AttackKind attack = AttackKind::fgsm;
  double eta = 0.0;
  double accuracy = 0.0;
};

struct NamedModel {
  std::string name;
  const ToyClassifier* model = nullptr;
};

inline double attacked_accuracy(const ToyClassifier& m, const std::vector<Sample>& data, const AttackSpec& spec) {
  if (data.empty()) return 0.0;
  int ok = 0;
  for (const auto& s : data) {
    const Vector x = attack(m, s.x, s.label, spec).x;
    ok += predict(m, x) == s.label ? 1 : 0;
  }
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

/// One row per (model, attack kind, eta) on the given samples.
inline std::vector<AccuracyRow> evaluate(const std::vector<NamedModel>& models, const std::vector<Sample>& data,
                                         const std::vector<double>& fgsm_etas, const std::vector<double>& fgm_etas) {
  std::vector<AccuracyRow> rows;
  for (const auto& nm : models) {
    if (!data.empty() && nm.model->input_dim() != data.front().x.size()) {
      throw DimensionError("evaluate: model " + nm.name + " has the wrong input dimension");
    }
    for (AttackKind kind : {AttackKind::fgsm, AttackKind::fgm}) {
      for (double eta : kind == AttackKind::fgsm ? fgsm_etas : fgm_etas) {
        rows.push_back({nm.name, kind, eta, attacked_accuracy(*nm.model, data, {kind, eta})});
      }
    }
  }
  return rows;
}

inline std::string accuracy_csv(const std::vector<AccuracyRow>& rows) {
  std::ostringstream os;
  os << "model,attack,eta,accuracy\n";
  for (const auto& r : rows) {
    os << r.model << ',' << to_string(r.attack) << ',' << format_real(r.eta) << ',' << format_real(r.accuracy)
       << '\n';
  }
  return os.str();
}

struct ModelCertificate {
  std::string model;
  double delta = 0.0;        // target (nan when not applicable)
  double achieved_mu = 0.0;  // max over Omega_alpha of mu2(D A) of the ODE weight
  double one_sided = 0.0;    // empirical one-sided Lipschitz constant of the ODE field
  double lipschitz = 0.0;    // ||A1|| exp(mu T) ||A2||
  std::string note;
};

struct DeltaScore {
  double delta = 0.0;
  double clean_validation = 0.0;
  double robust_validation = 0.0;  // mean over the attack grid
  bool eligible = false;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<AccuracyRow> rows;
  std::vector<ModelCertificate> certificates;
  std::vector<DeltaScore> delta_scores;
  double selected_delta = 0.0;
  TrainingReport pretraining;
  std::vector<ToyClassifier> models;  // in table order
};

namespace detail {

inline ModelCertificate certify(const std::string& name, const ToyClassifier& m, double delta, std::uint64_t seed) {
  ModelCertificate c;
  c.model = name;
  c.delta = delta;
  if (m.ode.kind == OdeKind::nsd) {
    // J = -A^T D A is negative semidefinite for every D.
    const Matrix& A = m.ode_weight();
    c.achieved_mu = find_extremizer(-A.transpose() * A, 1.0).mu_value;
    c.note = "nsd";
  } else {
    c.achieved_mu = find_extremizer(m.ode_weight(), m.ode.activation.alpha).mu_value;
  }
  c.one_sided = empirical_one_sided_lipschitz(m.ode, 2000, seed);
  c.lipschitz =
      lipschitz_bound({spectral_norm(m.A1), spectral_norm(m.A2)}, std::max(c.achieved_mu, c.one_sided), m.ode.horizon);
  return c;
}

inline double mean_accuracy(const std::vector<AccuracyRow>& rows) {
  double s = 0.0;
  for (const auto& r : rows) s += r.accuracy;
  return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

}  // namespace detail

inline std::string certificates_text(const std::vector<ModelCertificate>& certs, double selected_delta) {
  std::ostringstream os;
  os << "selected_delta " << format_real(selected_delta) << '\n';
  for (const auto& c : certs) {
    os << "model " << c.model << '\n'
       << "  delta " << (std::isnan(c.delta) ? std::string("none") : format_real(c.delta)) << '\n'
       << "  achieved_mu " << format_real(c.achieved_mu) << '\n'
       << "  one_sided_lipschitz " << format_real(c.one_sided) << '\n'
       << "  lipschitz_bound " << format_real(c.lipschitz) << '\n';
    if (!c.note.empty()) os << "  note " << c.note << '\n';
  }
  return os.str();
}

/// Pretrains ODEnet, picks delta on the validation split, builds stabODE
/// (and stabODE_d), shiftODE and nsdODE, and evaluates all of them on the
/// test split under the attack grid.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentResult res;
  res.config = cfg;
  const Dataset data = generate_dataset(cfg.dataset);
  const double nan = std::numeric_limits<double>::quiet_NaN();

  ToyClassifier base = init_classifier(cfg.dataset.dimension, cfg.ode_dim, cfg.dataset.classes, OdeKind::one_layer,
                                       cfg.horizon, cfg.steps, cfg.alpha, cfg.seed);
  base.name = "ODEnet";
  res.pretraining = train(base, data.train, cfg.training);

  TrainingConfig retrain = cfg.training;
  retrain.epochs = cfg.retrain_epochs;

  const std::vector<Sample>& val = data.validation.empty() ? data.train : data.validation;
  const double base_clean_val = accuracy(base, val);
  std::optional<StabilizedClassifier> chosen;
  double best_score = -1.0;
  for (double delta : cfg.delta_grid) {
    StabilizedClassifier sc = stabilize_and_retrain(base, data, delta, retrain);
    DeltaScore ds;
    ds.delta = delta;
    ds.clean_validation = accuracy(sc.model, val);
    ds.robust_validation = detail::mean_accuracy(evaluate({{"stabODE", &sc.model}}, val, cfg.fgsm_etas, cfg.fgm_etas));
    ds.eligible = ds.clean_validation >= base_clean_val - cfg.max_clean_drop;
    res.delta_scores.push_back(ds);
    // fall back to the best robust score when no candidate keeps the clean accuracy
    const double score = ds.robust_validation + (ds.eligible ? 1.0 : 0.0);
    if (score > best_score) {
      best_score = score;
      res.selected_delta = delta;
      chosen = std::move(sc);
    }
  }
  ToyClassifier stab = chosen->model;
  stab.name = "stabODE";

  std::vector<ToyClassifier> models{base, stab};
  std::vector<ModelCertificate> certs;
  certs.push_back(detail::certify("ODEnet", base, nan, cfg.seed));
  certs.push_back(detail::certify("stabODE", stab, res.selected_delta, cfg.seed));

  if (cfg.diagonal_variant) {
    StabilizedClassifier d = stabilize_and_retrain(base, data, res.selected_delta, retrain, Structure::diagonal);
    d.model.name = "stabODE_d";
    models.push_back(d.model);
    certs.push_back(detail::certify("stabODE_d", d.model, res.selected_delta, cfg.seed));
  }

  {
    ToyClassifier shift = base;
    shift.name = "shiftODE";
    const ShiftBaseline sb = shift_baseline(shift.ode_weight(), res.selected_delta, cfg.alpha);
    shift.ode_weight() -= sb.c * Matrix::Identity(cfg.ode_dim, cfg.ode_dim);
    shift.ode_weight_frozen = true;
    shift.a1_norm = spectral_norm(shift.A1);
    shift.unit_a2 = true;
    enforce_constraints(shift);
    train(shift, data.train, retrain);
    models.push_back(shift);
    ModelCertificate c = detail::certify("shiftODE", shift, res.selected_delta, cfg.seed);
    c.note = "shift c = " + format_real(sb.c);
    certs.push_back(c);
  }
  {
    ToyClassifier nsd = init_classifier(cfg.dataset.dimension, cfg.ode_dim, cfg.dataset.classes, OdeKind::nsd,
                                        cfg.horizon, cfg.steps, cfg.alpha, cfg.seed);
    nsd.name = "nsdODE";
    train(nsd, data.train, cfg.training);
    models.push_back(nsd);
    certs.push_back(detail::certify("nsdODE", nsd, 0.0, cfg.seed));
  }

  std::vector<NamedModel> named;
  for (const auto& m : models) named.push_back({m.name, &m});
  res.rows = evaluate(named, data.test, cfg.fgsm_etas, cfg.fgm_etas);
  res.certificates = std::move(certs);
  res.models = std::move(models);
  return res;
}

}  // namespace logstab
