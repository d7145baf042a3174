#pragma once

// Weight-tied neural ODEs integrated with explicit Euler, and an empirical
// check of ||x1(T) - x2(T)|| <= exp(delta T) ||x1(0) - x2(0)||.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "logstab/errors.hpp"
#include "logstab/linalg.hpp"
#include "logstab/matrix_io.hpp"

namespace logstab {

/// z for z >= 0, tanh z on [-z_bar, 0), alpha z + beta below -z_bar, where
/// tanh'(z_bar) = alpha. The derivative ranges over [alpha, 1].
struct SmoothedLeakyReLU {
  double alpha = 0.1;
  double z_bar = 0.0;
  double beta = 0.0;

  SmoothedLeakyReLU() : SmoothedLeakyReLU(0.1) {}

  explicit SmoothedLeakyReLU(double a) : alpha(a) {
    if (!(a > 0.0 && a < 1.0)) throw ContractViolation("SmoothedLeakyReLU: alpha must lie in (0, 1)");
    z_bar = std::atanh(std::sqrt(1.0 - a));
    beta = std::tanh(-z_bar) + a * z_bar;
  }

  double operator()(double z) const {
    if (z >= 0.0) return z;
    if (z >= -z_bar) return std::tanh(z);
    return alpha * z + beta;
  }

  double derivative(double z) const {
    if (z >= 0.0) return 1.0;
    if (z >= -z_bar) {
      const double t = std::tanh(z);
      return 1.0 - t * t;
    }
    return alpha;
  }

  Vector apply(const Vector& z) const { return z.unaryExpr([this](double v) { return (*this)(v); }); }
  Vector apply_derivative(const Vector& z) const {
    return z.unaryExpr([this](double v) { return derivative(v); });
  }
};

enum class OdeKind { one_layer, two_layer, nsd };

inline const char* to_string(OdeKind k) {
  switch (k) {
    case OdeKind::one_layer: return "one_layer";
    case OdeKind::two_layer: return "two_layer";
    case OdeKind::nsd: return "nsd";
  }
  return "unknown";
}

inline OdeKind parse_ode_kind(const std::string& s) {
  if (s == "one_layer") return OdeKind::one_layer;
  if (s == "two_layer") return OdeKind::two_layer;
  if (s == "nsd") return OdeKind::nsd;
  throw ConfigError("unknown model kind '" + s + "' (expected one_layer, two_layer or nsd)");
}

struct Layer {
  Matrix weight;
  Vector bias;
};

/// one_layer:  dx/dt = sigma(A x + b)
/// two_layer:  dx/dt = sigma(A2 sigma(A1 x + b1) + b2)
/// nsd:        dx/dt = -A^T sigma(A x + b)
struct NeuralOdeModel {
  OdeKind kind = OdeKind::one_layer;
  std::vector<Layer> layers;
  SmoothedLeakyReLU activation{};
  double horizon = 1.0;
  int steps = 1000;

  Eigen::Index dim() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
  double step_size() const { return horizon / steps; }

  void validate() const {
    const std::size_t want = kind == OdeKind::two_layer ? 2 : 1;
    if (layers.size() != want) {
      throw ContractViolation(std::string("NeuralOdeModel: ") + to_string(kind) + " needs " + std::to_string(want) +
                              " layer(s), got " + std::to_string(layers.size()));
    }
    if (steps < 1) throw ContractViolation("NeuralOdeModel: steps must be at least 1");
    if (!(horizon > 0.0)) throw ContractViolation("NeuralOdeModel: horizon must be positive");
    for (const auto& l : layers) {
      if (l.bias.size() != l.weight.rows()) {
        throw DimensionError("NeuralOdeModel: bias of length " + std::to_string(l.bias.size()) +
                             " does not match weight " + detail::shape_str(l.weight));
      }
    }
    const Eigen::Index n = dim();
    if (kind == OdeKind::two_layer) {
      if (layers[1].weight.cols() != layers[0].weight.rows() || layers[1].weight.rows() != n) {
        throw DimensionError("NeuralOdeModel: layers " + detail::shape_str(layers[0].weight) + " and " +
                             detail::shape_str(layers[1].weight) + " do not compose to a square map");
      }
    } else if (kind == OdeKind::one_layer) {
      detail::require_square(layers[0].weight, "NeuralOdeModel");
    }
  }

  Vector field(const Vector& x) const {
    switch (kind) {
      case OdeKind::one_layer: return activation.apply(layers[0].weight * x + layers[0].bias);
      case OdeKind::two_layer: {
        const Vector h = activation.apply(layers[0].weight * x + layers[0].bias);
        return activation.apply(layers[1].weight * h + layers[1].bias);
      }
      case OdeKind::nsd:
        return -layers[0].weight.transpose() * activation.apply(layers[0].weight * x + layers[0].bias);
    }
    return Vector();
  }

  static NeuralOdeModel one_layer_model(Matrix A, Vector b, double T, int N, double alpha = 0.1) {
    NeuralOdeModel m;
    m.kind = OdeKind::one_layer;
    m.layers.push_back({std::move(A), std::move(b)});
    m.activation = SmoothedLeakyReLU(alpha);
    m.horizon = T;
    m.steps = N;
    m.validate();
    return m;
  }
};

namespace detail {

inline void check_finite(const Vector& x, int step) {
  if (!x.allFinite()) throw DivergenceError("forward: non-finite state at step " + std::to_string(step));
}

}  // namespace detail

/// Explicit Euler trajectory x_0, ..., x_N with h = T / N.
inline std::vector<Vector> forward(const NeuralOdeModel& model, const Vector& x0) {
  model.validate();
  if (x0.size() != model.dim()) {
    throw DimensionError("forward: state of length " + std::to_string(x0.size()) + " for a model of dimension " +
                         std::to_string(model.dim()));
  }
  const double h = model.step_size();
  std::vector<Vector> traj;
  traj.reserve(static_cast<std::size_t>(model.steps) + 1);
  traj.push_back(x0);
  for (int k = 0; k < model.steps; ++k) {
    Vector next = traj.back() + h * model.field(traj.back());
    detail::check_finite(next, k + 1);
    traj.push_back(std::move(next));
  }
  return traj;
}

/// x_N only.
inline Vector flow_map(const NeuralOdeModel& model, Vector x) {
  model.validate();
  if (x.size() != model.dim()) throw DimensionError("flow_map: state has the wrong dimension");
  const double h = model.step_size();
  for (int k = 0; k < model.steps; ++k) {
    x += h * model.field(x);
    detail::check_finite(x, k + 1);
  }
  return x;
}

struct BoundReport {
  double delta = 0.0;
  double horizon = 0.0;
  int steps = 0;
  int trials = 0;
  double scale = 0.0;
  double slack = 1e-3;
  double bound = 0.0;  // exp(delta T)
  double max_amplification = 0.0;
  double mean_amplification = 0.0;
  int violations = 0;  // ratios above bound * (1 + slack)
  std::uint64_t seed = 0;
};

struct VerifyOptions {
  std::uint64_t seed = 20240611;
  double slack = 1e-3;
};

/// Integrates `trials` pairs x1 ~ U[-1, 1]^n, x2 = x1 + scale * u with u a
/// normalized Gaussian direction, and records ||x1(T) - x2(T)|| / ||x1(0) - x2(0)||.
inline BoundReport verify_bound(const NeuralOdeModel& model, double delta, int trials, double scale,
                                const VerifyOptions& opts = {}) {
  model.validate();
  if (trials < 1) throw ContractViolation("verify_bound: trials must be at least 1");
  if (!(scale > 0.0)) throw ContractViolation("verify_bound: scale must be positive");
  BoundReport rep;
  rep.delta = delta;
  rep.horizon = model.horizon;
  rep.steps = model.steps;
  rep.trials = trials;
  rep.scale = scale;
  rep.slack = opts.slack;
  rep.seed = opts.seed;
  rep.bound = std::exp(delta * model.horizon);
  const Eigen::Index n = model.dim();
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  double sum = 0.0;
  for (int t = 0; t < trials; ++t) {
    Vector x1(n);
    Vector u(n);
    for (Eigen::Index i = 0; i < n; ++i) x1[i] = unif(rng);
    do {
      for (Eigen::Index i = 0; i < n; ++i) u[i] = gauss(rng);
    } while (u.norm() == 0.0);
    const Vector x2 = x1 + scale * u.normalized();
    const double before = (x1 - x2).norm();
    const double after = (flow_map(model, x1) - flow_map(model, x2)).norm();
    const double ratio = after / before;
    sum += ratio;
    rep.max_amplification = std::max(rep.max_amplification, ratio);
    if (ratio > rep.bound * (1.0 + opts.slack)) ++rep.violations;
  }
  rep.mean_amplification = sum / trials;
  return rep;
}

inline std::string format_bound_report(const BoundReport& r) {
  std::ostringstream os;
  os << "delta " << format_real(r.delta) << '\n'
     << "horizon " << format_real(r.horizon) << '\n'
     << "steps " << r.steps << '\n'
     << "trials " << r.trials << '\n'
     << "scale " << format_real(r.scale) << '\n'
     << "seed " << r.seed << '\n'
     << "slack " << format_real(r.slack) << '\n'
     << "bound " << format_real(r.bound) << '\n'
     << "max_amplification " << format_real(r.max_amplification) << '\n'
     << "mean_amplification " << format_real(r.mean_amplification) << '\n'
     << "violations " << r.violations << '\n';
  return os.str();
}

/// Lipschitz constant of an affine/ODE/affine/softmax chain: the product of
/// the affine operator norms times exp(delta T) for the ODE block. Softmax
/// is 1-Lipschitz.
inline double lipschitz_bound(const std::vector<double>& operator_norms, double delta, double T) {
  double L = std::exp(delta * T);
  for (double v : operator_norms) {
    if (!(v >= 0.0)) throw ContractViolation("lipschitz_bound: operator norms must be nonnegative");
    L *= v;
  }
  return L;
}

// Manifest: one "key value" pair per line, '#' starts a comment.
//   kind one_layer|two_layer|nsd
//   alpha 0.1
//   horizon 1
//   steps 2000
//   weight1 A.txt
//   bias1 b.txt            (n x 1 matrix file)
//   weight2 / bias2        (two_layer only)
// Paths are relative to the manifest's directory.

namespace detail {

inline std::map<std::string, std::string> read_key_values(std::istream& in, const std::string& what) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    std::string value;
    std::getline(ls, value);
    const auto first = value.find_first_not_of(" \t");
    const auto last = value.find_last_not_of(" \t\r");
    if (first == std::string::npos) throw ParseError(what + ": key '" + key + "' has no value", lineno);
    value = value.substr(first, last - first + 1);
    if (!kv.emplace(key, value).second) throw ParseError(what + ": duplicate key '" + key + "'", lineno);
  }
  return kv;
}

inline double parse_double(const std::string& s, const std::string& key) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || !std::isfinite(v)) throw ConfigError("'" + key + "': not a finite number: " + s);
  return v;
}

inline long parse_long(const std::string& s, const std::string& key) {
  std::size_t pos = 0;
  long v = 0;
  try {
    v = std::stol(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size()) throw ConfigError("'" + key + "': not an integer: " + s);
  return v;
}

inline Vector bias_from_matrix(const Matrix& b, const std::string& path) {
  if (b.cols() != 1) throw DimensionError(path + ": bias must be an n x 1 matrix, got " + shape_str(b));
  return b.col(0);
}

}  // namespace detail

inline NeuralOdeModel read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  auto kv = detail::read_key_values(in, path.string());
  const auto dir = path.parent_path();
  auto take = [&](const std::string& key) -> std::string {
    auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError(path.string() + ": missing key '" + key + "'");
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  NeuralOdeModel m;
  m.kind = parse_ode_kind(take("kind"));
  m.activation = SmoothedLeakyReLU(detail::parse_double(take("alpha"), "alpha"));
  m.horizon = detail::parse_double(take("horizon"), "horizon");
  m.steps = static_cast<int>(detail::parse_long(take("steps"), "steps"));
  const int count = m.kind == OdeKind::two_layer ? 2 : 1;
  for (int i = 1; i <= count; ++i) {
    const auto wpath = dir / take("weight" + std::to_string(i));
    const auto bpath = dir / take("bias" + std::to_string(i));
    Layer l;
    l.weight = read_matrix_file(wpath.string());
    l.bias = detail::bias_from_matrix(read_matrix_file(bpath.string()), bpath.string());
    m.layers.push_back(std::move(l));
  }
  if (!kv.empty()) throw ConfigError(path.string() + ": unknown key '" + kv.begin()->first + "'");
  m.validate();
  return m;
}

/// Writes the manifest and its matrix files (named <stem>_weightK.txt,
/// <stem>_biasK.txt) next to it.
inline void write_manifest(const NeuralOdeModel& model, const std::filesystem::path& path) {
  model.validate();
  const auto dir = path.parent_path();
  const std::string stem = path.stem().string();
  std::ostringstream os;
  os << "kind " << to_string(model.kind) << '\n'
     << "alpha " << format_real(model.activation.alpha) << '\n'
     << "horizon " << format_real(model.horizon) << '\n'
     << "steps " << model.steps << '\n';
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const std::string k = std::to_string(i + 1);
    const std::string w = stem + "_weight" + k + ".txt";
    const std::string b = stem + "_bias" + k + ".txt";
    write_matrix_file((dir / w).string(), model.layers[i].weight);
    write_matrix_file((dir / b).string(), Matrix(model.layers[i].bias));
    os << "weight" << k << ' ' << w << '\n' << "bias" << k << ' ' << b << '\n';
  }
  write_file_atomic(path.string(), os.str());
}

}  // namespace logstab
