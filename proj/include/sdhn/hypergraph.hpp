#pragma once

#include <span>
#include <string_view>

#include "sdhn/diffnum.hpp"

namespace sdhn::hypergraph {

using diffnum::Matrix;
using diffnum::Var;
using diffnum::Vector;

/// Bernoulli parameters are kept inside [kProbEps, 1 - kProbEps] so both log-odds terms stay finite.
inline constexpr double kProbEps = 1e-6;
/// Uniforms feeding the noise transforms are clamped to [kUniformEps, 1 - kUniformEps].
inline constexpr double kUniformEps = 1e-12;
/// Below this standard deviation the degree skewness is defined as 0.
inline constexpr double kSkewStdFloor = 1e-8;

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class NoiseKind {
  /// eps = log(-log u). P(h = 1) = exp(-(1 - p) / p).
  gumbel,
  /// eps = log u - log(1 - u). P(h = 1) = p.
  logistic,
};

NoiseKind parse_noise_kind(std::string_view name);
std::string_view to_string(NoiseKind kind);

/// N×M matrix of per-(agent, hyperedge) membership probabilities.
class HyperedgeProbMatrix {
 public:
  /// Clamps every entry into [kProbEps, 1 - kProbEps].
  explicit HyperedgeProbMatrix(Matrix p);

  const Matrix& p() const { return p_; }
  Eigen::Index n_agents() const { return p_.rows(); }
  Eigen::Index n_hyperedges() const { return p_.cols(); }

 private:
  Matrix p_;
};

struct RelaxedIncidence {
  Matrix y;
  double tau = 1.0;
  Matrix noise;
};

/// Binary incidence with its vertex degrees d (row sums) and hyperedge degrees b (column sums).
struct Incidence {
  Matrix h;
  Vector d;
  Vector b;

  static Incidence from_binary(Matrix h);
};

Matrix gumbel_noise(const Matrix& u);
Matrix logistic_noise(const Matrix& u);
Matrix make_noise(NoiseKind kind, const Matrix& u);

RelaxedIncidence relaxed_sample(const HyperedgeProbMatrix& p, const Matrix& noise, double tau);
/// Taped y = sigmoid((log p - log(1 - p) + noise) / tau), differentiable in p.
Var relaxed_sample(Var p, const Matrix& noise, double tau);

/// h = 1{y >= 0.5} with ties rounding up.
Incidence harden(const RelaxedIncidence& y);
/// Straight-through hardening: forward is 1{y >= 0.5}, backward is the identity.
Var harden_st(Var y);

/// ReLU(D^-1/2 H B^-1 H^T D^-1/2 X Theta). Zero degrees contribute 0 in place of their inverse.
Matrix hgcn_layer(const Incidence& h, const Matrix& x, const Matrix& theta);

/// Taped normalized hypergraph propagation D^-1/2 H B^-1 H^T D^-1/2 X over a stack of
/// independent hypergraphs: rows [k·block, (k+1)·block) of `h` and `x` form graph k. The incidence
/// may be real-valued; degrees are its row/column sums and gradients flow into it.
Var hypergraph_propagate(Var h, Var x, Eigen::Index block);
/// Taped ReLU(propagate(h, x·theta)) over a stack of hypergraphs.
Var hgcn_layer(Var h, Var x, Var theta, Eigen::Index block);

/// Third standardized moment of the degrees.
double moment_gamma(std::span<const double> b);
/// Sk = 2 / (1 + e^-gamma) - 1, or 0 when the degrees have (near) zero spread.
double skewness(std::span<const double> b);
double skewness(const Vector& b);

/// Column sums of a relaxed sample: the degrees the skewness loss is driven by.
Vector relaxed_degrees(const RelaxedIncidence& y);

/// Per-graph column sums of a stacked incidence: (rows / block) × cols.
Var block_column_sums(Var y, Eigen::Index block);
/// Skewness of every row of `b`, as a column vector.
Var skewness_rows(Var b);

double skewness_loss(double sk, double lambda_sk);
/// Mean over entries of (sk - lambda_sk)^2.
Var skewness_loss(Var sk, double lambda_sk);

}  // namespace sdhn::hypergraph
