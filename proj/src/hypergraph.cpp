#include "sdhn/hypergraph.hpp"

#include <cmath>
#include <string>

namespace sdhn::hypergraph {

using diffnum::ShapeError;
using diffnum::shape_str;
using diffnum::Tape;

NoiseKind parse_noise_kind(std::string_view name) {
  if (name == "gumbel") return NoiseKind::gumbel;
  if (name == "logistic") return NoiseKind::logistic;
  throw ParameterError("unknown noise kind '" + std::string(name) + "' (expected gumbel or logistic)");
}

std::string_view to_string(NoiseKind kind) {
  return kind == NoiseKind::gumbel ? "gumbel" : "logistic";
}

HyperedgeProbMatrix::HyperedgeProbMatrix(Matrix p) : p_(std::move(p)) {
  if (!p_.allFinite()) throw diffnum::DomainError("hyperedge probabilities must be finite");
  p_ = p_.cwiseMax(kProbEps).cwiseMin(1.0 - kProbEps);
}

Incidence Incidence::from_binary(Matrix h) {
  Incidence out;
  out.d = h.rowwise().sum();
  out.b = h.colwise().sum().transpose();
  out.h = std::move(h);
  return out;
}

namespace {

Matrix clamp_uniform(const Matrix& u) { return u.cwiseMax(kUniformEps).cwiseMin(1.0 - kUniformEps); }

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw std::logic_error(std::string(what) + ": non-finite result");
}

}  // namespace

Matrix gumbel_noise(const Matrix& u) {
  Matrix eps = clamp_uniform(u).unaryExpr([](double v) { return std::log(-std::log(v)); });
  require_finite(eps, "gumbel_noise");
  return eps;
}

Matrix logistic_noise(const Matrix& u) {
  Matrix eps = clamp_uniform(u).unaryExpr([](double v) { return std::log(v) - std::log1p(-v); });
  require_finite(eps, "logistic_noise");
  return eps;
}

Matrix make_noise(NoiseKind kind, const Matrix& u) {
  return kind == NoiseKind::gumbel ? gumbel_noise(u) : logistic_noise(u);
}

RelaxedIncidence relaxed_sample(const HyperedgeProbMatrix& p, const Matrix& noise, double tau) {
  Tape tape;
  Var y = relaxed_sample(tape.constant(p.p()), noise, tau);
  return RelaxedIncidence{y.value(), tau, noise};
}

Var relaxed_sample(Var p, const Matrix& noise, double tau) {
  if (!(tau > 0.0)) throw ParameterError("temperature must be positive, got " + std::to_string(tau));
  const Matrix& pv = p.value();
  if (pv.rows() != noise.rows() || pv.cols() != noise.cols()) {
    throw ShapeError("relaxed_sample: p " + shape_str(pv) + " vs noise " + shape_str(noise));
  }
  Matrix y(pv.rows(), pv.cols());
  for (Eigen::Index i = 0; i < pv.size(); ++i) {
    const double q = pv.data()[i];
    y.data()[i] = diffnum::sigmoid((std::log(q) - std::log1p(-q) + noise.data()[i]) / tau);
  }
  return p.tape().record(std::move(y), {p}, [p, tau](Tape& t, const Matrix& yv, const Matrix& g) {
    const auto& q = t.value(p).array();
    Matrix dp = (g.array() * yv.array() * (1.0 - yv.array()) / (tau * q * (1.0 - q))).matrix();
    t.accumulate(p, dp);
  });
}

Incidence harden(const RelaxedIncidence& y) {
  return Incidence::from_binary((y.y.array() >= 0.5).cast<double>().matrix());
}

Var harden_st(Var y) {
  Matrix h = (y.value().array() >= 0.5).cast<double>().matrix();
  return y.tape().record(std::move(h), {y}, [y](Tape& t, const Matrix&, const Matrix& g) { t.accumulate(y, g); });
}

namespace {

double inv_sqrt_or_zero(double v) { return v > 0.0 ? 1.0 / std::sqrt(v) : 0.0; }
double inv_or_zero(double v) { return v > 0.0 ? 1.0 / v : 0.0; }

}  // namespace

Matrix hgcn_layer(const Incidence& h, const Matrix& x, const Matrix& theta) {
  Tape tape;
  Var out = hgcn_layer(tape.constant(h.h), tape.constant(x), tape.constant(theta), h.h.rows());
  return out.value();
}

Var hypergraph_propagate(Var h, Var x, Eigen::Index block) {
  const Matrix& hv = h.value();
  const Matrix& xv = x.value();
  if (block < 1 || hv.rows() % block != 0) {
    throw ShapeError("hypergraph_propagate: " + std::to_string(hv.rows()) + " rows not divisible into blocks of " +
                     std::to_string(block));
  }
  if (xv.rows() != hv.rows()) {
    throw ShapeError("hypergraph_propagate: incidence " + shape_str(hv) + " vs features " + shape_str(xv));
  }
  const Eigen::Index graphs = hv.rows() / block;
  Matrix out(xv.rows(), xv.cols());
  for (Eigen::Index k = 0; k < graphs; ++k) {
    const auto hk = hv.middleRows(k * block, block);
    const Vector a = hk.rowwise().sum().unaryExpr(&inv_sqrt_or_zero);
    const Vector c = hk.colwise().sum().transpose().unaryExpr(&inv_or_zero);
    const Matrix u = a.asDiagonal() * xv.middleRows(k * block, block);
    const Matrix w = c.asDiagonal() * (hk.transpose() * u);
    out.middleRows(k * block, block) = a.asDiagonal() * (hk * w);
  }

  return h.tape().record(std::move(out), {h, x}, [h, x, block](Tape& t, const Matrix&, const Matrix& g) {
    const Matrix& hv = t.value(h);
    const Matrix& xv = t.value(x);
    const Eigen::Index graphs = hv.rows() / block;
    Matrix dh = Matrix::Zero(hv.rows(), hv.cols());
    Matrix dx(xv.rows(), xv.cols());
    for (Eigen::Index k = 0; k < graphs; ++k) {
      const auto hk = hv.middleRows(k * block, block);
      const auto xk = xv.middleRows(k * block, block);
      const auto gk = g.middleRows(k * block, block);
      const Vector deg_v = hk.rowwise().sum();
      const Vector deg_e = hk.colwise().sum().transpose();
      const Vector a = deg_v.unaryExpr(&inv_sqrt_or_zero);
      const Vector c = deg_e.unaryExpr(&inv_or_zero);
      // Forward chain: U = A X, V = H^T U, W = C V, Q = H W, Z = A Q.
      const Matrix u = a.asDiagonal() * xk;
      const Matrix v = hk.transpose() * u;
      const Matrix w = c.asDiagonal() * v;
      const Matrix q = hk * w;

      Vector da = (gk.cwiseProduct(q)).rowwise().sum();
      const Matrix dq = a.asDiagonal() * gk;
      Matrix dhk = dq * w.transpose();
      const Matrix dw = hk.transpose() * dq;
      const Vector dc = dw.cwiseProduct(v).rowwise().sum();
      const Matrix dv = c.asDiagonal() * dw;
      dhk += u * dv.transpose();
      const Matrix du = hk * dv;
      dx.middleRows(k * block, block) = a.asDiagonal() * du;
      da += du.cwiseProduct(xk).rowwise().sum();

      // a = d^-1/2, c = b^-1; zero degrees are constants.
      Vector dd(block);
      for (Eigen::Index i = 0; i < block; ++i) {
        dd(i) = deg_v(i) > 0.0 ? -0.5 * da(i) * a(i) * a(i) * a(i) : 0.0;
      }
      Vector db(deg_e.size());
      for (Eigen::Index j = 0; j < deg_e.size(); ++j) {
        db(j) = deg_e(j) > 0.0 ? -dc(j) * c(j) * c(j) : 0.0;
      }
      dhk.colwise() += dd;
      dhk.rowwise() += db.transpose();
      dh.middleRows(k * block, block) = dhk;
    }
    t.accumulate(h, dh);
    t.accumulate(x, dx);
  });
}

Var hgcn_layer(Var h, Var x, Var theta, Eigen::Index block) {
  return diffnum::relu(hypergraph_propagate(h, diffnum::matmul(x, theta), block));
}

double moment_gamma(std::span<const double> b) {
  if (b.empty()) throw ShapeError("skewness of an empty degree vector");
  const double n = static_cast<double>(b.size());
  double mu = 0;
  for (double v : b) mu += v;
  mu /= n;
  double m2 = 0, m3 = 0;
  for (double v : b) {
    const double c = v - mu;
    m2 += c * c;
    m3 += c * c * c;
  }
  m2 /= n;
  m3 /= n;
  if (std::sqrt(m2) < kSkewStdFloor) return 0.0;
  return m3 / std::pow(m2, 1.5);
}

double skewness(std::span<const double> b) {
  return 2.0 / (1.0 + std::exp(-moment_gamma(b))) - 1.0;
}

double skewness(const Vector& b) { return skewness(std::span<const double>(b.data(), b.size())); }

Vector relaxed_degrees(const RelaxedIncidence& y) { return y.y.colwise().sum().transpose(); }

Var block_column_sums(Var y, Eigen::Index block) {
  const Matrix& yv = y.value();
  if (block < 1 || yv.rows() % block != 0) {
    throw ShapeError("block_column_sums: " + std::to_string(yv.rows()) + " rows not divisible by " +
                     std::to_string(block));
  }
  const Eigen::Index graphs = yv.rows() / block;
  Matrix out(graphs, yv.cols());
  for (Eigen::Index k = 0; k < graphs; ++k) out.row(k) = yv.middleRows(k * block, block).colwise().sum();
  return y.tape().record(std::move(out), {y}, [y, block](Tape& t, const Matrix&, const Matrix& g) {
    Matrix dy(g.rows() * block, g.cols());
    for (Eigen::Index k = 0; k < g.rows(); ++k) dy.middleRows(k * block, block) = g.row(k).replicate(block, 1);
    t.accumulate(y, dy);
  });
}

Var skewness_rows(Var b) {
  const Matrix& bv = b.value();
  if (bv.cols() < 1) throw ShapeError("skewness_rows: empty degree vectors");
  Matrix out(bv.rows(), 1);
  for (Eigen::Index r = 0; r < bv.rows(); ++r) {
    out(r, 0) = skewness(std::span<const double>(bv.row(r).data(), static_cast<std::size_t>(bv.cols())));
  }
  return b.tape().record(std::move(out), {b}, [b](Tape& t, const Matrix& sk, const Matrix& g) {
    const Matrix& bv = t.value(b);
    const double n = static_cast<double>(bv.cols());
    Matrix db = Matrix::Zero(bv.rows(), bv.cols());
    for (Eigen::Index r = 0; r < bv.rows(); ++r) {
      const Eigen::RowVectorXd c = bv.row(r).array() - bv.row(r).mean();
      const double m2 = c.squaredNorm() / n;
      if (std::sqrt(m2) < kSkewStdFloor) continue;
      const double m3 = c.array().cube().sum() / n;
      // Sk = 2 sigmoid(gamma) - 1, so dSk/dgamma = 2 s (1 - s) = (1 - Sk^2) / 2.
      const double dsk_dgamma = 0.5 * (1.0 - sk(r, 0) * sk(r, 0));
      const Eigen::RowVectorXd dm3 = (3.0 / n) * (c.array().square() - m2);
      const Eigen::RowVectorXd dm2 = (2.0 / n) * c;
      const Eigen::RowVectorXd dgamma = dm3 / std::pow(m2, 1.5) - (1.5 * m3 / std::pow(m2, 2.5)) * dm2;
      db.row(r) = g(r, 0) * dsk_dgamma * dgamma;
    }
    t.accumulate(b, db);
  });
}

double skewness_loss(double sk, double lambda_sk) {
  const double diff = sk - lambda_sk;
  return diff * diff;
}

Var skewness_loss(Var sk, double lambda_sk) {
  return diffnum::mean(diffnum::square(diffnum::add_scalar(sk, -lambda_sk)));
}

}  // namespace sdhn::hypergraph
