#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "sdhn/hypergraph.hpp"

using namespace sdhn::hypergraph;
using sdhn::diffnum::grad_check;
using sdhn::diffnum::Tape;
namespace dn = sdhn::diffnum;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

Matrix uniform(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Matrix random_binary(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(rng() & 1u);
  return m;
}

// Straight evaluation of the operator with explicit diagonal matrices.
Matrix hgcn_reference(const Matrix& h, const Matrix& x, const Matrix& theta) {
  const Eigen::Index n = h.rows(), m = h.cols();
  Matrix dinv = Matrix::Zero(n, n), binv = Matrix::Zero(m, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d = h.row(i).sum();
    if (d > 0) dinv(i, i) = 1.0 / std::sqrt(d);
  }
  for (Eigen::Index j = 0; j < m; ++j) {
    const double b = h.col(j).sum();
    if (b > 0) binv(j, j) = 1.0 / b;
  }
  const Matrix z = dinv * h * binv * h.transpose() * dinv * x * theta;
  return z.cwiseMax(0.0);
}

}  // namespace

TEST_CASE("gumbel noise examples") {
  CHECK(std::abs(gumbel_noise(mat({{std::exp(-1.0)}}))(0, 0)) < 1e-15);
  CHECK(gumbel_noise(mat({{std::exp(-std::exp(1.0))}}))(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  const Matrix e = gumbel_noise(mat({{0.1, 0.5, 0.9, 1.0 - 1e-9}}));
  CHECK(e(0, 0) > e(0, 1));
  CHECK(e(0, 1) > e(0, 2));
  CHECK(e(0, 2) > e(0, 3));
  CHECK(std::isfinite(gumbel_noise(mat({{0.0, 1.0}})).sum()));
  CHECK(std::abs(logistic_noise(mat({{0.5}}))(0, 0)) < 1e-15);
}

TEST_CASE("probability matrix clamps entries") {
  const HyperedgeProbMatrix p(mat({{0.0, 1.0, 0.3}}));
  CHECK(p.p()(0, 0) == kProbEps);
  CHECK(p.p()(0, 1) == 1.0 - kProbEps);
  CHECK(p.p()(0, 2) == 0.3);
  CHECK(p.n_agents() == 1);
  CHECK(p.n_hyperedges() == 3);
}

TEST_CASE("relaxed sample examples") {
  const Matrix zero = Matrix::Zero(1, 1);
  for (double tau : {0.1, 1.0, 5.0}) {
    CHECK(relaxed_sample(HyperedgeProbMatrix(mat({{0.5}})), zero, tau).y(0, 0) == 0.5);
  }
  const double p1 = 1.0 / (1.0 + std::exp(-1.0));
  CHECK(relaxed_sample(HyperedgeProbMatrix(mat({{p1}})), zero, 1.0).y(0, 0) == doctest::Approx(p1).epsilon(1e-12));
  const auto sat = relaxed_sample(HyperedgeProbMatrix(mat({{1.0}})), mat({{-3.0}}), 1.0);
  CHECK(sat.y(0, 0) > 0.9999);
  CHECK(sat.y(0, 0) < 1.0);
  CHECK_THROWS_AS(relaxed_sample(HyperedgeProbMatrix(mat({{0.5}})), zero, 0.0), ParameterError);
  CHECK_THROWS_AS(relaxed_sample(HyperedgeProbMatrix(mat({{0.5}})), Matrix::Zero(1, 2), 1.0), dn::ShapeError);
}

TEST_CASE("relaxed sample is reproducible") {
  std::mt19937_64 rng(3);
  const HyperedgeProbMatrix p(uniform(rng, 3, 4, 0.0, 1.0));
  const Matrix noise = gumbel_noise(uniform(rng, 3, 4, 0.0, 1.0));
  const auto a = relaxed_sample(p, noise, 0.7);
  const auto b = relaxed_sample(p, noise, 0.7);
  CHECK(a.y == b.y);
  CHECK((a.y.array() > 0.0).all());
  CHECK((a.y.array() < 1.0).all());
}

TEST_CASE("harden examples") {
  const Incidence tie = harden({mat({{0.5}}), 1.0, Matrix::Zero(1, 1)});
  CHECK(tie.h(0, 0) == 1.0);
  const Incidence inc = harden({mat({{0.9, 0.1}, {0.6, 0.7}}), 1.0, Matrix::Zero(2, 2)});
  CHECK(inc.h == mat({{1, 0}, {1, 1}}));
  CHECK(inc.d == (Vector(2) << 1, 2).finished());
  CHECK(inc.b == (Vector(2) << 2, 1).finished());
}

TEST_CASE("degree conservation on random incidences") {
  std::mt19937_64 rng(17);
  for (int k = 0; k < 200; ++k) {
    const Incidence inc = Incidence::from_binary(random_binary(rng, 1 + k % 6, 1 + k % 5));
    CHECK(inc.d.sum() == inc.b.sum());
    CHECK(inc.d.sum() == inc.h.sum());
  }
}

TEST_CASE("straight-through hardening passes the gradient unchanged") {
  std::mt19937_64 rng(4);
  Tape t;
  const Var y = t.variable(uniform(rng, 3, 3, 0.05, 0.95));
  const Matrix w = uniform(rng, 3, 3, -2.0, 2.0);
  const Var h = harden_st(y);
  CHECK(((h.value().array() == 0.0) || (h.value().array() == 1.0)).all());
  t.backward(dn::sum(dn::hadamard(h, t.constant(w))));
  CHECK(y.grad() == w);
}

TEST_CASE("sampling law matches the closed form") {
  constexpr int kDraws = 1000000;
  std::mt19937_64 rng(20240601);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (NoiseKind kind : {NoiseKind::gumbel, NoiseKind::logistic}) {
    for (double p : {0.1, 0.5, 0.9}) {
      const Matrix u = [&] {
        Matrix m(1, kDraws);
        for (int i = 0; i < kDraws; ++i) m(0, i) = unif(rng);
        return m;
      }();
      const auto y = relaxed_sample(HyperedgeProbMatrix(Matrix::Constant(1, kDraws, p)), make_noise(kind, u), 1.0);
      const double freq = harden(y).h.mean();
      const double expect = kind == NoiseKind::gumbel ? std::exp(-(1.0 - p) / p) : p;
      const double sigma = std::sqrt(expect * (1.0 - expect) / kDraws);
      INFO(to_string(kind), " p=", p, " freq=", freq, " expected=", expect);
      CHECK(std::abs(freq - expect) <= 3.0 * sigma);
    }
  }
}

TEST_CASE("noise kind names") {
  CHECK(parse_noise_kind("gumbel") == NoiseKind::gumbel);
  CHECK(parse_noise_kind("logistic") == NoiseKind::logistic);
  CHECK(to_string(NoiseKind::logistic) == "logistic");
  CHECK_THROWS(parse_noise_kind("normal"));
}

TEST_CASE("hgcn hand examples") {
  const Matrix two = hgcn_layer(Incidence::from_binary(mat({{1}, {1}})), mat({{1}, {3}}), mat({{1}}));
  CHECK(two == mat({{2}, {2}}));

  std::mt19937_64 rng(8);
  const Matrix x = uniform(rng, 4, 3, -1.0, 1.0);
  const Matrix theta = uniform(rng, 3, 2, -1.0, 1.0);
  const Matrix ident = hgcn_layer(Incidence::from_binary(Matrix::Identity(4, 4)), x, theta);
  CHECK((ident - Matrix((x * theta).cwiseMax(0.0))).cwiseAbs().maxCoeff() <= 1e-12);

  const Matrix single = hgcn_layer(Incidence::from_binary(Matrix::Ones(4, 1)), x, theta);
  const Matrix mean_row = x.colwise().mean() * theta;
  for (Eigen::Index i = 0; i < 4; ++i) {
    CHECK((single.row(i) - mean_row.cwiseMax(0.0)).cwiseAbs().maxCoeff() <= 1e-10);
  }

  const Matrix iso = hgcn_layer(Incidence::from_binary(mat({{1, 0}, {1, 0}, {0, 0}, {1, 0}})), x, theta);
  CHECK(iso.row(2).isZero(0.0));
  CHECK_THROWS_AS(hgcn_layer(Incidence::from_binary(Matrix::Ones(3, 1)), x, theta), dn::ShapeError);
}

TEST_CASE("hgcn matches the explicit operator") {
  std::mt19937_64 rng(12);
  for (int k = 0; k < 50; ++k) {
    const Matrix h = random_binary(rng, 5, 4);
    const Matrix x = uniform(rng, 5, 3, -1.0, 1.0);
    const Matrix theta = uniform(rng, 3, 3, -1.0, 1.0);
    const Matrix got = hgcn_layer(Incidence::from_binary(h), x, theta);
    CHECK((got - hgcn_reference(h, x, theta)).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("hgcn is permutation equivariant") {
  std::mt19937_64 rng(99);
  for (int k = 0; k < 20; ++k) {
    const Matrix h = random_binary(rng, 5, 3);
    const Matrix x = uniform(rng, 5, 4, -1.0, 1.0);
    const Matrix theta = uniform(rng, 4, 2, -1.0, 1.0);
    std::vector<int> perm(5);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix hp(5, 3), xp(5, 4);
    for (int i = 0; i < 5; ++i) {
      hp.row(i) = h.row(perm[i]);
      xp.row(i) = x.row(perm[i]);
    }
    const Matrix out = hgcn_layer(Incidence::from_binary(h), x, theta);
    const Matrix outp = hgcn_layer(Incidence::from_binary(hp), xp, theta);
    for (int i = 0; i < 5; ++i) CHECK((outp.row(i) - out.row(perm[i])).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("batched propagation equals per-block evaluation") {
  std::mt19937_64 rng(21);
  const Matrix h = random_binary(rng, 9, 4);
  const Matrix x = uniform(rng, 9, 3, -1.0, 1.0);
  const Matrix theta = uniform(rng, 3, 2, -1.0, 1.0);
  Tape t;
  const Matrix batched = hgcn_layer(t.constant(h), t.constant(x), t.constant(theta), 3).value();
  for (int b = 0; b < 3; ++b) {
    const Matrix one = hgcn_reference(h.middleRows(3 * b, 3), x.middleRows(3 * b, 3), theta);
    CHECK((batched.middleRows(3 * b, 3) - one).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("hgcn gradients pass grad_check") {
  std::mt19937_64 rng(31);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const Matrix h = random_binary(rng, 4, 3);
    const Matrix x0 = uniform(rng, 4, 3, -1.0, 1.0);
    const Matrix theta0 = uniform(rng, 3, 3, -1.0, 1.0);
    const Matrix w = uniform(rng, 4, 3, -1.0, 1.0);
    const auto loss = [&](Tape& t, Var out) { return dn::sum(dn::hadamard(out, t.constant(w))); };
    worst = std::max(worst, grad_check(
                                [&](Tape& t, Var x) {
                                  return loss(t, hgcn_layer(t.constant(h), x, t.constant(theta0), 4));
                                },
                                x0));
    worst = std::max(worst, grad_check(
                                [&](Tape& t, Var theta) {
                                  return loss(t, hgcn_layer(t.constant(h), t.constant(x0), theta, 4));
                                },
                                theta0));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("propagation gradient with respect to a soft incidence") {
  // The fused op differentiates through the degrees too; check on strictly positive incidences.
  std::mt19937_64 rng(41);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const Matrix h0 = uniform(rng, 6, 3, 0.2, 1.0);
    const Matrix x = uniform(rng, 6, 2, -1.0, 1.0);
    const Matrix w = uniform(rng, 6, 2, -1.0, 1.0);
    worst = std::max(worst, grad_check(
                                [&](Tape& t, Var h) {
                                  return dn::sum(dn::hadamard(hypergraph_propagate(h, t.constant(x), 3),
                                                              t.constant(w)));
                                },
                                h0));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("relaxed sample gradient with fixed noise") {
  std::mt19937_64 rng(51);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const Matrix p0 = uniform(rng, 3, 4, 0.05, 0.95);
    const Matrix noise = gumbel_noise(uniform(rng, 3, 4, 0.0, 1.0));
    const Matrix w = uniform(rng, 3, 4, -1.0, 1.0);
    const double tau = 0.5 + 0.1 * k;
    worst = std::max(worst, grad_check(
                                [&](Tape& t, Var p) {
                                  return dn::sum(dn::hadamard(relaxed_sample(p, noise, tau), t.constant(w)));
                                },
                                p0));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("skewness examples") {
  CHECK(skewness(std::vector<double>{2, 2, 2}) == 0.0);
  CHECK(moment_gamma(std::vector<double>{1, 1, 4}) == doctest::Approx(2.0 / std::pow(2.0, 1.5)).epsilon(1e-12));
  CHECK(std::abs(skewness(std::vector<double>{1, 1, 4}) - 0.33953) < 1e-4);
  CHECK(std::abs(skewness(std::vector<double>{4, 4, 1}) + 0.33953) < 1e-4);
  CHECK(skewness(std::vector<double>{7.5}) == 0.0);
  for (double c : {-3.0, 0.0, 1e-9, 2.5, 1e6}) CHECK(skewness(std::vector<double>(5, c)) == 0.0);
}

TEST_CASE("skewness antisymmetry and affine invariance") {
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int k = 0; k < 100; ++k) {
    std::vector<double> b(2 + k % 7);
    for (auto& v : b) v = u(rng);
    const double sk = skewness(b);
    CHECK(sk > -1.0);
    CHECK(sk < 1.0);
    std::vector<double> reflected(b.size()), affine(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) {
      reflected[i] = 5.0 - b[i];
      affine[i] = 2.5 * b[i] - 4.0;
    }
    CHECK(std::abs(skewness(reflected) + sk) < 1e-12);
    CHECK(std::abs(skewness(affine) - sk) < 1e-12);
  }
}

TEST_CASE("skewness loss examples") {
  CHECK(skewness_loss(-0.6, -0.6) == 0.0);
  CHECK(skewness_loss(0.0, -0.6) == doctest::Approx(0.36).epsilon(1e-15));
  Tape t;
  const Var l = skewness_loss(t.constant(mat({{0.0}, {-0.6}})), -0.6);
  CHECK(l.value()(0, 0) == doctest::Approx(0.18).epsilon(1e-15));
}

TEST_CASE("taped skewness agrees with the plain statistic") {
  std::mt19937_64 rng(71);
  const Matrix y = uniform(rng, 6, 4, 0.0, 1.0);
  Tape t;
  const Var sums = block_column_sums(t.constant(y), 3);
  CHECK(sums.rows() == 2);
  const Var sk = skewness_rows(sums);
  for (int b = 0; b < 2; ++b) {
    const Vector deg = y.middleRows(3 * b, 3).colwise().sum().transpose();
    const RelaxedIncidence r{y.middleRows(3 * b, 3), 1.0, Matrix::Zero(3, 4)};
    CHECK((relaxed_degrees(r) - deg).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(std::abs(sk.value()(b, 0) - skewness(deg)) < 1e-14);
  }
}

TEST_CASE("skewness loss on relaxed degrees passes grad_check") {
  std::mt19937_64 rng(81);
  double worst = 0.0;
  for (int k = 0; k < 50; ++k) {
    const Matrix y0 = uniform(rng, 6, 5, 0.05, 0.95);
    worst = std::max(worst, grad_check(
                                [](Tape&, Var y) {
                                  return skewness_loss(skewness_rows(block_column_sums(y, 3)), -0.6);
                                },
                                y0));
  }
  CHECK(worst < 1e-4);
}
