#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "sdhn/diffnum.hpp"

using namespace sdhn::diffnum;

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

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

}  // namespace

TEST_CASE("matmul hand examples") {
  Tape t;
  const Matrix a = mat({{1, 2}, {3, 4}});
  CHECK(matmul(t.constant(Matrix::Identity(2, 2)), t.constant(a)).value() == a);
  CHECK(matmul(t.constant(a), t.constant(mat({{1}, {1}}))).value() == mat({{3}, {7}}));
  CHECK(matmul(t.constant(a), t.constant(Matrix::Zero(2, 3))).value() == Matrix::Zero(2, 3));
  CHECK_THROWS_AS(matmul(t.constant(a), t.constant(Matrix::Zero(3, 1))), ShapeError);
}

TEST_CASE("matmul with identity is associative exactly") {
  std::mt19937_64 rng(5);
  Tape t;
  const Var a = t.constant(random_matrix(rng, 3, 4));
  const Var b = t.constant(random_matrix(rng, 4, 2));
  const Var i = t.constant(Matrix::Identity(4, 4));
  CHECK(matmul(matmul(a, i), b).value() == matmul(a, matmul(i, b)).value());
}

TEST_CASE("elementwise definitions") {
  Tape t;
  CHECK(sigmoid(t.constant(mat({{0}}))).value()(0, 0) == 0.5);
  CHECK(relu(t.constant(mat({{-3}}))).value()(0, 0) == 0.0);
  CHECK(square(t.constant(mat({{2}}))).value()(0, 0) == 4.0);
  CHECK(negate(t.constant(mat({{2}}))).value()(0, 0) == -2.0);
  CHECK_THROWS_AS(log(t.constant(mat({{0.0}}))), DomainError);
  CHECK_THROWS_AS(log(t.constant(mat({{-1.0}}))), DomainError);
  CHECK_THROWS_AS(exp(t.constant(mat({{std::numeric_limits<double>::quiet_NaN()}}))), DomainError);
}

TEST_CASE("relu gradient at zero is zero") {
  Tape t;
  const Var x = t.variable(mat({{0.0, 1.0, -1.0}}));
  t.backward(sum(relu(x)));
  CHECK(x.grad() == mat({{0.0, 1.0, 0.0}}));
}

TEST_CASE("reduce examples") {
  Tape t;
  CHECK(reduce(Reduction::sum, t.constant(mat({{1, 2}, {3, 4}})), Axis::cols).value() == mat({{3}, {7}}));
  CHECK(reduce(Reduction::sum, t.constant(mat({{1, 2}, {3, 4}})), Axis::rows).value() == mat({{4, 6}}));
  CHECK(mean(t.constant(mat({{2, 2, 2}}))).value()(0, 0) == 2.0);
  CHECK(sum(t.constant(Matrix::Zero(3, 2))).value()(0, 0) == 0.0);
  CHECK_THROWS_AS(sum(t.constant(Matrix(0, 0))), ShapeError);
}

TEST_CASE("mean times count equals sum") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tape t;
    const Var x = t.constant(random_matrix(rng, 1 + trial % 5, 1 + trial % 7, -10, 10));
    const double s = sum(x).value()(0, 0);
    const double m = mean(x).value()(0, 0) * static_cast<double>(x.value().size());
    CHECK(std::abs(m - s) <= 1e-12 * std::max(1.0, std::abs(s)));
  }
}

TEST_CASE("broadcast add accepts row and column vectors only") {
  Tape t;
  const Var a = t.constant(mat({{1, 2}, {3, 4}}));
  CHECK(add(a, t.constant(mat({{10, 20}}))).value() == mat({{11, 22}, {13, 24}}));
  CHECK(add(a, t.constant(mat({{10}, {20}}))).value() == mat({{11, 12}, {23, 24}}));
  CHECK_THROWS_AS(add(a, t.constant(Matrix::Zero(3, 2))), ShapeError);
  CHECK_THROWS_AS(hadamard(a, t.constant(Matrix::Zero(2, 1))), ShapeError);
}

TEST_CASE("grad_check examples") {
  CHECK(grad_check([](Tape&, Var x) { return sum(square(x)); }, mat({{1, 2}})) < 1e-6);
  CHECK(grad_check([](Tape&, Var x) { return sum(x); }, mat({{1, 2, 3}})) < 1e-9);

  Tape t;
  const Var x = t.variable(mat({{1, 2}}));
  t.backward(sum(square(x)));
  CHECK(x.grad() == mat({{2, 4}}));
}

TEST_CASE("grad_check rejects bad step and non-finite probes") {
  const auto f = [](Tape&, Var x) { return sum(x); };
  CHECK_THROWS_AS(grad_check(f, mat({{1}}), 1e-8), DomainError);
  CHECK_THROWS_AS(grad_check(f, mat({{1}}), 1e-2), DomainError);
  CHECK_THROWS_AS(grad_check([](Tape&, Var x) { return sum(log(x)); }, mat({{1e-7}}), 1e-6), DomainError);
}

TEST_CASE("every primitive passes grad_check at 100 random points") {
  std::mt19937_64 rng(2024);
  using Fn = std::function<Var(Tape&, Var)>;
  std::mt19937_64 wrng(7);
  const Matrix w = random_matrix(wrng, 2, 3);
  const Matrix other = random_matrix(wrng, 2, 3);
  const std::vector<int> pick_index = {1, 0, 1};
  const std::vector<std::pair<const char*, Fn>> cases = {
      {"matmul left", [&](Tape& t, Var x) { return sum(square(matmul(x, t.constant(w)))); }},
      {"matmul right", [&](Tape& t, Var x) { return sum(square(matmul(t.constant(other), x))); }},
      {"sigmoid", [](Tape&, Var x) { return sum(square(sigmoid(x))); }},
      {"relu", [](Tape&, Var x) { return sum(square(relu(x))); }},
      {"tanh", [](Tape&, Var x) { return sum(square(tanh(x))); }},
      {"log", [](Tape&, Var x) { return sum(log(add_scalar(square(x), 0.5))); }},
      {"exp", [](Tape&, Var x) { return sum(exp(x)); }},
      {"negate", [](Tape&, Var x) { return sum(square(negate(x))); }},
      {"mean rows", [](Tape&, Var x) { return sum(square(reduce(Reduction::mean, x, Axis::rows))); }},
      {"sum cols", [](Tape&, Var x) { return sum(square(reduce(Reduction::sum, x, Axis::cols))); }},
      {"broadcast add", [&](Tape&, Var x) { return sum(square(add(x, reduce(Reduction::sum, x, Axis::rows)))); }},
      {"hadamard", [&](Tape& t, Var x) { return sum(hadamard(x, hadamard(x, t.constant(other.transpose())))); }},
      {"sub scale", [](Tape&, Var x) { return sum(square(sub(scale(x, 3.0), x))); }},
      {"concat", [](Tape&, Var x) { return sum(square(concat_cols(x, tanh(x)))); }},
      {"repeat", [](Tape&, Var x) { return sum(square(sigmoid(repeat_rows(x, 3)))); }},
      {"log_softmax", [](Tape&, Var x) { return sum(square(log_softmax_rows(x))); }},
      {"pick", [&](Tape&, Var x) { return sum(square(pick(x, pick_index))); }},
      {"clamp", [](Tape&, Var x) { return sum(square(clamp(x, -0.5, 0.5))); }},
      {"minimum", [](Tape&, Var x) { return sum(square(minimum(x, scale(x, -1.0)))); }},
  };
  for (const auto& [name, f] : cases) {
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
      Matrix x = random_matrix(rng, 3, 2);
      // Keep kinks at least 1e-2 away.
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        double& v = x.data()[i];
        if (std::abs(v) < 1e-2) v = v < 0 ? -1e-2 - 0.01 : 1e-2 + 0.01;
        if (std::abs(std::abs(v) - 0.5) < 1e-2) v += 0.05;
      }
      worst = std::max(worst, grad_check(f, x));
    }
    INFO(name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("gradient of a sum of losses is the sum of gradients") {
  const Matrix x0 = mat({{0.3, -0.7}, {1.1, 0.2}});
  const auto grad_of = [&](const std::function<Var(Var)>& f) {
    Tape t;
    const Var x = t.variable(x0);
    t.backward(f(x));
    return Matrix(x.grad());
  };
  const Matrix g1 = grad_of([](Var x) { return sum(tanh(x)); });
  const Matrix g2 = grad_of([](Var x) { return sum(square(x)); });
  const Matrix g12 = grad_of([](Var x) { return add(sum(tanh(x)), sum(square(x))); });
  CHECK((g12 - (g1 + g2)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("constants receive no pullback and backward needs a scalar") {
  Tape t;
  const Var c = t.constant(mat({{1, 2}}));
  CHECK_FALSE(t.requires_grad(square(c)));
  const Var x = t.variable(mat({{1, 2}}));
  CHECK_THROWS_AS(t.backward(square(x)), ShapeError);
}
