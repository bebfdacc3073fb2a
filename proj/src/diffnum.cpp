#include "sdhn/diffnum.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace sdhn::diffnum {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

const Matrix& Var::value() const { return tape_->value(*this); }
const Matrix& Var::grad() const { return tape_->grad(*this); }

Var Tape::variable(Matrix value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Pullback pullback) {
  Node node;
  node.value = std::move(value);
  for (const Var& in : inputs) {
    if (in.tape_ != this) throw std::logic_error("diffnum: operands recorded on different tapes");
    node.requires_grad = node.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (node.requires_grad) node.pullback = std::move(pullback);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Matrix& Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id_);
  if (!n.has_grad) {
    // Untouched nodes report a zero gradient of the right shape.
    auto& mut = const_cast<Node&>(n);
    mut.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    mut.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_[v.id_];
  if (!n.requires_grad) return;
  if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) {
    throw std::logic_error("diffnum: gradient shape " + shape_str(g) + " does not match value " +
                           shape_str(n.value));
  }
  if (n.has_grad) {
    n.grad += g;
  } else {
    n.grad = g;
    n.has_grad = true;
  }
}

void Tape::zero_grad() {
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
}

void Tape::backward(Var out) {
  const Matrix& v = value(out);
  if (v.rows() != 1 || v.cols() != 1) {
    throw ShapeError("backward requires a 1x1 output, got " + shape_str(v));
  }
  accumulate(out, Matrix::Ones(1, 1));
  for (std::size_t i = out.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.pullback) continue;
    n.pullback(*this, n.value, n.grad);
  }
}

namespace {

void require_same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("diffnum: operands recorded on different tapes");
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: " + shape_str(av) + " x " + shape_str(bv));
  }
  Matrix out = av * bv;
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix&, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

Var elementwise(Elementwise kind, Var x) {
  const Matrix& xv = x.value();
  if (!xv.allFinite()) throw DomainError("elementwise: non-finite input");
  Matrix out;
  switch (kind) {
    case Elementwise::sigmoid:
      out = xv.unaryExpr([](double v) { return sigmoid(v); });
      break;
    case Elementwise::relu:
      out = xv.cwiseMax(0.0);
      break;
    case Elementwise::tanh:
      out = xv.array().tanh().matrix();
      break;
    case Elementwise::log:
      if ((xv.array() <= 0.0).any()) throw DomainError("log of non-positive entry");
      out = xv.array().log().matrix();
      break;
    case Elementwise::exp:
      out = xv.array().exp().matrix();
      break;
    case Elementwise::square:
      out = xv.array().square().matrix();
      break;
    case Elementwise::negate:
      out = -xv;
      break;
  }
  return x.tape().record(std::move(out), {x}, [x, kind](Tape& t, const Matrix& y, const Matrix& g) {
    const Matrix& in = t.value(x);
    Matrix dx;
    switch (kind) {
      case Elementwise::sigmoid:
        dx = (g.array() * y.array() * (1.0 - y.array())).matrix();
        break;
      case Elementwise::relu:
        dx = (g.array() * (in.array() > 0.0).cast<double>()).matrix();
        break;
      case Elementwise::tanh:
        dx = (g.array() * (1.0 - y.array().square())).matrix();
        break;
      case Elementwise::log:
        dx = (g.array() / in.array()).matrix();
        break;
      case Elementwise::exp:
        dx = (g.array() * y.array()).matrix();
        break;
      case Elementwise::square:
        dx = (2.0 * g.array() * in.array()).matrix();
        break;
      case Elementwise::negate:
        dx = -g;
        break;
    }
    t.accumulate(x, dx);
  });
}

Var sigmoid(Var x) { return elementwise(Elementwise::sigmoid, x); }
Var relu(Var x) { return elementwise(Elementwise::relu, x); }
Var tanh(Var x) { return elementwise(Elementwise::tanh, x); }
Var log(Var x) { return elementwise(Elementwise::log, x); }
Var exp(Var x) { return elementwise(Elementwise::exp, x); }
Var square(Var x) { return elementwise(Elementwise::square, x); }
Var negate(Var x) { return elementwise(Elementwise::negate, x); }

Var reduce(Reduction kind, Var x, Axis axis) {
  const Matrix& xv = x.value();
  if (xv.size() == 0) throw ShapeError("reduce: empty input");
  Matrix out;
  double count = 0;
  switch (axis) {
    case Axis::rows:
      out = xv.colwise().sum();
      count = static_cast<double>(xv.rows());
      break;
    case Axis::cols:
      out = xv.rowwise().sum();
      count = static_cast<double>(xv.cols());
      break;
    case Axis::all:
      out = Matrix::Constant(1, 1, xv.sum());
      count = static_cast<double>(xv.size());
      break;
  }
  const double factor = kind == Reduction::mean ? 1.0 / count : 1.0;
  out *= factor;
  const Eigen::Index r = xv.rows();
  const Eigen::Index c = xv.cols();
  return x.tape().record(std::move(out), {x}, [x, axis, factor, r, c](Tape& t, const Matrix&, const Matrix& g) {
    Matrix dx(r, c);
    switch (axis) {
      case Axis::rows:
        dx = g.replicate(r, 1);
        break;
      case Axis::cols:
        dx = g.replicate(1, c);
        break;
      case Axis::all:
        dx.setConstant(g(0, 0));
        break;
    }
    t.accumulate(x, dx * factor);
  });
}

Var sum(Var x) { return reduce(Reduction::sum, x, Axis::all); }
Var mean(Var x) { return reduce(Reduction::mean, x, Axis::all); }

Var add(Var a, Var b) {
  require_same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  Matrix out;
  enum class Mode { same, row, col } mode;
  if (av.rows() == bv.rows() && av.cols() == bv.cols()) {
    mode = Mode::same;
    out = av + bv;
  } else if (bv.rows() == 1 && bv.cols() == av.cols()) {
    mode = Mode::row;
    out = av.rowwise() + bv.row(0);
  } else if (bv.cols() == 1 && bv.rows() == av.rows()) {
    mode = Mode::col;
    out = av.colwise() + bv.col(0);
  } else {
    throw ShapeError("add: cannot expand " + shape_str(bv) + " against " + shape_str(av));
  }
  return a.tape().record(std::move(out), {a, b}, [a, b, mode](Tape& t, const Matrix&, const Matrix& g) {
    t.accumulate(a, g);
    if (!t.requires_grad(b)) return;
    switch (mode) {
      case Mode::same:
        t.accumulate(b, g);
        break;
      case Mode::row:
        t.accumulate(b, g.colwise().sum());
        break;
      case Mode::col:
        t.accumulate(b, g.rowwise().sum());
        break;
    }
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value() - b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix&, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var hadamard(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "hadamard");
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix&, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
  });
}

Var scale(Var x, double s) {
  Matrix out = x.value() * s;
  return x.tape().record(std::move(out), {x}, [x, s](Tape& t, const Matrix&, const Matrix& g) {
    t.accumulate(x, g * s);
  });
}

Var add_scalar(Var x, double s) {
  Matrix out = x.value().array() + s;
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Matrix&, const Matrix& g) {
    t.accumulate(x, g);
  });
}

Var concat_cols(Var a, Var b) {
  require_same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows()) {
    throw ShapeError("concat_cols: " + shape_str(av) + " | " + shape_str(bv));
  }
  Matrix out(av.rows(), av.cols() + bv.cols());
  out << av, bv;
  const Eigen::Index ac = av.cols();
  const Eigen::Index bc = bv.cols();
  return a.tape().record(std::move(out), {a, b}, [a, b, ac, bc](Tape& t, const Matrix&, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.leftCols(ac));
    if (t.requires_grad(b)) t.accumulate(b, g.rightCols(bc));
  });
}

Var repeat_rows(Var x, Eigen::Index times) {
  if (times < 1) throw ShapeError("repeat_rows: times must be >= 1");
  const Matrix& xv = x.value();
  Matrix out(xv.rows() * times, xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    out.middleRows(r * times, times) = xv.row(r).replicate(times, 1);
  }
  return x.tape().record(std::move(out), {x}, [x, times](Tape& t, const Matrix&, const Matrix& g) {
    const Eigen::Index rows = g.rows() / times;
    Matrix dx(rows, g.cols());
    for (Eigen::Index r = 0; r < rows; ++r) dx.row(r) = g.middleRows(r * times, times).colwise().sum();
    t.accumulate(x, dx);
  });
}

Var log_softmax_rows(Var x) {
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double m = xv.row(r).maxCoeff();
    const double lse = m + std::log((xv.row(r).array() - m).exp().sum());
    out.row(r) = xv.row(r).array() - lse;
  }
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Matrix& y, const Matrix& g) {
    // d/dx_j sum_k g_k (x_k - lse) = g_j - softmax_j * sum_k g_k
    const Matrix p = y.array().exp().matrix();
    Matrix dx = g - (p.array().colwise() * g.rowwise().sum().array()).matrix();
    t.accumulate(x, dx);
  });
}

Var pick(Var x, std::span<const int> index) {
  const Matrix& xv = x.value();
  if (static_cast<Eigen::Index>(index.size()) != xv.rows()) {
    throw ShapeError("pick: " + std::to_string(index.size()) + " indices for " + shape_str(xv));
  }
  Matrix out(xv.rows(), 1);
  std::vector<int> idx(index.begin(), index.end());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    if (idx[r] < 0 || idx[r] >= xv.cols()) throw ShapeError("pick: index out of range");
    out(r, 0) = xv(r, idx[r]);
  }
  const Eigen::Index cols = xv.cols();
  return x.tape().record(std::move(out), {x}, [x, idx = std::move(idx), cols](Tape& t, const Matrix&, const Matrix& g) {
    Matrix dx = Matrix::Zero(g.rows(), cols);
    for (Eigen::Index r = 0; r < g.rows(); ++r) dx(r, idx[r]) = g(r, 0);
    t.accumulate(x, dx);
  });
}

Var clamp(Var x, double lo, double hi) {
  Matrix out = x.value().cwiseMax(lo).cwiseMin(hi);
  return x.tape().record(std::move(out), {x}, [x, lo, hi](Tape& t, const Matrix&, const Matrix& g) {
    const auto& in = t.value(x).array();
    t.accumulate(x, (g.array() * ((in > lo) && (in < hi)).cast<double>()).matrix());
  });
}

Var minimum(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "minimum");
  Matrix out = a.value().cwiseMin(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix&, const Matrix& g) {
    const auto take_a = (t.value(a).array() <= t.value(b).array()).cast<double>();
    if (t.requires_grad(a)) t.accumulate(a, (g.array() * take_a).matrix());
    if (t.requires_grad(b)) t.accumulate(b, (g.array() * (1.0 - take_a)).matrix());
  });
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Matrix& x, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw DomainError("grad_check: eps outside [1e-7, 1e-3]");

  Tape tape;
  Var in = tape.variable(x);
  Var out = f(tape, in);
  if (out.rows() != 1 || out.cols() != 1) throw ShapeError("grad_check: f must be scalar-valued");
  tape.backward(out);
  const Matrix analytic = tape.grad(in);

  auto eval = [&](const Matrix& probe) {
    Tape t;
    const double v = f(t, t.variable(probe)).value()(0, 0);
    if (!std::isfinite(v)) throw DomainError("grad_check: non-finite f at probe point");
    return v;
  };

  double worst = 0.0;
  Matrix probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + eps;
    const double fp = eval(probe);
    probe.data()[i] = orig - eps;
    const double fm = eval(probe);
    probe.data()[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic.data()[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace sdhn::diffnum
