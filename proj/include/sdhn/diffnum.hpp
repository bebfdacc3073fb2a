#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace sdhn::diffnum {

/// Dense row-major real matrix. Every matrix-valued quantity in the library is one of these.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

std::string shape_str(const Matrix& m);

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records primitive operations so that a scalar result can be differentiated in one reverse pass.
///
/// Nodes are appended in evaluation order; backward() walks them in reverse and calls each node's
/// pullback with the accumulated output gradient. A tape is single-threaded and single-use per
/// backward pass (call zero_grad() to reuse recorded values for another pass).
class Tape {
 public:
  /// Pullback: receives the node's own value and d(loss)/d(output), and accumulates into the
  /// inputs through Tape::accumulate.
  using Pullback = std::function<void(Tape&, const Matrix& out, const Matrix& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input (parameters, probes).
  Var variable(Matrix value);
  /// Non-differentiable input; gradients into it are dropped.
  Var constant(Matrix value);

  /// Appends an operation result. `inputs` decides whether the node participates in backward.
  Var record(Matrix value, std::initializer_list<Var> inputs, Pullback pullback);

  void backward(Var scalar_output);
  void zero_grad();

  const Matrix& value(Var v) const { return nodes_.at(v.id_).value; }
  const Matrix& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id_).requires_grad; }

  /// Adds `g` into the gradient slot of `v` (no-op for constants).
  void accumulate(Var v, const Matrix& g);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Pullback pullback;
    bool requires_grad = false;
    bool has_grad = false;
  };

  std::vector<Node> nodes_;
};

enum class Elementwise { sigmoid, relu, tanh, log, exp, square, negate };
enum class Reduction { sum, mean };
/// `rows` collapses the row index (one result per column), `cols` collapses the column index
/// (one result per row), `all` collapses both.
enum class Axis { rows, cols, all };

// Plain (untaped) numerics used by both the taped ops and test oracles.
double sigmoid(double x);

// Taped primitives. All inputs must come from the same tape.
Var matmul(Var a, Var b);
Var elementwise(Elementwise kind, Var x);
Var reduce(Reduction kind, Var x, Axis axis);

Var sigmoid(Var x);
Var relu(Var x);
Var tanh(Var x);
Var log(Var x);
Var exp(Var x);
Var square(Var x);
Var negate(Var x);
Var sum(Var x);
Var mean(Var x);

/// a + b. b may also be a 1×cols row vector or rows×1 column vector, expanded against a.
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Entrywise product, same shapes only.
Var hadamard(Var a, Var b);
Var scale(Var x, double s);
Var add_scalar(Var x, double s);

/// [a | b]; a and b must have the same row count.
Var concat_cols(Var a, Var b);
/// Repeats every row `times` times consecutively: rows r → r·times.
Var repeat_rows(Var x, Eigen::Index times);

/// Row-wise log-softmax.
Var log_softmax_rows(Var x);
/// Column vector whose r-th entry is x(r, index[r]).
Var pick(Var x, std::span<const int> index);
/// Clamp entries to [lo, hi]; gradient passes only where lo < x < hi.
Var clamp(Var x, double lo, double hi);
/// Entrywise min; on ties the gradient goes to `a`.
Var minimum(Var a, Var b);

/// Max over entries of |tape - fd| / max(|tape|, |fd|, 1e-6), where fd is the central difference
/// (f(x+eps e) - f(x-eps e)) / (2 eps). `f` must build a 1×1 output on the tape it is given.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Matrix& x, double eps = 1e-6);

}  // namespace sdhn::diffnum
