#pragma once

// Reverse-mode automatic differentiation over dense 2-D arrays.
//
// A Tape records primitive operations in topological order. Values are
// Eigen matrices (rows = batch, cols = features). Binary elementwise ops
// broadcast any extent equal to 1. Two backward paths exist:
//
//   Tape::backward  numeric adjoints, fast, first order.
//   Tape::grad      adjoints recorded as new tape nodes, so the result can
//                   itself be differentiated (used for normals and the
//                   Eikonal term).

#include <Eigen/Core>

#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace shadowray::ad {

using Matrix = Eigen::MatrixXd;

enum class Op {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,
  MatMul,
  Affine,
  Transpose,
  Exp,
  Log,
  Sqrt,
  Sin,
  Cos,
  Sigmoid,
  Softplus,
  Relu,
  Step,
  Sign,
  Abs,
  Max,
  Min,
  SumAll,
  SumRows,
  SumCols,
  Broadcast,
  ConcatCols,
  SliceCols,
  GatherRows,
  ScatterAddRows,
};

const char* op_name(Op op);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  [[nodiscard]] Tape& tape() const { return *tape_; }
  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr && id_ >= 0; }
  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] bool requires_grad() const;
  /// Value of a 1x1 var.
  [[nodiscard]] double scalar() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

using Index = std::vector<int>;

/// Per-node constants: beta/scale, slice bounds, row indices.
struct NodeAttr {
  double scalar = 0.0;
  Eigen::Index i0 = 0;
  Eigen::Index i1 = 0;
  std::shared_ptr<const Index> index;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that receives gradients.
  Var variable(Matrix value);
  /// Leaf excluded from differentiation.
  Var constant(Matrix value);
  Var constant(double value);

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  [[nodiscard]] const Matrix& value(int id) const { return nodes_.at(id).value; }
  [[nodiscard]] bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  [[nodiscard]] Op op(int id) const { return nodes_.at(id).op; }
  [[nodiscard]] const std::vector<int>& inputs(int id) const { return nodes_.at(id).inputs; }

  /// Numeric reverse sweep. Returns d(loss)/d(wrt[k]) for each k; loss must be 1x1.
  std::vector<Matrix> backward(Var loss, std::span<const Var> wrt);

  /// Reverse sweep that records the adjoint computation on this tape.
  /// Entries of wrt that do not influence y get a zero constant.
  std::vector<Var> grad(Var y, std::span<const Var> wrt);

  using Attr = NodeAttr;
  // Low-level node creation used by the op functions below.
  Var push(Op op, std::vector<int> inputs, Matrix value, Attr attr = {});
  [[nodiscard]] const Attr& attr(int id) const { return nodes_.at(id).attr; }

 private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<int> inputs;
    Matrix value;
    Attr attr;
    bool requires_grad = false;
  };

  void numeric_vjp(int id, const Matrix& g, std::vector<Matrix>& adj, std::vector<char>& has);
  void symbolic_vjp(int id, Var g, std::vector<Var>& adj);

  std::deque<Node> nodes_;
};

// ---- primitives --------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var matmul(Var a, Var b);
/// x * w + b with b a 1 x out row broadcast over the batch.
Var affine(Var x, Var w, Var b);
Var transpose(Var a);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var sin(Var a);
Var cos(Var a);
/// 1 / (1 + exp(-beta x))
Var sigmoid(Var a, double beta = 1.0);
/// (1 / beta) log(1 + exp(beta x))
Var softplus(Var a, double beta = 1.0);
Var relu(Var a);
/// Heaviside step, no gradient. inclusive selects x >= 0 over x > 0.
Var step(Var a, bool inclusive = false);
Var sign(Var a);
Var abs(Var a);
/// Ties send the gradient to the first argument.
Var maximum(Var a, Var b);
/// Ties send the gradient to the first argument.
Var minimum(Var a, Var b);
Var sum(Var a);
/// Column sums, shape 1 x cols.
Var sum_rows(Var a);
/// Row sums, shape rows x 1.
Var sum_cols(Var a);
Var broadcast_to(Var a, Eigen::Index rows, Eigen::Index cols);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var gather_rows(Var a, std::shared_ptr<const Index> index);
Var scatter_add_rows(Var a, std::shared_ptr<const Index> index, Eigen::Index rows);

// ---- conveniences built from primitives ---------------------------------

Var stop_gradient(Var a);
Var square(Var a);
Var mean(Var a);
/// Row-wise dot product of two n x k arrays, shape n x 1.
Var dot_rows(Var a, Var b);
/// Row-wise Euclidean norm, shape n x 1. eps is added under the root.
Var norm_rows(Var a, double eps = 0.0);
/// Sum or broadcast a gradient-like var back to the given shape.
Var reduce_to(Var a, Eigen::Index rows, Eigen::Index cols);

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, double b);
Var operator+(double a, Var b);
Var operator-(Var a, double b);
Var operator-(double a, Var b);
Var operator*(Var a, double b);
Var operator*(double a, Var b);
Var operator/(Var a, double b);

// ---- numeric helpers ------------------------------------------------------

double softplus_value(double x, double beta);
double sigmoid_value(double x, double beta);
Matrix softplus_array(const Matrix& x, double beta);
Matrix sigmoid_array(const Matrix& x, double beta);

/// Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12).
/// f evaluates the scalar function at a parameter vector, grad its gradient.
double finite_difference_check(const std::function<double(const Eigen::VectorXd&)>& f,
                               const Eigen::VectorXd& analytic_gradient,
                               const Eigen::VectorXd& theta, double h);

}  // namespace shadowray::ad
