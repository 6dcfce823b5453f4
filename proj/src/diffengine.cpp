#include "shadowray/diffengine.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace shadowray::ad {

namespace {

#ifdef __GLIBC__
// Tape values are often a few hundred kB. Above glibc's default threshold
// every one of them is a fresh mmap that page-faults on first touch, which
// costs more than the arithmetic.
const bool kHeapTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

[[noreturn]] void shape_fail(Op op, const Matrix& a, const Matrix& b) {
  throw ShapeError(std::string("shape mismatch in ") + op_name(op) + ": " + shape_str(a) +
                   " vs " + shape_str(b));
}

Eigen::Index broadcast_dim(Op op, const Matrix& a, const Matrix& b, Eigen::Index da,
                           Eigen::Index db) {
  if (da == db) return da;
  if (da == 1) return db;
  if (db == 1) return da;
  shape_fail(op, a, b);
}

// Replicates a to rows x cols following the broadcasting rules.
Matrix expand(const Matrix& a, Eigen::Index rows, Eigen::Index cols) {
  if (a.rows() == rows && a.cols() == cols) return a;
  if (a.rows() == 1 && a.cols() == 1) return Matrix::Constant(rows, cols, a(0, 0));
  if (a.rows() == 1 && a.cols() == cols) return a.replicate(rows, 1);
  if (a.cols() == 1 && a.rows() == rows) return a.replicate(1, cols);
  throw ShapeError("cannot broadcast " + shape_str(a) + " to [" + std::to_string(rows) + "x" +
                   std::to_string(cols) + "]");
}

// Adjoint of expand: sums over the broadcast extents.
Matrix reduce(const Matrix& g, Eigen::Index rows, Eigen::Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
  if (rows == 1 && cols == g.cols()) return g.colwise().sum();
  if (cols == 1 && rows == g.rows()) return g.rowwise().sum();
  throw ShapeError("cannot reduce " + shape_str(g) + " to [" + std::to_string(rows) + "x" +
                   std::to_string(cols) + "]");
}

struct Binary {
  Eigen::Index rows, cols;
  Matrix a, b;
};

Binary prepare(Op op, Var x, Var y) {
  if (&x.tape() != &y.tape()) throw std::invalid_argument("operands live on different tapes");
  const Matrix& a = x.value();
  const Matrix& b = y.value();
  Binary out;
  out.rows = broadcast_dim(op, a, b, a.rows(), b.rows());
  out.cols = broadcast_dim(op, a, b, a.cols(), b.cols());
  out.a = expand(a, out.rows, out.cols);
  out.b = expand(b, out.rows, out.cols);
  return out;
}


void accumulate(std::vector<Matrix>& adj, std::vector<char>& has, int id, Matrix g) {
  if (has[id]) {
    adj[id] += g;
  } else {
    adj[id] = std::move(g);
    has[id] = 1;
  }
}

void accumulate(std::vector<Var>& adj, int id, Var g) {
  adj[id] = adj[id].valid() ? add(adj[id], g) : g;
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::MatMul: return "matmul";
    case Op::Affine: return "affine";
    case Op::Transpose: return "transpose";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sqrt: return "sqrt";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softplus: return "softplus";
    case Op::Relu: return "relu";
    case Op::Step: return "step";
    case Op::Sign: return "sign";
    case Op::Abs: return "abs";
    case Op::Max: return "max";
    case Op::Min: return "min";
    case Op::SumAll: return "sum";
    case Op::SumRows: return "sum_rows";
    case Op::SumCols: return "sum_cols";
    case Op::Broadcast: return "broadcast";
    case Op::ConcatCols: return "concat_cols";
    case Op::SliceCols: return "slice_cols";
    case Op::GatherRows: return "gather_rows";
    case Op::ScatterAddRows: return "scatter_add_rows";
  }
  return "?";
}

double softplus_value(double x, double beta) {
  const double z = beta * x;
  if (z > 30.0) return x;
  if (z < -30.0) return std::exp(z) / beta;
  return std::log1p(std::exp(z)) / beta;
}

double sigmoid_value(double x, double beta) {
  const double z = beta * x;
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Vectorised forms. log1p is not vectorised by Eigen, so log(1 + e) is used
// with a one-term correction for the rounding of 1 + e.
Matrix softplus_array(const Matrix& x, double beta) {
  const Eigen::ArrayXXd z = x.array() * beta;
  const Eigen::ArrayXXd e = (-z.abs()).exp();
  // log1p(e) with the rounding of 1 + e compensated
  return ((z.max(0.0) + (1.0 + e).log() - ((1.0 + e) - 1.0 - e) / (1.0 + e)) / beta).matrix();
}

Matrix sigmoid_array(const Matrix& x, double beta) {
  const Eigen::ArrayXXd z = x.array() * beta;
  const Eigen::ArrayXXd e = (-z.abs()).exp();
  return (z >= 0.0).select(1.0 / (1.0 + e), e / (1.0 + e)).matrix();
}

const Matrix& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }
double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1)
    throw ShapeError("scalar() on non-scalar var " + shape_str(v));
  return v(0, 0);
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{Op::Leaf, {}, std::move(value), {}, true});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{Op::Leaf, {}, std::move(value), {}, false});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::push(Op op, std::vector<int> inputs, Matrix value, Attr attr) {
  bool rg = false;
  if (op != Op::Step && op != Op::Sign) {
    for (int i : inputs) rg = rg || nodes_[i].requires_grad;
  }
  nodes_.push_back(Node{op, std::move(inputs), std::move(value), std::move(attr), rg});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

// ---- primitives -----------------------------------------------------------

Var add(Var a, Var b) {
  auto p = prepare(Op::Add, a, b);
  return a.tape().push(Op::Add, {a.id(), b.id()}, p.a + p.b);
}

Var sub(Var a, Var b) {
  auto p = prepare(Op::Sub, a, b);
  return a.tape().push(Op::Sub, {a.id(), b.id()}, p.a - p.b);
}

Var mul(Var a, Var b) {
  auto p = prepare(Op::Mul, a, b);
  return a.tape().push(Op::Mul, {a.id(), b.id()}, p.a.cwiseProduct(p.b));
}

Var div(Var a, Var b) {
  auto p = prepare(Op::Div, a, b);
  return a.tape().push(Op::Div, {a.id(), b.id()}, p.a.cwiseQuotient(p.b));
}

Var neg(Var a) { return a.tape().push(Op::Neg, {a.id()}, -a.value()); }

Var scale(Var a, double c) {
  Tape::Attr attr;
  attr.scalar = c;
  return a.tape().push(Op::Scale, {a.id()}, a.value() * c, attr);
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) shape_fail(Op::MatMul, a.value(), b.value());
  return a.tape().push(Op::MatMul, {a.id(), b.id()}, a.value() * b.value());
}

Var affine(Var x, Var w, Var b) {
  if (x.cols() != w.rows()) shape_fail(Op::Affine, x.value(), w.value());
  if (b.rows() != 1 || b.cols() != w.cols()) shape_fail(Op::Affine, w.value(), b.value());
  Matrix out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return x.tape().push(Op::Affine, {x.id(), w.id(), b.id()}, std::move(out));
}

Var transpose(Var a) { return a.tape().push(Op::Transpose, {a.id()}, a.value().transpose()); }

Var exp(Var a) { return a.tape().push(Op::Exp, {a.id()}, a.value().array().exp().matrix()); }

Var log(Var a) { return a.tape().push(Op::Log, {a.id()}, a.value().array().log().matrix()); }

Var sqrt(Var a) { return a.tape().push(Op::Sqrt, {a.id()}, a.value().array().sqrt().matrix()); }

Var sin(Var a) { return a.tape().push(Op::Sin, {a.id()}, a.value().array().sin().matrix()); }

Var cos(Var a) { return a.tape().push(Op::Cos, {a.id()}, a.value().array().cos().matrix()); }

Var sigmoid(Var a, double beta) {
  Tape::Attr attr;
  attr.scalar = beta;
  return a.tape().push(Op::Sigmoid, {a.id()}, sigmoid_array(a.value(), beta), attr);
}

Var softplus(Var a, double beta) {
  Tape::Attr attr;
  attr.scalar = beta;
  return a.tape().push(Op::Softplus, {a.id()}, softplus_array(a.value(), beta), attr);
}

Var relu(Var a) { return a.tape().push(Op::Relu, {a.id()}, a.value().cwiseMax(0.0)); }

Var step(Var a, bool inclusive) {
  Tape::Attr attr;
  attr.i0 = inclusive ? 1 : 0;
  Matrix v = a.value().unaryExpr(
      [inclusive](double x) { return (inclusive ? x >= 0.0 : x > 0.0) ? 1.0 : 0.0; });
  return a.tape().push(Op::Step, {a.id()}, std::move(v), attr);
}

Var sign(Var a) {
  Matrix v = a.value().unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
  return a.tape().push(Op::Sign, {a.id()}, std::move(v));
}

Var abs(Var a) { return a.tape().push(Op::Abs, {a.id()}, a.value().cwiseAbs()); }

Var maximum(Var a, Var b) {
  auto p = prepare(Op::Max, a, b);
  return a.tape().push(Op::Max, {a.id(), b.id()}, p.a.cwiseMax(p.b));
}

Var minimum(Var a, Var b) {
  auto p = prepare(Op::Min, a, b);
  return a.tape().push(Op::Min, {a.id(), b.id()}, p.a.cwiseMin(p.b));
}

Var sum(Var a) {
  return a.tape().push(Op::SumAll, {a.id()}, Matrix::Constant(1, 1, a.value().sum()));
}

Var sum_rows(Var a) { return a.tape().push(Op::SumRows, {a.id()}, a.value().colwise().sum()); }

Var sum_cols(Var a) { return a.tape().push(Op::SumCols, {a.id()}, a.value().rowwise().sum()); }

Var broadcast_to(Var a, Eigen::Index rows, Eigen::Index cols) {
  Tape::Attr attr;
  attr.i0 = rows;
  attr.i1 = cols;
  return a.tape().push(Op::Broadcast, {a.id()}, expand(a.value(), rows, cols), attr);
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of zero parts");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    if (p.rows() != rows) shape_fail(Op::ConcatCols, parts[0].value(), p.value());
    cols += p.cols();
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return parts[0].tape().push(Op::ConcatCols, std::move(ids), std::move(out));
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols())
    throw ShapeError("slice_cols [" + std::to_string(start) + ", +" + std::to_string(count) +
                     ") out of range for " + shape_str(a.value()));
  Tape::Attr attr;
  attr.i0 = start;
  attr.i1 = count;
  return a.tape().push(Op::SliceCols, {a.id()}, a.value().middleCols(start, count), attr);
}

Var gather_rows(Var a, std::shared_ptr<const Index> index) {
  const Matrix& v = a.value();
  Matrix out(static_cast<Eigen::Index>(index->size()), v.cols());
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const int src = (*index)[r];
    if (src < 0 || src >= v.rows())
      throw ShapeError("gather_rows index " + std::to_string(src) + " out of range for " +
                       shape_str(v));
    out.row(r) = v.row(src);
  }
  Tape::Attr attr;
  attr.index = std::move(index);
  return a.tape().push(Op::GatherRows, {a.id()}, std::move(out), attr);
}

Var scatter_add_rows(Var a, std::shared_ptr<const Index> index, Eigen::Index rows) {
  const Matrix& v = a.value();
  if (static_cast<Eigen::Index>(index->size()) != v.rows())
    throw ShapeError("scatter_add_rows index length " + std::to_string(index->size()) +
                     " does not match " + shape_str(v));
  Matrix out = Matrix::Zero(rows, v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const int dst = (*index)[r];
    if (dst < 0 || dst >= rows)
      throw ShapeError("scatter_add_rows target " + std::to_string(dst) + " out of range");
    out.row(dst) += v.row(r);
  }
  Tape::Attr attr;
  attr.i0 = rows;
  attr.index = std::move(index);
  return a.tape().push(Op::ScatterAddRows, {a.id()}, std::move(out), attr);
}

// ---- conveniences ---------------------------------------------------------

Var stop_gradient(Var a) { return a.tape().constant(a.value()); }
Var square(Var a) { return mul(a, a); }
Var mean(Var a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.rows() * a.cols()));
}
Var dot_rows(Var a, Var b) { return sum_cols(mul(a, b)); }
Var norm_rows(Var a, double eps) {
  Var sq = sum_cols(square(a));
  if (eps > 0.0) sq = sq + eps;
  return sqrt(sq);
}

Var reduce_to(Var a, Eigen::Index rows, Eigen::Index cols) {
  if (a.rows() == rows && a.cols() == cols) return a;
  if (rows == 1 && cols == 1) return sum(a);
  if (rows == 1 && cols == a.cols()) return sum_rows(a);
  if (cols == 1 && rows == a.rows()) return sum_cols(a);
  throw ShapeError("cannot reduce " + shape_str(a.value()) + " to [" + std::to_string(rows) +
                   "x" + std::to_string(cols) + "]");
}

Var operator+(Var a, Var b) { return add(a, b); }
Var operator-(Var a, Var b) { return sub(a, b); }
Var operator*(Var a, Var b) { return mul(a, b); }
Var operator/(Var a, Var b) { return div(a, b); }
Var operator-(Var a) { return neg(a); }
Var operator+(Var a, double b) { return add(a, a.tape().constant(b)); }
Var operator+(double a, Var b) { return add(b.tape().constant(a), b); }
Var operator-(Var a, double b) { return sub(a, a.tape().constant(b)); }
Var operator-(double a, Var b) { return sub(b.tape().constant(a), b); }
Var operator*(Var a, double b) { return scale(a, b); }
Var operator*(double a, Var b) { return scale(b, a); }
Var operator/(Var a, double b) { return scale(a, 1.0 / b); }

// ---- backward -----------------------------------------------------------

void Tape::numeric_vjp(int id, const Matrix& g, std::vector<Matrix>& adj, std::vector<char>& has) {
  const Node& n = nodes_[id];
  auto in = [&](int k) -> const Node& { return nodes_[n.inputs[k]]; };
  auto want = [&](int k) { return in(k).requires_grad; };
  auto give = [&](int k, Matrix m) { accumulate(adj, has, n.inputs[k], std::move(m)); };
  auto give_reduced = [&](int k, const Matrix& m) {
    give(k, reduce(m, in(k).value.rows(), in(k).value.cols()));
  };

  switch (n.op) {
    case Op::Leaf:
    case Op::Step:
    case Op::Sign:
      return;
    case Op::Add:
      if (want(0)) give_reduced(0, g);
      if (want(1)) give_reduced(1, g);
      return;
    case Op::Sub:
      if (want(0)) give_reduced(0, g);
      if (want(1)) give_reduced(1, -g);
      return;
    case Op::Mul: {
      if (want(0)) give_reduced(0, g.cwiseProduct(expand(in(1).value, g.rows(), g.cols())));
      if (want(1)) give_reduced(1, g.cwiseProduct(expand(in(0).value, g.rows(), g.cols())));
      return;
    }
    case Op::Div: {
      const Matrix b = expand(in(1).value, g.rows(), g.cols());
      if (want(0)) give_reduced(0, g.cwiseQuotient(b));
      if (want(1)) give_reduced(1, -g.cwiseProduct(n.value).cwiseQuotient(b));
      return;
    }
    case Op::Neg:
      give(0, -g);
      return;
    case Op::Scale:
      give(0, g * n.attr.scalar);
      return;
    case Op::MatMul:
      if (want(0)) give(0, g * in(1).value.transpose());
      if (want(1)) give(1, in(0).value.transpose() * g);
      return;
    case Op::Affine:
      if (want(0)) give(0, g * in(1).value.transpose());
      if (want(1)) give(1, in(0).value.transpose() * g);
      if (want(2)) give(2, g.colwise().sum());
      return;
    case Op::Transpose:
      give(0, g.transpose());
      return;
    case Op::Exp:
      give(0, g.cwiseProduct(n.value));
      return;
    case Op::Log:
      give(0, g.cwiseQuotient(in(0).value));
      return;
    case Op::Sqrt:
      give(0, (g.array() / (2.0 * n.value.array())).matrix());
      return;
    case Op::Sin:
      give(0, g.cwiseProduct(in(0).value.array().cos().matrix()));
      return;
    case Op::Cos:
      give(0, -g.cwiseProduct(in(0).value.array().sin().matrix()));
      return;
    case Op::Sigmoid: {
      const double beta = n.attr.scalar;
      give(0, (g.array() * beta * n.value.array() * (1.0 - n.value.array())).matrix());
      return;
    }
    case Op::Softplus:
      give(0, g.cwiseProduct(sigmoid_array(in(0).value, n.attr.scalar)));
      return;
    case Op::Relu:
      give(0, (g.array() * (in(0).value.array() > 0.0).cast<double>()).matrix());
      return;
    case Op::Abs:
      give(0, g.cwiseProduct(in(0).value.unaryExpr(
                  [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); })));
      return;
    case Op::Max:
    case Op::Min: {
      const Matrix a = expand(in(0).value, g.rows(), g.cols());
      const Matrix b = expand(in(1).value, g.rows(), g.cols());
      const Matrix first = n.op == Op::Max ? (a.array() >= b.array()).cast<double>().matrix()
                                           : (a.array() <= b.array()).cast<double>().matrix();
      if (want(0)) give_reduced(0, g.cwiseProduct(first));
      if (want(1)) give_reduced(1, (g.array() * (1.0 - first.array())).matrix());
      return;
    }
    case Op::SumAll:
      give(0, Matrix::Constant(in(0).value.rows(), in(0).value.cols(), g(0, 0)));
      return;
    case Op::SumRows:
      give(0, g.replicate(in(0).value.rows(), 1));
      return;
    case Op::SumCols:
      give(0, g.replicate(1, in(0).value.cols()));
      return;
    case Op::Broadcast:
      give_reduced(0, g);
      return;
    case Op::ConcatCols: {
      Eigen::Index c = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Eigen::Index w = in(static_cast<int>(k)).value.cols();
        if (want(static_cast<int>(k))) give(static_cast<int>(k), g.middleCols(c, w));
        c += w;
      }
      return;
    }
    case Op::SliceCols: {
      Matrix full = Matrix::Zero(in(0).value.rows(), in(0).value.cols());
      full.middleCols(n.attr.i0, n.attr.i1) = g;
      give(0, std::move(full));
      return;
    }
    case Op::GatherRows: {
      Matrix full = Matrix::Zero(in(0).value.rows(), in(0).value.cols());
      const Index& idx = *n.attr.index;
      for (Eigen::Index r = 0; r < g.rows(); ++r) full.row(idx[r]) += g.row(r);
      give(0, std::move(full));
      return;
    }
    case Op::ScatterAddRows: {
      const Index& idx = *n.attr.index;
      Matrix out(static_cast<Eigen::Index>(idx.size()), g.cols());
      for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) = g.row(idx[r]);
      give(0, std::move(out));
      return;
    }
  }
}

std::vector<Matrix> Tape::backward(Var loss, std::span<const Var> wrt) {
  if (&loss.tape() != this) throw std::invalid_argument("backward: loss is on another tape");
  const Matrix& lv = loss.value();
  if (lv.rows() != 1 || lv.cols() != 1)
    throw ShapeError("backward requires a scalar loss, got " + shape_str(lv));

  const int top = loss.id();
  std::vector<Matrix> adj(top + 1);
  std::vector<char> has(top + 1, 0);
  adj[top] = Matrix::Ones(1, 1);
  has[top] = 1;
  for (int id = top; id >= 0; --id) {
    if (!has[id] || !nodes_[id].requires_grad) continue;
    numeric_vjp(id, adj[id], adj, has);
    // Interior adjoints are no longer needed once propagated.
    if (nodes_[id].op != Op::Leaf && id != top) {
      bool keep = false;
      for (const Var& w : wrt) keep = keep || w.id() == id;
      if (!keep) adj[id] = Matrix();
    }
  }

  std::vector<Matrix> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.id() <= top && has[w.id()]) {
      out.push_back(adj[w.id()]);
    } else {
      out.push_back(Matrix::Zero(w.rows(), w.cols()));
    }
  }
  return out;
}

void Tape::symbolic_vjp(int id, Var g, std::vector<Var>& adj) {
  // Copy what we need: pushing nodes may touch the deque but never moves elements.
  const Op op = nodes_[id].op;
  const std::vector<int> ins = nodes_[id].inputs;
  const Attr attr = nodes_[id].attr;
  Var self(this, id);
  auto in = [&](int k) { return Var(this, ins[k]); };
  auto want = [&](int k) { return nodes_[ins[k]].requires_grad; };
  auto give = [&](int k, Var v) { accumulate(adj, ins[k], v); };
  auto give_reduced = [&](int k, Var v) { give(k, reduce_to(v, in(k).rows(), in(k).cols())); };

  switch (op) {
    case Op::Leaf:
    case Op::Step:
    case Op::Sign:
      return;
    case Op::Add:
      if (want(0)) give_reduced(0, g);
      if (want(1)) give_reduced(1, g);
      return;
    case Op::Sub:
      if (want(0)) give_reduced(0, g);
      if (want(1)) give_reduced(1, neg(g));
      return;
    case Op::Mul:
      if (want(0)) give_reduced(0, mul(g, in(1)));
      if (want(1)) give_reduced(1, mul(g, in(0)));
      return;
    case Op::Div:
      if (want(0)) give_reduced(0, div(g, in(1)));
      if (want(1)) give_reduced(1, neg(div(mul(g, self), in(1))));
      return;
    case Op::Neg:
      give(0, neg(g));
      return;
    case Op::Scale:
      give(0, scale(g, attr.scalar));
      return;
    case Op::MatMul:
      if (want(0)) give(0, matmul(g, transpose(in(1))));
      if (want(1)) give(1, matmul(transpose(in(0)), g));
      return;
    case Op::Affine:
      if (want(0)) give(0, matmul(g, transpose(in(1))));
      if (want(1)) give(1, matmul(transpose(in(0)), g));
      if (want(2)) give(2, sum_rows(g));
      return;
    case Op::Transpose:
      give(0, transpose(g));
      return;
    case Op::Exp:
      give(0, mul(g, self));
      return;
    case Op::Log:
      give(0, div(g, in(0)));
      return;
    case Op::Sqrt:
      give(0, div(g, scale(self, 2.0)));
      return;
    case Op::Sin:
      give(0, mul(g, cos(in(0))));
      return;
    case Op::Cos:
      give(0, neg(mul(g, sin(in(0)))));
      return;
    case Op::Sigmoid:
      give(0, mul(g, scale(mul(self, 1.0 - self), attr.scalar)));
      return;
    case Op::Softplus:
      give(0, mul(g, sigmoid(in(0), attr.scalar)));
      return;
    case Op::Relu:
      give(0, mul(g, step(in(0), false)));
      return;
    case Op::Abs:
      give(0, mul(g, sign(in(0))));
      return;
    case Op::Max:
    case Op::Min: {
      Var diff = op == Op::Max ? sub(in(0), in(1)) : sub(in(1), in(0));
      Var first = step(diff, true);
      if (want(0)) give_reduced(0, mul(g, first));
      if (want(1)) give_reduced(1, mul(g, 1.0 - first));
      return;
    }
    case Op::SumAll:
      give(0, broadcast_to(g, in(0).rows(), in(0).cols()));
      return;
    case Op::SumRows:
    case Op::SumCols:
      give(0, broadcast_to(g, in(0).rows(), in(0).cols()));
      return;
    case Op::Broadcast:
      give_reduced(0, g);
      return;
    case Op::ConcatCols: {
      Eigen::Index c = 0;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        const Eigen::Index w = in(static_cast<int>(k)).cols();
        if (want(static_cast<int>(k))) give(static_cast<int>(k), slice_cols(g, c, w));
        c += w;
      }
      return;
    }
    case Op::SliceCols: {
      const Eigen::Index total = in(0).cols();
      std::vector<Var> parts;
      if (attr.i0 > 0) parts.push_back(constant(Matrix::Zero(g.rows(), attr.i0)));
      parts.push_back(g);
      const Eigen::Index tail = total - attr.i0 - attr.i1;
      if (tail > 0) parts.push_back(constant(Matrix::Zero(g.rows(), tail)));
      give(0, parts.size() == 1 ? g : concat_cols(parts));
      return;
    }
    case Op::GatherRows:
      give(0, scatter_add_rows(g, attr.index, in(0).rows()));
      return;
    case Op::ScatterAddRows:
      give(0, gather_rows(g, attr.index));
      return;
  }
}

std::vector<Var> Tape::grad(Var y, std::span<const Var> wrt) {
  if (&y.tape() != this) throw std::invalid_argument("grad: output is on another tape");
  if (y.rows() != 1 || y.cols() != 1)
    throw ShapeError("grad requires a scalar output, got " + shape_str(y.value()));
  int lowest = y.id();
  for (const Var& w : wrt) lowest = std::min(lowest, w.id());

  const int top = y.id();
  std::vector<Var> adj(top + 1);
  adj[top] = constant(1.0);
  for (int id = top; id >= lowest; --id) {
    if (!adj[id].valid() || !nodes_[id].requires_grad) continue;
    if (nodes_[id].op == Op::Leaf) continue;
    symbolic_vjp(id, adj[id], adj);
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.id() <= top && adj[w.id()].valid()) {
      out.push_back(adj[w.id()]);
    } else {
      out.push_back(constant(Matrix::Zero(w.rows(), w.cols())));
    }
  }
  return out;
}

double finite_difference_check(const std::function<double(const Eigen::VectorXd&)>& f,
                               const Eigen::VectorXd& analytic_gradient,
                               const Eigen::VectorXd& theta, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_check: h must be positive");
  if (analytic_gradient.size() != theta.size())
    throw std::invalid_argument("finite_difference_check: gradient size mismatch");
  double worst = 0.0;
  Eigen::VectorXd probe = theta;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + h;
    const double fp = f(probe);
    probe[i] = theta[i] - h;
    const double fm = f(probe);
    probe[i] = theta[i];
    const double central = (fp - fm) / (2.0 * h);
    const double a = analytic_gradient[i];
    const double err = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace shadowray::ad
