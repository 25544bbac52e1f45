#include "ssm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace ssm::ad {

std::vector<Index> Shape::dims() const {
  switch (rank) {
    case 0:
      return {};
    case 1:
      return {rows};
    default:
      return {rows, cols};
  }
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  const auto d = dims();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i) os << ',';
    os << d[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::MatMul: return "matmul";
    case Op::MatVec: return "matvec";
    case Op::Outer: return "outer";
    case Op::Transpose: return "transpose";
    case Op::Dot: return "dot";
    case Op::Sum: return "sum";
    case Op::SumAxis0: return "sum_axis0";
    case Op::SumAxis1: return "sum_axis1";
    case Op::ExpandAxis0: return "expand_axis0";
    case Op::ExpandAxis1: return "expand_axis1";
    case Op::Broadcast: return "broadcast";
    case Op::Square: return "square";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Tanh: return "tanh";
    case Op::Softplus: return "softplus";
    case Op::Sigmoid: return "sigmoid";
    case Op::Reciprocal: return "reciprocal";
    case Op::Slice: return "slice";
    case Op::Pad: return "pad";
    case Op::Reshape: return "reshape";
    case Op::Gather: return "gather";
    case Op::Scatter: return "scatter";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Var

const Matrix& Var::value() const { return tape_->node(id_).value; }
const Shape& Var::shape() const { return tape_->node(id_).shape; }
bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

double Var::item() const {
  if (shape().size() != 1) {
    throw ShapeError("item: expected a single element, got shape " +
                     shape().str());
  }
  return value()(0, 0);
}

Vector Var::vector() const {
  if (shape().rank == 2) {
    throw ShapeError("vector: expected rank 0 or 1, got shape " +
                     shape().str());
  }
  return value().col(0);
}

// ---------------------------------------------------------------------------
// Recording

struct OpRecorder {
  static Var record(const Var& a, Op op, Shape shape, Matrix value,
                    double scalar = 0.0, Index aux0 = 0, Index aux1 = 0,
                    IndexList index = nullptr) {
    Tape& t = a.tape();
    Tape::Node n;
    n.shape = shape;
    n.value = std::move(value);
    n.requires_grad = t.recording_ && a.requires_grad();
    if (n.requires_grad) {
      n.op = op;
      n.in0 = a.id();
      n.scalar = scalar;
      n.aux0 = aux0;
      n.aux1 = aux1;
      n.index = std::move(index);
    }
    return t.push(std::move(n));
  }

  static Var record(const Var& a, const Var& b, Op op, Shape shape,
                    Matrix value) {
    Tape& t = a.tape();
    Tape::Node n;
    n.shape = shape;
    n.value = std::move(value);
    n.requires_grad = t.recording_ && (a.requires_grad() || b.requires_grad());
    if (n.requires_grad) {
      n.op = op;
      n.in0 = a.id();
      n.in1 = b.id();
    }
    return t.push(std::move(n));
  }
};

namespace {

[[noreturn]] void shape_fail(const char* op, const Shape& a) {
  throw ShapeError(std::string(op) + ": unsupported shape " + a.str());
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.str() +
                   " and " + b.str());
}

void same_tape(const char* op, const Var& a, const Var& b) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw std::invalid_argument(std::string(op) +
                                ": operands belong to different tapes");
  }
}

void require_valid(const char* op, const Var& a) {
  if (!a.valid()) {
    throw std::invalid_argument(std::string(op) + ": empty tensor handle");
  }
}

// Shape of an elementwise binary result under the broadcasting rules.
Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return a;
  if (a.rank == 0) return b;
  if (b.rank == 0) return a;
  if (a.rank == 1 && b.rank == 2 && a.rows == b.cols) return b;
  if (b.rank == 1 && a.rank == 2 && b.rows == a.cols) return a;
  shape_fail(op, a, b);
}

Matrix expand_value(const Matrix& v, const Shape& from, const Shape& to) {
  if (from == to) return v;
  if (from.rank == 0) return Matrix::Constant(to.rows, to.cols, v(0, 0));
  return v.transpose().replicate(to.rows, 1);
}

// Sum a broadcast adjoint back down to the operand shape.
Var reduce_to(const Var& g, const Shape& target) {
  if (g.shape() == target) return g;
  if (target.rank == 0) return sum(g);
  return sum_axis0(g);
}

double softplus_value(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename F>
Var unary(const char* name, const Var& a, Op op, F f) {
  require_valid(name, a);
  return OpRecorder::record(a, op, a.shape(), a.value().unaryExpr(f));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

Var Tape::push(Node node) {
  if (nodes_.size() >= static_cast<std::size_t>(kNone)) {
    throw std::length_error("tape: node capacity exhausted");
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Var Tape::leaf(Matrix value, Shape shape) {
  if (value.rows() != shape.rows || value.cols() != shape.cols) {
    throw ShapeError("leaf: value dimensions do not match shape " +
                     shape.str());
  }
  Node n;
  n.op = Op::Leaf;
  n.shape = shape;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::leaf(const Vector& value) {
  return leaf(Matrix(value), Shape::vector(value.size()));
}

Var Tape::leaf_matrix(const Matrix& value) {
  return leaf(value, Shape::matrix(value.rows(), value.cols()));
}

Var Tape::leaf_scalar(double value) {
  return leaf(Matrix::Constant(1, 1, value), Shape::scalar());
}

Var Tape::constant(Matrix value, Shape shape) {
  if (value.rows() != shape.rows || value.cols() != shape.cols) {
    throw ShapeError("constant: value dimensions do not match shape " +
                     shape.str());
  }
  Node n;
  n.op = Op::Constant;
  n.shape = shape;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::constant(const Vector& value) {
  return constant(Matrix(value), Shape::vector(value.size()));
}

Var Tape::constant_matrix(const Matrix& value) {
  return constant(value, Shape::matrix(value.rows(), value.cols()));
}

Var Tape::constant_scalar(double value) {
  return constant(Matrix::Constant(1, 1, value), Shape::scalar());
}

Var Tape::grad(const Var& output, const Var& wrt, bool create_graph) {
  return grad(output, std::span<const Var>(&wrt, 1), create_graph)[0];
}

std::vector<Var> Tape::grad(const Var& output, std::span<const Var> wrt,
                            bool create_graph) {
  if (!output.valid() || &output.tape() != this) {
    throw std::invalid_argument("grad: output does not belong to this tape");
  }
  if (output.shape().rank != 0) {
    throw ShapeError("grad: output must be a scalar, got shape " +
                     output.shape().str());
  }
  for (const Var& w : wrt) {
    if (!w.valid() || &w.tape() != this) {
      throw std::invalid_argument("grad: wrt tensor does not belong to tape");
    }
  }
  ++backward_passes_;

  const std::size_t mark = nodes_.size();
  const NodeId hi = output.id();
  NodeId lo = hi;
  for (const Var& w : wrt) lo = std::min(lo, w.id());

  std::vector<Var> result(wrt.size());
  if (wrt.empty()) return result;

  // relevant[k]: node lo+k lies on a path from some wrt tensor.
  std::vector<char> relevant(hi >= lo ? hi - lo + 1 : 0, 0);
  for (const Var& w : wrt) {
    if (w.id() <= hi && node(w.id()).requires_grad) relevant[w.id() - lo] = 1;
  }
  for (NodeId id = lo; id <= hi && !relevant.empty(); ++id) {
    const Node& n = node(id);
    if (!n.requires_grad || relevant[id - lo]) continue;
    const bool r0 = n.in0 != kNone && n.in0 >= lo && relevant[n.in0 - lo];
    const bool r1 = n.in1 != kNone && n.in1 >= lo && relevant[n.in1 - lo];
    relevant[id - lo] = r0 || r1;
  }

  std::vector<Var> adjoint(relevant.size());
  {
    RecordingGuard guard(*this, create_graph);
    if (!relevant.empty() && relevant[hi - lo]) {
      adjoint[hi - lo] = constant_scalar(1.0);
      for (NodeId id = hi + 1; id-- > lo;) {
        const Var g = adjoint[id - lo];
        if (!g.valid() || !relevant[id - lo]) continue;
        if (node(id).op == Op::Leaf) continue;
        backward_rule(id, g, adjoint, lo, relevant);
      }
    }
  }

  std::vector<Matrix> values;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    const NodeId w = wrt[k].id();
    const bool reached = w <= hi && adjoint[w - lo].valid();
    if (create_graph && reached) {
      result[k] = adjoint[w - lo];
    } else if (reached) {
      values.push_back(adjoint[w - lo].value());
    } else {
      const Shape& s = node(w).shape;
      values.push_back(Matrix::Zero(s.rows, s.cols));
    }
  }
  if (!create_graph) {
    nodes_.resize(mark);
  }
  std::size_t next = 0;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    if (result[k].valid()) continue;
    result[k] = constant(std::move(values[next++]), node(wrt[k].id()).shape);
  }
  return result;
}

void Tape::backward_rule(NodeId id, const Var& g, std::vector<Var>& adjoint,
                         NodeId lo, const std::vector<char>& relevant) {
  const Node& n = node(id);
  const Var a = n.in0 != kNone ? Var(this, n.in0) : Var();
  const Var b = n.in1 != kNone ? Var(this, n.in1) : Var();
  const Var y(this, id);
  const bool need_a = a.valid() && a.id() >= lo && relevant[a.id() - lo];
  const bool need_b = b.valid() && b.id() >= lo && relevant[b.id() - lo];

  auto accumulate = [&](const Var& input, const Var& contribution) {
    Var& slot = adjoint[input.id() - lo];
    slot = slot.valid() ? add(slot, contribution) : contribution;
  };

  switch (n.op) {
    case Op::Leaf:
    case Op::Constant:
      return;
    case Op::Add:
      if (need_a) accumulate(a, reduce_to(g, a.shape()));
      if (need_b) accumulate(b, reduce_to(g, b.shape()));
      return;
    case Op::Sub:
      if (need_a) accumulate(a, reduce_to(g, a.shape()));
      if (need_b) accumulate(b, reduce_to(neg(g), b.shape()));
      return;
    case Op::Mul:
      if (need_a) accumulate(a, reduce_to(mul(g, b), a.shape()));
      if (need_b) accumulate(b, reduce_to(mul(g, a), b.shape()));
      return;
    case Op::Neg:
      if (need_a) accumulate(a, neg(g));
      return;
    case Op::Scale:
      if (need_a) accumulate(a, scale(g, n.scalar));
      return;
    case Op::MatMul:
      if (need_a) accumulate(a, matmul(g, transpose(b)));
      if (need_b) accumulate(b, matmul(transpose(a), g));
      return;
    case Op::MatVec:
      if (need_a) accumulate(a, outer(g, b));
      if (need_b) accumulate(b, matvec(transpose(a), g));
      return;
    case Op::Outer:
      if (need_a) accumulate(a, matvec(g, b));
      if (need_b) accumulate(b, matvec(transpose(g), a));
      return;
    case Op::Transpose:
      if (need_a) accumulate(a, transpose(g));
      return;
    case Op::Dot:
      if (need_a) accumulate(a, mul(g, b));
      if (need_b) accumulate(b, mul(g, a));
      return;
    case Op::Sum:
      if (need_a) accumulate(a, broadcast(g, a.shape()));
      return;
    case Op::SumAxis0:
      if (need_a) accumulate(a, expand_axis0(g, a.shape().rows));
      return;
    case Op::SumAxis1:
      if (need_a) accumulate(a, expand_axis1(g, a.shape().cols));
      return;
    case Op::ExpandAxis0:
      if (need_a) accumulate(a, sum_axis0(g));
      return;
    case Op::ExpandAxis1:
      if (need_a) accumulate(a, sum_axis1(g));
      return;
    case Op::Broadcast:
      if (need_a) accumulate(a, sum(g));
      return;
    case Op::Square:
      if (need_a) accumulate(a, mul(g, scale(a, 2.0)));
      return;
    case Op::Exp:
      if (need_a) accumulate(a, mul(g, y));
      return;
    case Op::Log:
      if (need_a) accumulate(a, mul(g, reciprocal(a)));
      return;
    case Op::Tanh:
      if (need_a) accumulate(a, sub(g, mul(g, square(y))));
      return;
    case Op::Softplus:
      if (need_a) accumulate(a, mul(g, sigmoid(a)));
      return;
    case Op::Sigmoid:
      if (need_a) accumulate(a, mul(g, sub(y, square(y))));
      return;
    case Op::Reciprocal:
      if (need_a) accumulate(a, neg(mul(g, square(y))));
      return;
    case Op::Slice:
      if (need_a) accumulate(a, pad(g, n.aux0, a.shape().rows));
      return;
    case Op::Pad:
      if (need_a) accumulate(a, slice(g, n.aux0, a.shape().rows));
      return;
    case Op::Reshape:
      if (need_a) accumulate(a, reshape(g, a.shape()));
      return;
    case Op::Gather:
      if (need_a) accumulate(a, scatter(g, n.index, a.shape()));
      return;
    case Op::Scatter:
      if (need_a) accumulate(a, gather(g, n.index));
      return;
  }
  throw std::logic_error("grad: unhandled primitive");
}

// ---------------------------------------------------------------------------
// Primitives

Var add(const Var& a, const Var& b) {
  same_tape("add", a, b);
  const Shape s = broadcast_shape("add", a.shape(), b.shape());
  Matrix v = expand_value(a.value(), a.shape(), s) +
             expand_value(b.value(), b.shape(), s);
  return OpRecorder::record(a, b, Op::Add, s, std::move(v));
}

Var sub(const Var& a, const Var& b) {
  same_tape("sub", a, b);
  const Shape s = broadcast_shape("sub", a.shape(), b.shape());
  Matrix v = expand_value(a.value(), a.shape(), s) -
             expand_value(b.value(), b.shape(), s);
  return OpRecorder::record(a, b, Op::Sub, s, std::move(v));
}

Var mul(const Var& a, const Var& b) {
  same_tape("mul", a, b);
  const Shape s = broadcast_shape("mul", a.shape(), b.shape());
  Matrix v = expand_value(a.value(), a.shape(), s)
                 .cwiseProduct(expand_value(b.value(), b.shape(), s));
  return OpRecorder::record(a, b, Op::Mul, s, std::move(v));
}

Var neg(const Var& a) {
  require_valid("neg", a);
  return OpRecorder::record(a, Op::Neg, a.shape(), -a.value());
}

Var scale(const Var& a, double c) {
  require_valid("scale", a);
  return OpRecorder::record(a, Op::Scale, a.shape(), c * a.value(), c);
}

Var add_scalar(const Var& a, double c) {
  require_valid("add_scalar", a);
  return add(a, a.tape().constant_scalar(c));
}

Var matmul(const Var& a, const Var& b) {
  same_tape("matmul", a, b);
  if (a.shape().rank != 2 || b.shape().rank != 2 ||
      a.shape().cols != b.shape().rows) {
    shape_fail("matmul", a.shape(), b.shape());
  }
  Matrix v = a.value() * b.value();
  return OpRecorder::record(a, b, Op::MatMul,
                            Shape::matrix(a.shape().rows, b.shape().cols),
                            std::move(v));
}

Var matvec(const Var& a, const Var& x) {
  same_tape("matvec", a, x);
  if (a.shape().rank != 2 || x.shape().rank != 1 ||
      a.shape().cols != x.shape().rows) {
    shape_fail("matvec", a.shape(), x.shape());
  }
  Matrix v = a.value() * x.value();
  return OpRecorder::record(a, x, Op::MatVec, Shape::vector(a.shape().rows),
                            std::move(v));
}

Var outer(const Var& a, const Var& b) {
  same_tape("outer", a, b);
  if (a.shape().rank != 1 || b.shape().rank != 1) {
    shape_fail("outer", a.shape(), b.shape());
  }
  Matrix v = a.value() * b.value().transpose();
  return OpRecorder::record(a, b, Op::Outer,
                            Shape::matrix(a.shape().rows, b.shape().rows),
                            std::move(v));
}

Var transpose(const Var& a) {
  require_valid("transpose", a);
  if (a.shape().rank != 2) shape_fail("transpose", a.shape());
  return OpRecorder::record(a, Op::Transpose,
                            Shape::matrix(a.shape().cols, a.shape().rows),
                            a.value().transpose());
}

Var dot(const Var& a, const Var& b) {
  same_tape("dot", a, b);
  if (a.shape().rank != 1 || b.shape() != a.shape()) {
    shape_fail("dot", a.shape(), b.shape());
  }
  Matrix v(1, 1);
  v(0, 0) = a.value().col(0).dot(b.value().col(0));
  return OpRecorder::record(a, b, Op::Dot, Shape::scalar(), std::move(v));
}

Var sum(const Var& a) {
  require_valid("sum", a);
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return OpRecorder::record(a, Op::Sum, Shape::scalar(), std::move(v));
}

Var sum_axis0(const Var& a) {
  require_valid("sum_axis0", a);
  if (a.shape().rank != 2) shape_fail("sum_axis0", a.shape());
  Matrix v = a.value().colwise().sum().transpose();
  return OpRecorder::record(a, Op::SumAxis0, Shape::vector(a.shape().cols),
                            std::move(v));
}

Var sum_axis1(const Var& a) {
  require_valid("sum_axis1", a);
  if (a.shape().rank != 2) shape_fail("sum_axis1", a.shape());
  Matrix v = a.value().rowwise().sum();
  return OpRecorder::record(a, Op::SumAxis1, Shape::vector(a.shape().rows),
                            std::move(v));
}

Var expand_axis0(const Var& v, Index rows) {
  require_valid("expand_axis0", v);
  if (v.shape().rank != 1 || rows < 1) shape_fail("expand_axis0", v.shape());
  return OpRecorder::record(v, Op::ExpandAxis0,
                            Shape::matrix(rows, v.shape().rows),
                            v.value().transpose().replicate(rows, 1));
}

Var expand_axis1(const Var& v, Index cols) {
  require_valid("expand_axis1", v);
  if (v.shape().rank != 1 || cols < 1) shape_fail("expand_axis1", v.shape());
  return OpRecorder::record(v, Op::ExpandAxis1,
                            Shape::matrix(v.shape().rows, cols),
                            v.value().replicate(1, cols));
}

Var broadcast(const Var& s, Shape shape) {
  require_valid("broadcast", s);
  if (s.shape().rank != 0) shape_fail("broadcast", s.shape(), shape);
  if (shape.rank == 0) return s;
  return OpRecorder::record(
      s, Op::Broadcast, shape,
      Matrix::Constant(shape.rows, shape.cols, s.value()(0, 0)));
}

Var square(const Var& a) {
  return unary("square", a, Op::Square, [](double x) { return x * x; });
}

Var exp(const Var& a) {
  return unary("exp", a, Op::Exp, [](double x) { return std::exp(x); });
}

Var log(const Var& a) {
  return unary("log", a, Op::Log, [](double x) { return std::log(x); });
}

Var tanh(const Var& a) {
  return unary("tanh", a, Op::Tanh, [](double x) { return std::tanh(x); });
}

Var softplus(const Var& a) {
  return unary("softplus", a, Op::Softplus, softplus_value);
}

Var sigmoid(const Var& a) {
  return unary("sigmoid", a, Op::Sigmoid, sigmoid_value);
}

Var reciprocal(const Var& a) {
  return unary("reciprocal", a, Op::Reciprocal,
               [](double x) { return 1.0 / x; });
}

Var slice(const Var& v, Index offset, Index length) {
  require_valid("slice", v);
  if (v.shape().rank != 1 || offset < 0 || length < 0 ||
      offset + length > v.shape().rows) {
    shape_fail("slice", v.shape());
  }
  return OpRecorder::record(v, Op::Slice, Shape::vector(length),
                            v.value().middleRows(offset, length), 0.0, offset);
}

Var pad(const Var& v, Index offset, Index size) {
  require_valid("pad", v);
  if (v.shape().rank != 1 || offset < 0 || offset + v.shape().rows > size) {
    shape_fail("pad", v.shape());
  }
  Matrix out = Matrix::Zero(size, 1);
  out.middleRows(offset, v.shape().rows) = v.value();
  return OpRecorder::record(v, Op::Pad, Shape::vector(size), std::move(out),
                            0.0, offset);
}

Var reshape(const Var& a, Shape shape) {
  require_valid("reshape", a);
  if (shape.size() != a.shape().size()) shape_fail("reshape", a.shape(), shape);
  if (shape == a.shape()) return a;
  Matrix v = a.value().reshaped(shape.rows, shape.cols);
  return OpRecorder::record(a, Op::Reshape, shape, std::move(v));
}

IndexList make_index_list(std::vector<Index> positions) {
  return std::make_shared<const std::vector<Index>>(std::move(positions));
}

Var gather(const Var& a, IndexList index) {
  require_valid("gather", a);
  if (!index) throw std::invalid_argument("gather: missing index list");
  const Index size = a.shape().size();
  const Index k = static_cast<Index>(index->size());
  Matrix out(k, 1);
  const auto flat = a.value().reshaped();
  for (Index i = 0; i < k; ++i) {
    const Index p = (*index)[static_cast<std::size_t>(i)];
    if (p < 0 || p >= size) shape_fail("gather", a.shape());
    out(i, 0) = flat(p);
  }
  return OpRecorder::record(a, Op::Gather, Shape::vector(k), std::move(out),
                            0.0, 0, 0, std::move(index));
}

Var scatter(const Var& v, IndexList index, Shape shape) {
  require_valid("scatter", v);
  if (!index) throw std::invalid_argument("scatter: missing index list");
  const Index k = static_cast<Index>(index->size());
  if (v.shape().rank != 1 || v.shape().rows != k) {
    shape_fail("scatter", v.shape(), shape);
  }
  Matrix out = Matrix::Zero(shape.rows, shape.cols);
  auto flat = out.reshaped();
  for (Index i = 0; i < k; ++i) {
    const Index p = (*index)[static_cast<std::size_t>(i)];
    if (p < 0 || p >= shape.size()) shape_fail("scatter", v.shape(), shape);
    flat(p) = v.value()(i, 0);
  }
  return OpRecorder::record(v, Op::Scatter, shape, std::move(out), 0.0, 0, 0,
                            std::move(index));
}

}  // namespace ssm::ad
