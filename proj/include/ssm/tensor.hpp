#pragma once

// Reverse-mode automatic differentiation over dense float64 tensors of rank
// 0, 1 or 2. Every backward rule is expressed with the same primitives as the
// forward pass, so a gradient computed with create_graph set is itself
// recorded on the tape and can be differentiated again.

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <deque>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssm {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Raised when operand shapes do not conform for a primitive.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace ad {

/// Dimension sizes of a tensor. Rank-1 tensors are stored as a column.
struct Shape {
  int rank = 0;
  Index rows = 1;
  Index cols = 1;

  static Shape scalar() { return {0, 1, 1}; }
  static Shape vector(Index n) { return {1, n, 1}; }
  static Shape matrix(Index r, Index c) { return {2, r, c}; }

  Index size() const { return rows * cols; }
  std::vector<Index> dims() const;
  std::string str() const;

  bool operator==(const Shape&) const = default;
};

using NodeId = std::uint32_t;

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Neg,
  Scale,
  MatMul,
  MatVec,
  Outer,
  Transpose,
  Dot,
  Sum,
  SumAxis0,
  SumAxis1,
  ExpandAxis0,
  ExpandAxis1,
  Broadcast,
  Square,
  Exp,
  Log,
  Tanh,
  Softplus,
  Sigmoid,
  Reciprocal,
  Slice,
  Pad,
  Reshape,
  Gather,
  Scatter,
};

const char* op_name(Op op);

class Tape;
struct OpRecorder;

/// Handle to a tensor recorded on a Tape (the DiffTensor of this library).
/// Cheap to copy; the tape owns the storage.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  NodeId id() const { return id_; }

  const Matrix& value() const;
  const Shape& shape() const;
  bool requires_grad() const;

  /// Value of a rank-0 tensor.
  double item() const;
  /// Copy of a rank-0/1 tensor as a column vector.
  Vector vector() const;

 private:
  friend class Tape;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Append-only record of primitive operations. A tape and its tensors belong
/// to one thread at a time.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Matrix value, Shape shape);
  Var leaf(const Vector& value);
  Var leaf_matrix(const Matrix& value);
  Var leaf_scalar(double value);

  /// Non-differentiable input (data, projections, masks).
  Var constant(Matrix value, Shape shape);
  Var constant(const Vector& value);
  Var constant_matrix(const Matrix& value);
  Var constant_scalar(double value);

  /// Gradient of a scalar output with respect to each tensor in `wrt`.
  /// Unreachable tensors get exact zeros. With create_graph the results are
  /// recorded so they can be differentiated again; otherwise they are
  /// returned as constants and the intermediate adjoint nodes are dropped.
  /// Each call counts as one backward pass.
  std::vector<Var> grad(const Var& output, std::span<const Var> wrt,
                        bool create_graph = false);
  Var grad(const Var& output, const Var& wrt, bool create_graph = false);

  std::size_t backward_passes() const { return backward_passes_; }
  void reset_backward_passes() { backward_passes_ = 0; }

  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return recording_; }

 private:
  friend class Var;
  friend struct OpRecorder;
  friend class RecordingGuard;

  struct Node {
    Op op = Op::Constant;
    Shape shape;
    Matrix value;
    NodeId in0 = kNone;
    NodeId in1 = kNone;
    bool requires_grad = false;
    double scalar = 0.0;
    Index aux0 = 0;
    Index aux1 = 0;
    std::shared_ptr<const std::vector<Index>> index;
  };
  static constexpr NodeId kNone = ~NodeId{0};

  Var push(Node node);
  const Node& node(NodeId id) const { return nodes_[id]; }
  void backward_rule(NodeId id, const Var& g, std::vector<Var>& adjoint,
                     NodeId lo, const std::vector<char>& relevant);

  std::deque<Node> nodes_;
  std::size_t backward_passes_ = 0;
  bool recording_ = true;
};

/// Disables graph recording for its lifetime; operations then yield constants.
class RecordingGuard {
 public:
  RecordingGuard(Tape& tape, bool recording)
      : tape_(tape), saved_(tape.recording_) {
    tape_.recording_ = recording;
  }
  ~RecordingGuard() { tape_.recording_ = saved_; }
  RecordingGuard(const RecordingGuard&) = delete;
  RecordingGuard& operator=(const RecordingGuard&) = delete;

 private:
  Tape& tape_;
  bool saved_;
};

// Elementwise binary primitives. Operands must have equal shapes, or one is a
// scalar, or a rank-1 operand of length c pairs with a rank-2 [r, c] operand
// (broadcast along rows).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);

Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);

Var matmul(const Var& a, const Var& b);  // [r,k] x [k,c] -> [r,c]
Var matvec(const Var& a, const Var& x);  // [r,k] x [k] -> [r]
Var outer(const Var& a, const Var& b);   // [r], [c] -> [r,c]
Var transpose(const Var& a);
Var dot(const Var& a, const Var& b);     // [n], [n] -> []

Var sum(const Var& a);
Var sum_axis0(const Var& a);                 // [r,c] -> [c]
Var sum_axis1(const Var& a);                 // [r,c] -> [r]
Var expand_axis0(const Var& v, Index rows);  // [c] -> [rows,c]
Var expand_axis1(const Var& v, Index cols);  // [r] -> [r,cols]
Var broadcast(const Var& s, Shape shape);    // [] -> shape

Var square(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var softplus(const Var& a);
Var sigmoid(const Var& a);
Var reciprocal(const Var& a);

Var slice(const Var& v, Index offset, Index length);  // [n] -> [length]
Var pad(const Var& v, Index offset, Index size);      // [length] -> [size]
Var reshape(const Var& a, Shape shape);               // column-major order

/// Flat (column-major) positions used by gather and scatter.
using IndexList = std::shared_ptr<const std::vector<Index>>;
IndexList make_index_list(std::vector<Index> positions);
/// out[i] = a.flat[index[i]]; any shape -> [k].
Var gather(const Var& a, IndexList index);
/// Zero tensor of `shape` with out.flat[index[i]] = v[i]. Positions must be
/// distinct. [k] -> shape.
Var scatter(const Var& v, IndexList index, Shape shape);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }
inline Var operator+(double c, const Var& a) { return add_scalar(a, c); }
inline Var operator-(const Var& a, double c) { return add_scalar(a, -c); }

}  // namespace ad
}  // namespace ssm
