#include "ssm/derivatives.hpp"

namespace ssm::ad {

namespace {

Var checked_scalar(const ScalarFn& f, const Var& x) {
  Var y = f(x);
  if (!y.valid() || y.shape().rank != 0) {
    throw ShapeError("scalar function must return a rank-0 tensor");
  }
  return y;
}

// Hessian-vector product given an already differentiable gradient.
Vector hvp_from_gradient(Tape& tape, const Var& g, const Var& x,
                         const Vector& v) {
  const Var direction = tape.constant(v);
  return tape.grad(dot(g, direction), x).vector();
}

}  // namespace

Vector gradient(Tape& tape, const ScalarFn& f, const Vector& x) {
  const Var xv = tape.leaf(x);
  return tape.grad(checked_scalar(f, xv), xv).vector();
}

Vector hvp(Tape& tape, const ScalarFn& f, const Vector& x, const Vector& v) {
  if (v.size() != x.size()) {
    throw ShapeError("hvp: direction " +
                     Shape::vector(v.size()).str() + " does not match point " +
                     Shape::vector(x.size()).str());
  }
  const Var xv = tape.leaf(x);
  const Var g = tape.grad(checked_scalar(f, xv), xv, /*create_graph=*/true);
  return hvp_from_gradient(tape, g, xv, v);
}

Vector hvp(const ScalarFn& f, const Vector& x, const Vector& v) {
  Tape tape;
  return hvp(tape, f, x, v);
}

Vector hessian_diagonal(Tape& tape, const ScalarFn& f, const Vector& x) {
  const Var xv = tape.leaf(x);
  const Var g = tape.grad(checked_scalar(f, xv), xv, /*create_graph=*/true);
  Vector diag(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    diag(i) = hvp_from_gradient(tape, g, xv, Vector::Unit(x.size(), i))(i);
  }
  return diag;
}

Vector hessian_diagonal(const ScalarFn& f, const Vector& x) {
  Tape tape;
  return hessian_diagonal(tape, f, x);
}

Var directional_jacobian(const Var& field, const Var& x, const Var& v,
                         bool create_graph) {
  if (field.shape() != x.shape() || v.shape() != x.shape()) {
    throw ShapeError("directional_jacobian: field " + field.shape().str() +
                     ", point " + x.shape().str() + ", direction " +
                     v.shape().str() + " must agree");
  }
  return x.tape().grad(sum(mul(field, v)), x, create_graph);
}

Var jacobian_diagonal(const Var& field, const Var& x, bool create_graph) {
  if (field.shape() != x.shape() || x.shape().rank != 2) {
    throw ShapeError("jacobian_diagonal: field " + field.shape().str() +
                     " and point " + x.shape().str() + " must be equal [N,D]");
  }
  Tape& tape = x.tape();
  const Index n = x.shape().rows;
  const Index d = x.shape().cols;
  Var diag;
  for (Index k = 0; k < d; ++k) {
    Matrix mask = Matrix::Zero(n, d);
    mask.col(k).setOnes();
    const Var e = tape.constant_matrix(mask);
    const Var column = mul(tape.grad(sum(mul(field, e)), x, create_graph), e);
    diag = diag.valid() ? add(diag, column) : column;
  }
  return diag;
}

}  // namespace ssm::ad
