#pragma once

// Second-order quantities built from repeated gradient calls.

#include <functional>

#include "ssm/tensor.hpp"

namespace ssm::ad {

/// Scalar function of a single point x in R^D, expressed on a tape.
using ScalarFn = std::function<Var(const Var& x)>;

/// Gradient of f at x. One backward pass.
Vector gradient(Tape& tape, const ScalarFn& f, const Vector& x);

/// Hessian of f at x applied to v, computed as grad(v . grad(f, x), x).
/// Exactly two backward passes on `tape`.
Vector hvp(Tape& tape, const ScalarFn& f, const Vector& x, const Vector& v);
Vector hvp(const ScalarFn& f, const Vector& x, const Vector& v);

/// Diagonal of the Hessian of f at x: one pass for the gradient, then one
/// per coordinate (D + 1 passes in total).
Vector hessian_diagonal(Tape& tape, const ScalarFn& f, const Vector& x);
Vector hessian_diagonal(const ScalarFn& f, const Vector& x);

/// Row-wise directional Jacobian of a batched vector field.
/// `field` is [N, D] and depends on `x` ([N, D]) row by row; `v` is [N, D].
/// Row i of the result is grad_x (v_i . field_i)(x_i). One backward pass.
Var directional_jacobian(const Var& field, const Var& x, const Var& v,
                         bool create_graph);

/// Row-wise Jacobian diagonal d field_i[d] / d x_i[d] of a batched field,
/// returned as [N, D]. One backward pass per coordinate.
Var jacobian_diagonal(const Var& field, const Var& x, bool create_graph);

}  // namespace ssm::ad
