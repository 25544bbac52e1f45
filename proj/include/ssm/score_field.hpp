#pragma once

// ScoreField: a vector field s(x; theta) queried through its value and its
// directional Jacobian grad_x(v . s)(x). Model scores grad_x log p(x; theta)
// and learned score networks h(x; theta) share this interface.

#include <functional>
#include <string>

#include "ssm/models.hpp"

namespace ssm {

/// A score field evaluated on one batch on one tape.
class BoundScore {
 public:
  using DirectionalFn = std::function<Var(const Var& v)>;
  using DiagonalFn = std::function<Var()>;

  BoundScore(Var x, Var value, DirectionalFn analytic_directional = {},
             DiagonalFn analytic_diagonal = {});

  const Var& x() const { return x_; }
  /// [N, D] score values.
  const Var& value() const { return value_; }

  /// Row i: grad_x (v_i . s)(x_i). One backward pass unless an analytic
  /// Jacobian is available.
  Var directional_jacobian(const Var& v, bool create_graph = true) const;
  /// Row i: diagonal of grad_x s(x_i). D backward passes unless analytic.
  Var jacobian_diagonal(bool create_graph = true) const;

  bool analytic() const { return static_cast<bool>(analytic_directional_); }

 private:
  Var x_;
  Var value_;
  DirectionalFn analytic_directional_;
  DiagonalFn analytic_diagonal_;
};

class ScoreField {
 public:
  /// Build the score on batch x ([N, D] leaf) with parameters theta ([P]).
  using Binder = std::function<BoundScore(const Var& x, const Var& theta)>;

  ScoreField(std::string kind, Index dim, Vector theta, Binder binder,
             bool gradient_field);

  const std::string& kind() const { return kind_; }
  Index dim() const { return dim_; }
  const Vector& parameters() const { return theta_; }
  ScoreField with_parameters(Vector theta) const;
  /// True when s is the x-gradient of a scalar, so its Jacobian is symmetric.
  bool is_gradient_field() const { return gradient_field_; }

  BoundScore bind(const Var& x, const Var& theta) const;

  Matrix value(const Matrix& x) const;
  Matrix directional_jacobian(const Matrix& x, const Matrix& v) const;

 private:
  std::string kind_;
  Index dim_;
  Vector theta_;
  Binder binder_;
  bool gradient_field_;
};

/// Log-density of a batch ([N, D] -> [N]) given parameters.
using LogDensityFn = std::function<Var(const Var& x, const Var& theta)>;

/// Score of an unnormalized model via grad(log p, x) (one backward pass per
/// bind; Jacobian queries go through double backpropagation).
ScoreField energy_score_field(std::string kind, Index dim, Vector theta,
                              LogDensityFn log_density);

enum class ScoreMode { analytic, autodiff };

ScoreField score_field(const GaussianModel& model,
                       ScoreMode mode = ScoreMode::analytic);
ScoreField score_field(const KefModel& model);
ScoreField score_field(const MlpEnergy& model);
ScoreField score_field(const ScoreNetwork& network);

/// Vector field with no parameters (oracle data scores).
using VectorFieldFn = std::function<Matrix(const Matrix& x)>;

}  // namespace ssm
