#include "ssm/score_field.hpp"

#include <stdexcept>

#include "ssm/derivatives.hpp"

namespace ssm {

using ad::Shape;
using ad::Tape;

BoundScore::BoundScore(Var x, Var value, DirectionalFn analytic_directional,
                       DiagonalFn analytic_diagonal)
    : x_(x),
      value_(value),
      analytic_directional_(std::move(analytic_directional)),
      analytic_diagonal_(std::move(analytic_diagonal)) {
  if (value_.shape() != x_.shape()) {
    throw ShapeError("score field: value " + value_.shape().str() +
                     " does not match input " + x_.shape().str());
  }
}

Var BoundScore::directional_jacobian(const Var& v, bool create_graph) const {
  if (v.shape() != x_.shape()) {
    throw ShapeError("directional_jacobian: direction " + v.shape().str() +
                     " does not match input " + x_.shape().str());
  }
  if (analytic_directional_) return analytic_directional_(v);
  return ad::directional_jacobian(value_, x_, v, create_graph);
}

Var BoundScore::jacobian_diagonal(bool create_graph) const {
  if (analytic_diagonal_) return analytic_diagonal_();
  return ad::jacobian_diagonal(value_, x_, create_graph);
}

ScoreField::ScoreField(std::string kind, Index dim, Vector theta,
                       Binder binder, bool gradient_field)
    : kind_(std::move(kind)),
      dim_(dim),
      theta_(std::move(theta)),
      binder_(std::move(binder)),
      gradient_field_(gradient_field) {}

ScoreField ScoreField::with_parameters(Vector theta) const {
  if (theta.size() != theta_.size()) {
    throw ShapeError("score field: wrong parameter count");
  }
  ScoreField out = *this;
  out.theta_ = std::move(theta);
  return out;
}

BoundScore ScoreField::bind(const Var& x, const Var& theta) const {
  if (x.shape().rank != 2 || x.shape().cols != dim_) {
    throw ShapeError("score field: expected batch [N," + std::to_string(dim_) +
                     "], got " + x.shape().str());
  }
  return binder_(x, theta);
}

Matrix ScoreField::value(const Matrix& x) const {
  Tape tape;
  const Var xv = tape.leaf_matrix(x);
  return bind(xv, tape.constant(theta_)).value().value();
}

Matrix ScoreField::directional_jacobian(const Matrix& x,
                                        const Matrix& v) const {
  Tape tape;
  const Var xv = tape.leaf_matrix(x);
  const BoundScore s = bind(xv, tape.constant(theta_));
  return s.directional_jacobian(tape.constant_matrix(v), false).value();
}

ScoreField energy_score_field(std::string kind, Index dim, Vector theta,
                              LogDensityFn log_density) {
  auto binder = [log_density = std::move(log_density)](const Var& x,
                                                       const Var& theta) {
    const Var logp = log_density(x, theta);
    const Var s = x.tape().grad(ad::sum(logp), x, /*create_graph=*/true);
    return BoundScore(x, s);
  };
  return ScoreField(std::move(kind), dim, std::move(theta), std::move(binder),
                    true);
}

ScoreField score_field(const GaussianModel& model, ScoreMode mode) {
  if (mode == ScoreMode::autodiff) {
    return energy_score_field(
        "gaussian", model.dim(), model.parameters(),
        [model](const Var& x, const Var& theta) {
          return model.log_unnormalized_density(x, theta);
        });
  }
  auto binder = [model](const Var& x, const Var& theta) {
    const Var precision = model.precision(theta);
    const Var s = ad::matmul(ad::sub(model.mean(theta), x), precision);
    const Index n = x.shape().rows;
    const Index d = model.dim();
    auto directional = [precision](const Var& v) {
      return ad::neg(ad::matmul(v, precision));
    };
    auto diagonal = [precision, n, d]() {
      const Var eye = precision.tape().constant_matrix(Matrix::Identity(d, d));
      return ad::neg(ad::expand_axis0(ad::sum_axis0(ad::mul(precision, eye)), n));
    };
    return BoundScore(x, s, directional, diagonal);
  };
  return ScoreField("gaussian", model.dim(), model.parameters(),
                    std::move(binder), true);
}

ScoreField score_field(const KefModel& model) {
  return energy_score_field("kef", model.dim(), model.parameters(),
                            [model](const Var& x, const Var& theta) {
                              return model.log_unnormalized_density(x, theta);
                            });
}

ScoreField score_field(const MlpEnergy& model) {
  return energy_score_field("mlp_energy", model.dim(), model.parameters(),
                            [model](const Var& x, const Var& theta) {
                              return model.log_unnormalized_density(x, theta);
                            });
}

ScoreField score_field(const ScoreNetwork& network) {
  auto binder = [network](const Var& x, const Var& theta) {
    return BoundScore(x, network.forward(x, theta));
  };
  return ScoreField("score_network", network.dim(), network.parameters(),
                    std::move(binder), false);
}

}  // namespace ssm
