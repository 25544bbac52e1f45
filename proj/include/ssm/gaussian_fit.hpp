#pragma once

// Exact minimizers of the score matching objectives over Gaussian families.
//
// In natural coordinates phi = (upper triangle of the precision, eta =
// precision * mean) the Gaussian score s(x) = -precision x + eta is linear in
// phi, so every objective is a quadratic b . phi + 1/2 phi^T G phi + c whose
// minimizer is -G^{-1} b. The argmin does not depend on how the model is
// parameterized, so this reproduces what gradient training converges to in
// any parameterization, at a fraction of the cost.

#include <cstdint>
#include <optional>

#include "ssm/objectives.hpp"

namespace ssm {

/// Gaussian model family. With a known mean only the precision is estimated.
struct GaussianFamily {
  Index dim = 1;
  std::optional<Vector> known_mean;

  static GaussianFamily precision_only(Vector mean) {
    const Index d = mean.size();
    return {d, std::move(mean)};
  }
  static GaussianFamily full(Index dim) { return {dim, std::nullopt}; }

  Index num_precision_entries() const { return dim * (dim + 1) / 2; }
  Index num_natural_parameters() const;
};

struct QuadraticObjective {
  Matrix hessian;  // G
  Vector linear;   // b
  double constant = 0.0;

  double value(const Vector& phi) const {
    return constant + linear.dot(phi) + 0.5 * phi.dot(hessian * phi);
  }
};

/// Objective configuration shared by the closed-form fits and training.
struct ObjectiveSpec {
  ObjectiveKind kind = ObjectiveKind::ssm_vr;
  ProjectionSampler sampler;
  Index projections = 1;
  double dsm_sigma = 0.1;
  ControlVariateConfig cv;
};

/// Natural coordinates of a Gaussian within the family.
Vector natural_parameters(const GaussianFamily& family, const Matrix& precision,
                          const Vector& mean);
/// Precision and mean encoded by natural coordinates.
std::pair<Matrix, Vector> moments_from_natural(const GaussianFamily& family,
                                               const Vector& phi);

/// Quadratic form of the objective on this batch. `projections` is used by
/// the sliced objectives and `seed` by dsm; both mirror the tape objectives.
QuadraticObjective gaussian_quadratic(const GaussianFamily& family,
                                      const Matrix& batch,
                                      const ObjectiveSpec& spec,
                                      const ProjectionBlock* projections,
                                      std::uint64_t seed);

struct GaussianEstimate {
  bool ok = false;
  std::string failure;
  Matrix precision;
  Vector mean;
  Vector natural;

  /// (upper triangle of the precision row by row, then the mean when it is
  /// estimated). This is the theta used for errors and covariances.
  Vector theta(const GaussianFamily& family) const;
};

Vector gaussian_theta(const GaussianFamily& family, const Matrix& precision,
                      const Vector& mean);

/// Minimizer of the objective over the family. Fails (ok = false) when G is
/// singular or the minimizer is not a valid Gaussian.
GaussianEstimate fit_gaussian_closed_form(const GaussianFamily& family,
                                          const Matrix& batch,
                                          const ObjectiveSpec& spec,
                                          std::uint64_t seed);

}  // namespace ssm
