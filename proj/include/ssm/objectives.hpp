#pragma once

// Score matching objectives on a minibatch: exact score matching, sliced
// score matching (plain, variance-reduced, control-variate), denoising score
// matching, plus the projection distributions they draw from.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssm/score_field.hpp"

namespace ssm {

/// A documented requirement of an operation was not met by its inputs.
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ProjectionKind { gaussian, rademacher, sphere };

const char* to_string(ProjectionKind kind);
ProjectionKind projection_kind_from_string(const std::string& name);

/// Distribution p_v of projection vectors.
struct ProjectionSampler {
  ProjectionKind kind = ProjectionKind::rademacher;
  Index dim = 1;
  /// Sphere only: multiply unit vectors by sqrt(D) so that E[v v^T] = I.
  bool scale_to_identity = false;
  std::uint64_t seed = 0;

  /// E[v v^T] = I (gaussian, rademacher, scaled sphere). Unscaled sphere
  /// gives I / D.
  bool identity_second_moment() const;
  /// Second moment E[v v^T] = c I; returns c.
  double second_moment_scale() const;
};

/// N x M x D projection block. slices[j] holds v_{ij} in row i.
struct ProjectionBlock {
  std::vector<Matrix> slices;
  ProjectionKind kind = ProjectionKind::rademacher;
  bool identity_moment = true;

  Index samples() const { return slices.empty() ? 0 : slices.front().rows(); }
  Index projections() const { return static_cast<Index>(slices.size()); }
  Index dim() const { return slices.empty() ? 0 : slices.front().cols(); }
  Vector v(Index i, Index j) const { return slices[j].row(i).transpose(); }

  ProjectionBlock scaled(double factor) const;
};

/// Draw v_{ij} for i < n, j < m. Vector (i, j) comes from the random stream
/// (sampler.seed, stream, i, j), so blocks are reproducible and independent
/// across streams (e.g. training steps).
ProjectionBlock sample_projections(const ProjectionSampler& sampler, Index n,
                                   Index m, std::uint64_t stream = 0);

struct ObjectiveEstimate {
  double value = 0.0;
  Vector per_sample;
  /// Backward passes spent building the objective (parameter gradient
  /// excluded).
  std::size_t backward_passes = 0;
  Index projections_used = 0;
  /// d value / d theta when requested, otherwise empty.
  Vector gradient;
};

struct EvalOptions {
  bool with_gradient = false;
};

struct DsmConfig {
  double sigma = 0.1;
};

struct ControlVariateConfig {
  std::function<double(const Vector& x)> beta = [](const Vector&) { return 1.0; };
};

/// (1/NM) sum_ij [v_ij^T grad s(x_i) v_ij + 1/2 (v_ij . s(x_i))^2]
ObjectiveEstimate ssm(const ScoreField& score, const Matrix& batch,
                      const ProjectionBlock& projections,
                      EvalOptions options = {});

/// (1/NM) sum_ij v_ij^T grad s(x_i) v_ij + (1/N) sum_i 1/2 |s(x_i)|^2.
/// Requires E[v v^T] = I.
ObjectiveEstimate ssm_vr(const ScoreField& score, const Matrix& batch,
                         const ProjectionBlock& projections,
                         EvalOptions options = {});

/// ssm minus beta(x_i) (mean_j c_ij - 1/2 |s(x_i)|^2) with
/// c_ij = 1/2 (v_ij . s(x_i))^2. beta = 0 gives ssm, beta = 1 gives ssm_vr.
ObjectiveEstimate ssm_cv(const ScoreField& score, const Matrix& batch,
                         const ProjectionBlock& projections,
                         const ControlVariateConfig& cv,
                         EvalOptions options = {});

/// (1/N) sum_i [tr grad s(x_i) + 1/2 |s(x_i)|^2].
ObjectiveEstimate sm_exact(const ScoreField& score, const Matrix& batch,
                           EvalOptions options = {});

/// (1/N) sum_i 1/2 |s(x~_i) - (x_i - x~_i) / sigma^2|^2, x~_i = x_i + sigma eps_i.
ObjectiveEstimate dsm(const ScoreField& score, const Matrix& batch,
                      const DsmConfig& config, std::uint64_t seed,
                      EvalOptions options = {});

/// Corrupted batch x + sigma eps used by dsm for the same seed.
Matrix dsm_perturb(const Matrix& batch, double sigma, std::uint64_t seed);

/// Monte-Carlo estimate of 1/2 E[(v . s(x) - v . s_d(x))^2].
double sliced_fisher_exact(const ScoreField& score,
                           const VectorFieldFn& data_score, const Matrix& batch,
                           const ProjectionBlock& projections);

/// Per-draw values v_j^T A v_j of Hutchinson's estimator.
Vector hutchinson_samples(const std::function<Vector(const Vector&)>& apply,
                          Index dim, const ProjectionSampler& sampler, Index m);
/// (1/m) sum_j v_j^T A v_j. Requires E[v v^T] = I.
double hutchinson_trace(const std::function<Vector(const Vector&)>& apply,
                        Index dim, const ProjectionSampler& sampler, Index m);

enum class ObjectiveKind { sm_exact, ssm, ssm_vr, ssm_cv, dsm };

const char* to_string(ObjectiveKind kind);
ObjectiveKind objective_kind_from_string(const std::string& name);

}  // namespace ssm
