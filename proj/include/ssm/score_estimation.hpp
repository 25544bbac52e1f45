#pragma once

// Score networks fit to samples of an implicit distribution and their use as
// plug-in scores for entropy gradients of reparameterized samplers.

#include <vector>

#include "ssm/training.hpp"

namespace ssm {

struct ScoreEstimatorConfig {
  std::vector<Index> hidden{64, 64, 64};
  Activation activation = Activation::tanh;
  /// Objective used with the network's ScoreField (ssm, ssm_vr or ssm_cv).
  ObjectiveKind objective = ObjectiveKind::ssm;
  ProjectionSampler sampler;
  Index projections = 1;
  OptimizerConfig optimizer;
  Index batch_size = 100;
  Index steps = 10000;
  std::uint64_t seed = 0;
  Index eval_every = 100;
  Index patience = 0;
};

struct ScoreFit {
  ScoreNetwork network;
  TrainReport report;
};

/// Train h(x) from random initialization. Deterministic given cfg.seed.
ScoreFit fit_score_network(const BatchSource& samples,
                           const ScoreEstimatorConfig& config);

/// Continue training an existing network.
ScoreFit fit_score_network(const ScoreNetwork& init, const BatchSource& samples,
                           const ScoreEstimatorConfig& config);

struct EntropyGradEstimate {
  /// d H / d mean, one entry per dimension.
  Vector mean;
  /// d H / d log_scale.
  Vector log_scale;
  Vector mean_standard_error;
  Vector log_scale_standard_error;
  Index samples = 0;

  /// [mean, log_scale] stacked.
  Vector gradient() const;
};

/// Monte-Carlo estimate of -E[score(g(eps))^T d g(eps) / d theta] with the
/// sampling-rule Jacobian taken by autodiff. The score is held fixed.
EntropyGradEstimate entropy_gradient(const ReparamGaussian& dist,
                                     const ScoreField& score, Index n,
                                     std::uint64_t seed);

/// Mean over the batch of |score(x) - oracle(x)|^2.
double score_error(const ScoreField& score, const VectorFieldFn& oracle,
                   const Matrix& test_batch);

}  // namespace ssm
