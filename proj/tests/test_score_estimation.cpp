#include <gtest/gtest.h>

#include "ssm/random.hpp"
#include "ssm/score_estimation.hpp"

namespace ssm {
namespace {

BatchSource standard_normal_source(Index dim, std::uint64_t seed) {
  return BatchSource::from_generator(
      [dim](Index n, std::uint64_t s) { return standard_normal(n, dim, s, 0); }, dim, 500,
      seed);
}

Matrix negate(const Matrix& x) { return -x; }

TEST(FitScoreNetwork, ZeroStepsKeepsInitialization) {
  ScoreEstimatorConfig cfg;
  cfg.steps = 0;
  cfg.seed = 3;
  const ScoreFit fit = fit_score_network(standard_normal_source(2, 1), cfg);
  EXPECT_EQ(fit.network.parameters(), ScoreNetwork::random(2, 3).parameters());
  EXPECT_TRUE(fit.report.curve.empty());
}

TEST(FitScoreNetwork, RejectsMismatchedDimensionAndNonSlicedObjective) {
  ScoreEstimatorConfig cfg;
  cfg.steps = 1;
  EXPECT_THROW(fit_score_network(ScoreNetwork::random(3, 0), standard_normal_source(2, 1), cfg),
               ShapeError);
  cfg.objective = ObjectiveKind::sm_exact;
  EXPECT_THROW(fit_score_network(standard_normal_source(2, 1), cfg), std::invalid_argument);
}

// Held-out score error at checkpoints of one run never rises by more than a
// 5% noise plateau and ends well below the start. A run truncated at step k
// reproduces the first k steps of a longer run, so each checkpoint is a
// separate call.
TEST(FitScoreNetwork, ErrorDecreasesAcrossCheckpoints) {
  ScoreEstimatorConfig cfg;
  cfg.hidden = {16, 16};
  cfg.objective = ObjectiveKind::ssm_vr;
  cfg.seed = 5;
  const BatchSource src = standard_normal_source(2, 2);
  const Matrix test = standard_normal(1000, 2, 77, 0);
  double prev = 0.0, start = 0.0;
  for (Index steps : {0, 250, 500, 1000, 2000, 4000}) {
    cfg.steps = steps;
    const double err = score_error(score_field(fit_score_network(src, cfg).network), negate, test);
    if (steps == 0) {
      start = prev = err;
      continue;
    }
    EXPECT_LE(err, 1.05 * prev) << steps;
    prev = err;
  }
  EXPECT_LT(prev, 0.05 * start);
}

TEST(ScoreError, ExactAndShiftedOracle) {
  const GaussianModel g = GaussianModel::from_moments(Vector{{0.5, -1.0}},
                                                      (Matrix(2, 2) << 2.0, 0.5, 0.5, 1.0).finished());
  const Matrix x = standard_normal(50, 2, 4, 0);
  const VectorFieldFn oracle = [g](const Matrix& m) { return g.score(m); };
  EXPECT_EQ(score_error(score_field(g), oracle, x), 0.0);
  const Vector c{{0.3, -0.4}};
  const VectorFieldFn shifted = [g, c](const Matrix& m) {
    return Matrix(g.score(m).rowwise() + c.transpose());
  };
  EXPECT_NEAR(score_error(score_field(g), shifted, x), c.squaredNorm(), 1e-12);
}

ScoreField oracle_field(const ReparamGaussian& dist) {
  // Gaussian with the same moments; its analytic score equals the oracle.
  const Vector var = (2.0 * dist.log_scale().array()).exp();
  return score_field(GaussianModel::from_moments(dist.mean(), var.cwiseInverse().asDiagonal()));
}

TEST(EntropyGradient, OracleScoreIsUnbiased) {
  const ReparamGaussian dist(Vector{{0.5, -1.0, 2.0}}, Vector{{-0.3, 0.2, 0.7}});
  const EntropyGradEstimate est = entropy_gradient(dist, oracle_field(dist), 5000, 11);
  ASSERT_EQ(est.gradient().size(), 6);
  EXPECT_EQ(est.samples, 5000);
  for (Index i = 0; i < 3; ++i) {
    EXPECT_LE(std::abs(est.log_scale[i] - 1.0), 3.0 * est.log_scale_standard_error[i]) << i;
    EXPECT_LE(std::abs(est.mean[i]), 3.0 * est.mean_standard_error[i]) << i;
    EXPECT_GT(est.log_scale_standard_error[i], 0.0);
  }
}

// Per-sample gradients by hand: d/ds_i = -s_i(x) sigma_i eps_i, d/dm_i = -s_i(x).
TEST(EntropyGradient, MatchesHandDerivedPerSampleTerms) {
  const ReparamGaussian dist(Vector{{0.1, 0.2}}, Vector{{0.4, -0.5}});
  const ScoreField f = score_field(MlpEnergy::random(2, 6, {5}));
  const EntropyGradEstimate est = entropy_gradient(dist, f, 40, 2);
  const Matrix eps = dist.noise(40, 2);
  const Matrix s = f.value(dist.transform(eps));
  const Vector sigma = dist.log_scale().array().exp();
  const Vector expect_ls =
      -(s.array() * eps.array()).colwise().mean().transpose() * sigma.array();
  EXPECT_LE((est.log_scale - expect_ls).norm(), 1e-12);
  EXPECT_LE((est.mean + s.colwise().mean().transpose()).norm(), 1e-12);
}

}  // namespace
}  // namespace ssm
