#include <gtest/gtest.h>

#include <cmath>

#include "ssm/objectives.hpp"
#include "ssm/random.hpp"
#include "test_util.hpp"

namespace ssm {
namespace {

using testing::relative_error;

ProjectionBlock single(const Matrix& v, ProjectionKind kind = ProjectionKind::rademacher) {
  ProjectionBlock p;
  p.slices = {v};
  p.kind = kind;
  return p;
}

GaussianModel example_gaussian() {
  Matrix lambda(2, 2);
  lambda << 2.0, 0.5, 0.5, 1.0;
  return GaussianModel::from_moments(Vector{{0.3, -0.6}}, lambda);
}

TEST(Projections, RademacherEntriesAreSigns) {
  const ProjectionBlock p =
      sample_projections({ProjectionKind::rademacher, 70, false, 3}, 20, 3);
  ASSERT_EQ(p.projections(), 3);
  for (const Matrix& s : p.slices) {
    EXPECT_TRUE((s.array().abs() == 1.0).all());
  }
}

TEST(Projections, UnscaledSphereRowsHaveUnitNorm) {
  const ProjectionSampler sampler{ProjectionKind::sphere, 5, false, 1};
  EXPECT_FALSE(sampler.identity_second_moment());
  EXPECT_DOUBLE_EQ(sampler.second_moment_scale(), 0.2);
  const ProjectionBlock p = sample_projections(sampler, 100, 2);
  for (const Matrix& s : p.slices) {
    for (Index i = 0; i < s.rows(); ++i) EXPECT_NEAR(s.row(i).norm(), 1.0, 1e-12);
  }
  const ProjectionBlock scaled =
      sample_projections({ProjectionKind::sphere, 5, true, 1}, 100, 2);
  EXPECT_TRUE(scaled.identity_moment);
  EXPECT_NEAR(scaled.slices[0].row(0).squaredNorm(), 5.0, 1e-12);
}

TEST(Projections, GaussianSecondMomentIsIdentity) {
  const ProjectionBlock p =
      sample_projections({ProjectionKind::gaussian, 2, false, 9}, 1000000, 1);
  const Matrix& v = p.slices[0];
  const Matrix moment = v.transpose() * v / static_cast<double>(v.rows());
  EXPECT_LE((moment - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 0.01);
}

TEST(Projections, DeterministicPerStream) {
  const ProjectionSampler s{ProjectionKind::gaussian, 3, false, 4};
  EXPECT_EQ(sample_projections(s, 5, 2, 7).slices[1],
            sample_projections(s, 5, 2, 7).slices[1]);
  EXPECT_NE(sample_projections(s, 5, 2, 7).slices[0],
            sample_projections(s, 5, 2, 8).slices[0]);
}

TEST(Ssm, OneDimStandardNormalAtOrigin) {
  const ScoreField f = score_field(GaussianModel::standard(1));
  const auto est = ssm(f, Matrix::Zero(1, 1), single(Matrix::Ones(1, 1)));
  EXPECT_DOUBLE_EQ(est.per_sample[0], -1.0);
  EXPECT_EQ(est.projections_used, 1);
}

TEST(Ssm, ZeroProjectionGivesZero) {
  const ScoreField f = score_field(example_gaussian());
  const auto est = ssm(f, standard_normal(3, 2, 1, 0), single(Matrix::Zero(3, 2)));
  EXPECT_EQ(est.value, 0.0);
}

TEST(Ssm, TwoDimGaussianClosedForm) {
  const GaussianModel m = example_gaussian();
  const Matrix lambda = m.precision();
  const Matrix x = standard_normal(4, 2, 2, 0);
  const Matrix v = standard_normal(4, 2, 2, 1);
  for (ScoreMode mode : {ScoreMode::analytic, ScoreMode::autodiff}) {
    const auto est = ssm(score_field(m, mode), x, single(v, ProjectionKind::gaussian));
    const auto vr = ssm_vr(score_field(m, mode), x, single(v, ProjectionKind::gaussian));
    for (Index i = 0; i < 4; ++i) {
      const Vector vi = v.row(i).transpose();
      const Vector s = lambda * (m.mean() - x.row(i).transpose());
      EXPECT_NEAR(est.per_sample[i], -vi.dot(lambda * vi) + 0.5 * std::pow(vi.dot(s), 2),
                  1e-12);
      EXPECT_NEAR(vr.per_sample[i], -vi.dot(lambda * vi) + 0.5 * s.squaredNorm(), 1e-12);
    }
    EXPECT_DOUBLE_EQ(est.value, est.per_sample.mean());
  }
}

TEST(SsmVr, OneDimSignInvariant) {
  const ScoreField f = score_field(GaussianModel::standard(1));
  const Matrix x = Matrix::Constant(1, 1, 2.0);
  EXPECT_DOUBLE_EQ(ssm_vr(f, x, single(Matrix::Ones(1, 1))).value, 1.0);
  EXPECT_DOUBLE_EQ(ssm_vr(f, x, single(-Matrix::Ones(1, 1))).value, 1.0);
}

TEST(SsmVr, RejectsUnscaledSphere) {
  const ScoreField f = score_field(example_gaussian());
  const ProjectionBlock p = sample_projections({ProjectionKind::sphere, 2, false, 0}, 3, 1);
  try {
    ssm_vr(f, standard_normal(3, 2, 0, 0), p);
    FAIL() << "expected PreconditionError";
  } catch (const PreconditionError& e) {
    EXPECT_NE(std::string(e.what()).find("E[v v^T] = I"), std::string::npos);
  }
  EXPECT_THROW(ssm_cv(f, standard_normal(3, 2, 0, 0), p, {}), PreconditionError);
  EXPECT_NO_THROW(ssm(f, standard_normal(3, 2, 0, 0), p));
}

TEST(SsmVr, MonteCarloGapToSsmVanishes) {
  const ScoreField f = score_field(example_gaussian());
  const Matrix x = standard_normal(1, 2, 5, 0);
  const ProjectionSampler sampler{ProjectionKind::rademacher, 2, false, 12};
  const Index draws = 20000;
  Vector gap(draws);
  for (Index k = 0; k < draws; ++k) {
    const ProjectionBlock p = sample_projections(sampler, 1, 1, k);
    gap[k] = ssm(f, x, p).value - ssm_vr(f, x, p).value;
  }
  const double mean = gap.mean();
  const double se = std::sqrt((gap.array() - mean).square().sum() / (draws - 1) / draws);
  EXPECT_LE(std::abs(mean), 3.0 * se + 1e-12);
}

TEST(SsmCv, BetaZeroAndOneReproduceBitwise) {
  const ScoreField f = score_field(MlpEnergy::random(3, 2));
  const Matrix x = standard_normal(6, 3, 3, 0);
  const ProjectionBlock p =
      sample_projections({ProjectionKind::gaussian, 3, false, 3}, 6, 3);
  const auto plain = ssm(f, x, p);
  const auto vr = ssm_vr(f, x, p);
  const auto cv0 = ssm_cv(f, x, p, {[](const Vector&) { return 0.0; }});
  const auto cv1 = ssm_cv(f, x, p, {});
  EXPECT_EQ(cv0.value, plain.value);
  EXPECT_EQ(cv0.per_sample, plain.per_sample);
  EXPECT_EQ(cv1.value, vr.value);
  EXPECT_EQ(cv1.per_sample, vr.per_sample);
}

TEST(SsmCv, HalfBetaIsMidpoint) {
  const ScoreField f = score_field(example_gaussian());
  const Matrix x = standard_normal(1, 2, 4, 0);
  const ProjectionBlock p =
      sample_projections({ProjectionKind::gaussian, 2, false, 4}, 1, 2);
  const double half = ssm_cv(f, x, p, {[](const Vector&) { return 0.5; }}).value;
  EXPECT_NEAR(half, 0.5 * (ssm(f, x, p).value + ssm_vr(f, x, p).value), 1e-13);
}

TEST(SmExact, StandardNormalClosedForm) {
  const Index d = 4;
  const Matrix x = standard_normal(5, d, 6, 0);
  for (ScoreMode mode : {ScoreMode::analytic, ScoreMode::autodiff}) {
    const auto est = sm_exact(score_field(GaussianModel::standard(d), mode), x);
    for (Index i = 0; i < 5; ++i) {
      EXPECT_NEAR(est.per_sample[i], -d + 0.5 * x.row(i).squaredNorm(), 1e-12);
    }
  }
}

TEST(SmExact, StandardNormalExpectation) {
  const Matrix x = GaussianModel::standard(3).sample(200000, 1);
  const auto est = sm_exact(score_field(GaussianModel::standard(3)), x);
  const double se = std::sqrt((est.per_sample.array() - est.value).square().mean() /
                              static_cast<double>(x.rows()));
  EXPECT_NEAR(est.value, -1.5, 4.0 * se);
}

TEST(SmExact, GaussianClosedForm) {
  const GaussianModel m = example_gaussian();
  const Matrix x = standard_normal(3, 2, 7, 0);
  const auto est = sm_exact(score_field(m, ScoreMode::autodiff), x);
  for (Index i = 0; i < 3; ++i) {
    const Vector s = m.precision() * (m.mean() - x.row(i).transpose());
    EXPECT_NEAR(est.per_sample[i], -m.precision().trace() + 0.5 * s.squaredNorm(), 1e-12);
  }
}

TEST(SmExact, OneDimRademacherSsmCollapses) {
  const ScoreField f = score_field(MlpEnergy::random(1, 5));
  const Matrix x = standard_normal(8, 1, 8, 0);
  const ProjectionBlock p = sample_projections({ProjectionKind::rademacher, 1, false, 8}, 8, 1);
  EXPECT_EQ(ssm(f, x, p).per_sample, sm_exact(f, x).per_sample);
}

TEST(PassAccounting, SsmUsesMPlusOneAndSmExactDPlusOne) {
  for (Index d : {3, 10}) {
    const ScoreField f = score_field(GaussianModel::standard(d), ScoreMode::autodiff);
    const Matrix x = standard_normal(4, d, 1, 0);
    for (Index m : {1, 4}) {
      const ProjectionBlock p = sample_projections({ProjectionKind::rademacher, d, false, 1}, 4, m);
      EXPECT_EQ(ssm(f, x, p).backward_passes, static_cast<std::size_t>(m + 1));
      EXPECT_EQ(ssm_vr(f, x, p).backward_passes, static_cast<std::size_t>(m + 1));
    }
    EXPECT_EQ(sm_exact(f, x).backward_passes, static_cast<std::size_t>(d + 1));
  }
  const ScoreField analytic = score_field(GaussianModel::standard(3));
  EXPECT_EQ(sm_exact(analytic, Matrix::Zero(2, 3)).backward_passes, 0U);
}

TEST(Dsm, ExactTargetGivesZero) {
  const Matrix batch = standard_normal(5, 2, 1, 0);
  const double sigma = 0.3;
  ScoreField target("target", 2, Vector::Zero(1), [&](const Var& x, const Var&) {
    const Var diff = ad::sub(x.tape().constant_matrix(batch), x);
    return BoundScore(x, ad::scale(diff, 1.0 / (sigma * sigma)));
  }, false);
  EXPECT_EQ(dsm(target, batch, {sigma}, 3).value, 0.0);
}

TEST(Dsm, ZeroScoreExpectation) {
  const Index d = 3;
  const double sigma = 2.0;
  ScoreField zero("zero", d, Vector::Zero(1), [](const Var& x, const Var&) {
    return BoundScore(x, ad::scale(x, 0.0));
  }, false);
  const auto est = dsm(zero, Matrix::Zero(100000, d), {sigma}, 4);
  const double se = std::sqrt((est.per_sample.array() - est.value).square().mean() / 1e5);
  EXPECT_NEAR(est.value, d / (2.0 * sigma * sigma), 4.0 * se);
}

TEST(Dsm, RejectsNonPositiveSigma) {
  EXPECT_THROW(dsm(score_field(GaussianModel::standard(1)), Matrix::Zero(1, 1), {0.0}, 0),
               std::invalid_argument);
}

TEST(SlicedFisher, ZeroForDataScoreAndQuadraticInV) {
  const GaussianModel m = example_gaussian();
  const ScoreField f = score_field(m);
  const Matrix x = standard_normal(10, 2, 3, 0);
  const ProjectionBlock p = sample_projections({ProjectionKind::gaussian, 2, false, 3}, 10, 2);
  EXPECT_EQ(sliced_fisher_exact(f, [&](const Matrix& z) { return m.score(z); }, x, p), 0.0);

  const VectorFieldFn data = [](const Matrix& z) { return Matrix(-z); };
  const double base = sliced_fisher_exact(f, data, x, p);
  EXPECT_GT(base, 0.0);
  EXPECT_NEAR(sliced_fisher_exact(f, data, x, p.scaled(2.0)), 4.0 * base, 1e-12 * base);
}

TEST(Hutchinson, IdentityRademacherIsExact) {
  const auto samples = hutchinson_samples([](const Vector& v) { return v; }, 7,
                                          {ProjectionKind::rademacher, 7, false, 1}, 50);
  EXPECT_TRUE((samples.array() == 7.0).all());
}

TEST(Hutchinson, DiagonalGaussianWithinThreeStandardErrors) {
  const Vector diag{{1.0, 2.0, 3.0}};
  const auto samples = hutchinson_samples(
      [&](const Vector& v) { return Vector(diag.cwiseProduct(v)); }, 3,
      {ProjectionKind::gaussian, 3, false, 2}, 100000);
  const double mean = samples.mean();
  const double se = std::sqrt((samples.array() - mean).square().sum() /
                              (samples.size() - 1) / samples.size());
  EXPECT_LE(std::abs(mean - 6.0), 3.0 * se);
}

TEST(Hutchinson, SkewSymmetricIsExactlyZero) {
  Matrix a(3, 3);
  a << 0, 2, -1, -2, 0, 4, 1, -4, 0;
  const auto samples = hutchinson_samples([&](const Vector& v) { return Vector(a * v); }, 3,
                                          {ProjectionKind::rademacher, 3, false, 5}, 100);
  EXPECT_TRUE((samples.array() == 0.0).all());
}

TEST(Hutchinson, RejectsUnscaledSphere) {
  EXPECT_THROW(hutchinson_trace([](const Vector& v) { return v; }, 3,
                                {ProjectionKind::sphere, 3, false, 0}, 10),
               PreconditionError);
}

TEST(Unbiasedness, SsmMeanConvergesToSmExact) {
  const ScoreField f = score_field(example_gaussian(), ScoreMode::autodiff);
  const Matrix x = example_gaussian().sample(5, 2);
  const double exact = sm_exact(f, x).value;
  const ProjectionSampler sampler{ProjectionKind::rademacher, 2, false, 77};
  const Index draws = 10000;
  Vector values(draws);
  for (Index k = 0; k < draws; ++k) {
    values[k] = ssm(score_field(example_gaussian()), x, sample_projections(sampler, 5, 1, k)).value;
  }
  const double mean = values.mean();
  const double se = std::sqrt((values.array() - mean).square().sum() / (draws - 1) / draws);
  EXPECT_LE(std::abs(mean - exact), 3.0 * se);
}

// Parameter gradients of every objective against central differences.
TEST(ParameterGradient, AllObjectivesMatchFiniteDifferences) {
  const Matrix x = standard_normal(4, 2, 3, 0);
  const ProjectionBlock p = sample_projections({ProjectionKind::gaussian, 2, false, 3}, 4, 2);
  std::vector<ScoreField> fields = {
      score_field(example_gaussian()), score_field(example_gaussian(), ScoreMode::autodiff),
      score_field(MlpEnergy::random(2, 1, {8, 8})),
      score_field(ScoreNetwork::random(2, 1, {8})),
      score_field(KefModel(standard_normal(3, 2, 4, 0), Vector{{0.5, -0.2, 1.0}},
                           KernelMixture{Vector{{0.8, 1.5}}, Vector{{0.6, 0.4}}}))};
  using Fn = std::function<ObjectiveEstimate(const ScoreField&, EvalOptions)>;
  const std::vector<std::pair<std::string, Fn>> objectives = {
      {"ssm", [&](const ScoreField& f, EvalOptions o) { return ssm(f, x, p, o); }},
      {"ssm_vr", [&](const ScoreField& f, EvalOptions o) { return ssm_vr(f, x, p, o); }},
      {"ssm_cv", [&](const ScoreField& f, EvalOptions o) {
         return ssm_cv(f, x, p, {[](const Vector& z) { return std::tanh(z[0]); }}, o);
       }},
      {"sm_exact", [&](const ScoreField& f, EvalOptions o) { return sm_exact(f, x, o); }},
      {"dsm", [&](const ScoreField& f, EvalOptions o) { return dsm(f, x, {0.5}, 9, o); }},
  };
  for (const ScoreField& field : fields) {
    for (const auto& [name, objective] : objectives) {
      const Vector analytic = objective(field, {true}).gradient;
      const Vector numeric = testing::numeric_gradient(
          [&](const Vector& theta) {
            return objective(field.with_parameters(theta), {}).value;
          },
          field.parameters(), 1e-5);
      EXPECT_LE(relative_error(analytic, numeric), 1e-6) << field.kind() << " " << name;
    }
  }
}

}  // namespace
}  // namespace ssm
