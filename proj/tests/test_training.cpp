#include <gtest/gtest.h>

#include <cmath>

#include "ssm/random.hpp"
#include "ssm/training.hpp"
#include "test_util.hpp"

namespace ssm {
namespace {

BatchSource gaussian_source(const GaussianModel& truth, std::uint64_t seed,
                            Index validation = 500) {
  return BatchSource::from_generator(
      [truth](Index n, std::uint64_t s) { return truth.sample(n, s); }, truth.dim(),
      validation, seed);
}

TrainConfig quick_config(ObjectiveKind kind, Index steps) {
  TrainConfig cfg;
  cfg.objective.kind = kind;
  cfg.objective.sampler.kind = ProjectionKind::rademacher;
  cfg.steps = steps;
  cfg.patience = 0;
  return cfg;
}

TEST(Train, OneDimSlicedTrainingRecoversPrecision) {
  const GaussianModel truth = GaussianModel::standard(1);
  const GaussianModel init = GaussianModel::from_moments(Vector{{0.5}}, Matrix::Constant(1, 1, 3.0));
  TrainConfig cfg = quick_config(ObjectiveKind::ssm_vr, 5000);
  cfg.optimizer.learning_rate = 1e-2;
  cfg.eval_every = 500;
  const TrainReport report = train(score_field(init), gaussian_source(truth, 1), cfg);
  const GaussianModel fitted = init.with_parameters(report.final_parameters);
  EXPECT_NEAR(fitted.precision()(0, 0), 1.0, 0.05);
  EXPECT_EQ(report.steps_run, 5000);
  EXPECT_LE(static_cast<Index>(report.curve.size()), cfg.steps);
  EXPECT_EQ(report.backward_passes, 0u);  // analytic Gaussian score
}

TEST(Train, ZeroLearningRateKeepsParametersBitwise) {
  const GaussianModel init = GaussianModel::from_moments(Vector{{0.2, 0.1}},
                                                         Matrix::Identity(2, 2) * 2.0);
  for (OptimizerKind opt : {OptimizerKind::sgd, OptimizerKind::adam}) {
    TrainConfig cfg = quick_config(ObjectiveKind::ssm, 50);
    cfg.optimizer.kind = opt;
    cfg.optimizer.learning_rate = 0.0;
    const TrainReport r =
        train(score_field(init), gaussian_source(GaussianModel::standard(2), 3), cfg);
    ASSERT_EQ(r.final_parameters.size(), init.parameters().size());
    for (Index i = 0; i < r.final_parameters.size(); ++i) {
      EXPECT_EQ(r.final_parameters[i], init.parameters()[i]);
    }
  }
}

TEST(Train, NegativeLearningRateAndEmptyBatchRejected) {
  const ScoreField f = score_field(GaussianModel::standard(1));
  const BatchSource src = gaussian_source(GaussianModel::standard(1), 0);
  TrainConfig cfg = quick_config(ObjectiveKind::ssm, 1);
  cfg.optimizer.learning_rate = -1e-3;
  EXPECT_THROW(train(f, src, cfg), std::invalid_argument);
  cfg.optimizer.learning_rate = 1e-3;
  cfg.batch_size = 0;
  EXPECT_THROW(train(f, src, cfg), std::invalid_argument);
}

TEST(Train, IdenticalConfigGivesIdenticalReport) {
  const MlpEnergy energy = MlpEnergy::random(2, 4, {8});
  const Matrix data = standard_normal(300, 2, 9, 0);
  TrainConfig cfg = quick_config(ObjectiveKind::ssm, 30);
  cfg.eval_every = 5;
  cfg.seed = 12;
  cfg.batch_size = 20;
  const BatchSource src = BatchSource::from_dataset(data, 0.1, 5);
  const TrainReport a = train(score_field(energy), src, cfg);
  const TrainReport b = train(score_field(energy), src, cfg);
  EXPECT_EQ(a.final_parameters, b.final_parameters);
  ASSERT_EQ(a.curve.size(), b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    EXPECT_EQ(a.curve[i].train, b.curve[i].train);
    EXPECT_EQ(a.curve[i].validation, b.curve[i].validation);
  }
  EXPECT_EQ(a.backward_passes, b.backward_passes);
  EXPECT_EQ(a.backward_passes, 30u * 2u);  // score pass + one Jacobian pass per step
  cfg.seed = 13;
  EXPECT_NE(train(score_field(energy), src, cfg).final_parameters, a.final_parameters);
}

TEST(Train, DivergenceReportsStep) {
  const GaussianModel init = GaussianModel::standard(2);
  TrainConfig cfg = quick_config(ObjectiveKind::sm_exact, 100);
  cfg.optimizer.kind = OptimizerKind::sgd;
  cfg.optimizer.learning_rate = 1e200;
  try {
    train(score_field(init), gaussian_source(GaussianModel::standard(2), 2), cfg);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_GE(e.step(), 0);
    EXPECT_LT(e.step(), 100);
  }
}

TEST(Train, EarlyStopAfterPatienceEvaluations) {
  TrainConfig cfg = quick_config(ObjectiveKind::ssm_vr, 100);
  cfg.optimizer.learning_rate = 0.0;
  cfg.eval_every = 1;
  cfg.patience = 3;
  const TrainReport r = train(score_field(GaussianModel::standard(1)),
                              gaussian_source(GaussianModel::standard(1), 4), cfg);
  EXPECT_TRUE(r.stopped_early);
  EXPECT_EQ(r.steps_run, 4);
  EXPECT_EQ(r.curve.size(), 4u);
}

TEST(Train, DatasetSplitHoldsOutFraction) {
  const Matrix data = standard_normal(200, 3, 1, 0);
  const BatchSource src = BatchSource::from_dataset(data, 0.1, 7);
  EXPECT_EQ(src.validation().rows(), 20);
  EXPECT_EQ(src.train_size(), 180);
  EXPECT_EQ(src.batch(16, 3), src.batch(16, 3));
  EXPECT_NE(src.batch(16, 3), src.batch(16, 4));
}

TEST(Train, ReportSerializes) {
  TrainConfig cfg = quick_config(ObjectiveKind::dsm, 6);
  cfg.eval_every = 2;
  const TrainReport r = train(score_field(GaussianModel::standard(1)),
                              gaussian_source(GaussianModel::standard(1), 4), cfg);
  const nlohmann::json j = r.to_json();
  EXPECT_EQ(j.at("curve").size(), 3u);
  EXPECT_EQ(j.at("projection_resampling"), "per_step");
  const std::string csv = r.curve_csv();
  EXPECT_EQ(csv.rfind("step,train,val\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

// A small gradient step lowers the objective on a fixed batch.
TEST(Train, SmallStepDecreasesLossOnFixedBatch) {
  const GaussianModel model = GaussianModel::from_moments(
      Vector{{0.3, -0.2}}, (Matrix(2, 2) << 2.0, 0.4, 0.4, 1.5).finished());
  const Matrix x = standard_normal(64, 2, 6, 0);
  const ScoreField f = score_field(model);
  const ObjectiveEstimate e = sm_exact(f, x, {true});
  Vector theta = f.parameters();
  Sgd(1e-3).step(theta, e.gradient);
  EXPECT_LT(sm_exact(f.with_parameters(theta), x).value, e.value);
}

TEST(Train, EvaluateObjectiveDispatchesOnKind) {
  const ScoreField f = score_field(MlpEnergy::random(2, 1, {6}));
  const Matrix x = standard_normal(10, 2, 3, 0);
  ObjectiveSpec spec;
  spec.projections = 2;
  spec.sampler = {ProjectionKind::gaussian, 2, false, 4};
  for (ObjectiveKind kind : {ObjectiveKind::ssm, ObjectiveKind::ssm_vr, ObjectiveKind::ssm_cv,
                             ObjectiveKind::sm_exact, ObjectiveKind::dsm}) {
    spec.kind = kind;
    const ObjectiveEstimate a = evaluate_objective(f, x, spec, 9);
    EXPECT_EQ(a.value, evaluate_objective(f, x, spec, 9).value);
    EXPECT_TRUE(std::isfinite(a.value));
  }
  spec.kind = ObjectiveKind::ssm;
  const ProjectionBlock block = sample_projections(spec.sampler, 10, 2, 9);
  EXPECT_EQ(evaluate_objective(f, x, spec, 9).value, ssm(f, x, block).value);
}

// ---------------------------------------------------------------------------
// Kernel exponential family coefficients

KernelMixture mixture() {
  return KernelMixture{Vector{{0.6, 1.5}}, Vector{{0.7, 0.3}}};
}

// Directional derivatives of t -> k(x + t v, z) by central differences.
std::pair<double, double> fd_kernel(const KefModel& kef, const Vector& x, const Vector& z,
                                    const Vector& v) {
  const double h = 1e-4;
  const double kp = kef.kernel_value(x + h * v, z);
  const double k0 = kef.kernel_value(x, z);
  const double km = kef.kernel_value(x - h * v, z);
  return {(kp - km) / (2 * h), (kp - 2 * k0 + km) / (h * h)};
}

TEST(FitKefAlpha, SingleInducingPointScalarSolve) {
  const KefModel kef(Matrix{{0.3, -0.4}}, Vector::Zero(1), mixture());
  const Matrix x = standard_normal(15, 2, 2, 0);
  const ProjectionBlock p = sample_projections({ProjectionKind::gaussian, 2, false, 3}, 15, 2);
  const Vector z = kef.inducing_points().row(0).transpose();
  double g = 0.0, b = 0.0;
  for (Index i = 0; i < 15; ++i) {
    const Vector xi = x.row(i).transpose();
    for (Index j = 0; j < 2; ++j) {
      const Vector v = p.v(i, j);
      const auto [w, c] = fd_kernel(kef, xi, z, v);
      g += w * w;
      b += c + v.dot(-xi / 4.0) * w;
    }
  }
  g /= 30.0;
  b /= 30.0;
  const double lambda = 0.05;
  const Vector alpha = fit_kef_alpha(kef, x, p, lambda);
  ASSERT_EQ(alpha.size(), 1);
  EXPECT_NEAR(alpha[0], -b / (g + lambda), 1e-6 * (1.0 + std::abs(alpha[0])));
}

TEST(FitKefAlpha, LargeRidgeShrinksToZero) {
  const Matrix z = standard_normal(4, 2, 5, 0);
  const KefModel kef(z, Vector::Zero(4), mixture());
  const Matrix x = standard_normal(20, 2, 6, 0);
  const ProjectionBlock p = sample_projections({ProjectionKind::rademacher, 2, false, 1}, 20, 1);
  const double lambda = 1e6;
  const Vector alpha = fit_kef_alpha(kef, x, p, lambda);
  const QuadraticObjective q = kef_quadratic(kef, x, p);
  EXPECT_LE(alpha.norm(), q.linear.norm() / lambda);
  EXPECT_LE(alpha.norm(), 1e-5);
}

TEST(FitKefAlpha, RejectsNonPositiveRidgeAndDegenerateInputs) {
  const KefModel kef(Matrix::Zero(2, 1), Vector::Zero(2), mixture());
  const Matrix x = standard_normal(5, 1, 1, 0);
  const ProjectionBlock p = sample_projections({ProjectionKind::rademacher, 1, false, 1}, 5, 1);
  EXPECT_THROW(fit_kef_alpha(kef, x, p, 0.0), std::invalid_argument);
  // Duplicated inducing points make G rank one.
  EXPECT_THROW(fit_kef_alpha(kef, x, p, 1e-300), std::runtime_error);
}

struct KefProblem {
  KefModel kef;
  Matrix x;
  ProjectionBlock p;
};

KefProblem five_point_problem(bool features) {
  std::optional<FeatureExtractor> fx;
  if (features) fx = FeatureExtractor::random(2, 4, 8);
  KefModel kef(standard_normal(5, 2, 11, 0), Vector::Zero(5), mixture(), 2.0, fx);
  Matrix x = standard_normal(25, 2, 12, 0);
  ProjectionBlock p = sample_projections({ProjectionKind::gaussian, 2, false, 13}, 25, 2);
  return {std::move(kef), std::move(x), std::move(p)};
}

double regularized(const KefProblem& prob, const Vector& alpha, double lambda) {
  return ssm(score_field(prob.kef.with_parameters(alpha)), prob.x, prob.p).value +
         0.5 * lambda * alpha.squaredNorm();
}

TEST(FitKefAlpha, QuadraticMatchesTapeObjective) {
  for (bool features : {false, true}) {
    const KefProblem prob = five_point_problem(features);
    const QuadraticObjective q = kef_quadratic(prob.kef, prob.x, prob.p);
    const Vector alpha{{0.3, -1.2, 0.5, 2.0, -0.1}};
    EXPECT_NEAR(q.value(alpha), regularized(prob, alpha, 0.0), 1e-10) << features;
  }
}

// Gradient descent on the quadratic whose coefficients are read off tape
// gradients (exact for a quadratic) converges to the closed-form solve.
TEST(FitKefAlpha, MatchesGradientDescentOnTapeObjective) {
  const KefProblem prob = five_point_problem(false);
  const double lambda = 0.01;
  auto tape_grad = [&](const Vector& a) {
    return Vector(ssm(score_field(prob.kef.with_parameters(a)), prob.x, prob.p, {true}).gradient +
                  lambda * a);
  };
  const Vector g0 = tape_grad(Vector::Zero(5));
  Matrix h(5, 5);
  for (Index k = 0; k < 5; ++k) h.col(k) = tape_grad(Vector::Unit(5, k)) - g0;
  h = 0.5 * (h + h.transpose());
  const double step = 1.0 / Eigen::SelfAdjointEigenSolver<Matrix>(h).eigenvalues().maxCoeff();
  Vector a = Vector::Zero(5);
  for (int it = 0; it < 5'000'000; ++it) {
    const Vector g = h * a + g0;
    if (g.norm() <= 1e-10) break;
    a -= step * g;
  }
  ASSERT_LE((h * a + g0).norm(), 1e-10);
  const Vector alpha = fit_kef_alpha(prob.kef, prob.x, prob.p, lambda);
  EXPECT_LE((alpha - a).norm(), 1e-6);
}

TEST(FitKefAlpha, BeatsRandomProbes) {
  for (bool features : {false, true}) {
    const KefProblem prob = five_point_problem(features);
    const double lambda = 0.01;
    const Vector best = fit_kef_alpha(prob.kef, prob.x, prob.p, lambda);
    const double at_best = regularized(prob, best, lambda);
    const Matrix probes = standard_normal(100, 5, 77, 0);
    for (Index r = 0; r < 100; ++r) {
      const Vector alpha = best + probes.row(r).transpose() * (r % 2 ? 0.1 : 3.0);
      EXPECT_LE(at_best, regularized(prob, alpha, lambda)) << r;
    }
  }
}

// ---------------------------------------------------------------------------
// Held-out evaluation

TEST(Evaluate, SlicedFisherVanishesAtTruth) {
  const GaussianModel truth = GaussianModel::from_moments(
      Vector{{0.5, -1.0}}, (Matrix(2, 2) << 2.0, 0.5, 0.5, 1.0).finished());
  const Matrix x = truth.sample(400, 3);
  EvalConfig cfg;
  cfg.metric = EvalMetric::sliced_fisher_exact;
  cfg.sampler = {ProjectionKind::gaussian, 2, false, 1};
  cfg.data_score = [truth](const Matrix& m) { return truth.score(m); };
  EXPECT_NEAR(evaluate(score_field(truth), x, cfg), 0.0, 1e-20);
  cfg.data_score = nullptr;
  EXPECT_THROW(evaluate(score_field(truth), x, cfg), std::invalid_argument);
}

TEST(Evaluate, DeterministicAndDoesNotMutate) {
  const MlpEnergy energy = MlpEnergy::random(3, 2, {8});
  const ScoreField f = score_field(energy);
  const Matrix x = standard_normal(30, 3, 4, 0);
  for (EvalMetric metric : {EvalMetric::sm_exact, EvalMetric::ssm_vr}) {
    EvalConfig cfg;
    cfg.metric = metric;
    cfg.stream = 5;
    EXPECT_EQ(evaluate(f, x, cfg), evaluate(f, x, cfg));
  }
  EXPECT_EQ(f.parameters(), energy.parameters());
}

TEST(Evaluate, TrainingImprovesHeldOutScoreMatchingLoss) {
  const GaussianModel truth = GaussianModel::from_moments(
      Vector{{1.0, -1.0}}, (Matrix(2, 2) << 2.0, 0.5, 0.5, 1.0).finished());
  const GaussianModel init = GaussianModel::standard(2);
  TrainConfig cfg = quick_config(ObjectiveKind::ssm_vr, 800);
  cfg.optimizer.learning_rate = 1e-2;
  cfg.eval_every = 100;
  const TrainReport r = train(score_field(init), gaussian_source(truth, 8), cfg);
  const Matrix test = truth.sample(2000, 99);
  EvalConfig ev;
  const double before = evaluate(score_field(init), test, ev);
  const double after = evaluate(score_field(init.with_parameters(r.final_parameters)), test, ev);
  EXPECT_LT(after, before);
}

}  // namespace
}  // namespace ssm
