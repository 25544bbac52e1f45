#pragma once

// Monte-Carlo and quadrature checks of the estimator theory: the
// integration-by-parts constant, consistency and root-N rates, asymptotic
// covariances, the small-displacement expansion of noise-contrastive
// estimation, and the variance of the sliced objectives across projections.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssm/gaussian_fit.hpp"

namespace ssm {

/// Composite Simpson rule on [a, b] with an odd number of nodes >= 3.
double simpson(const std::function<double(double)>& f, double a, double b,
               Index nodes);

// ---------------------------------------------------------------------------

struct IntegrationByPartsCheck {
  std::vector<double> precisions;
  /// Population sliced Fisher divergence L and objective J per grid point.
  std::vector<double> fisher;
  std::vector<double> objective;
  /// Analytic constant 1/2 E[s_d^2].
  double constant = 0.0;
  /// max |(L - J) - mean(L - J)| over the grid.
  double deviation = 0.0;
  Index nodes = 0;
  ProjectionKind sampler = ProjectionKind::rademacher;

  nlohmann::json to_json() const;
};

/// Data N(0, data_sd^2), models N(0, 1/lambda) for lambda in the grid. The
/// x-expectation uses Simpson quadrature on [-10 sd, 10 sd]; the v-expectation
/// is analytic (E[v^2] = 1 for every sampler in one dimension).
IntegrationByPartsCheck check_integration_by_parts(
    const std::vector<double>& precisions,
    ProjectionKind sampler = ProjectionKind::rademacher, Index nodes = 4001,
    double data_sd = 1.0);

// ---------------------------------------------------------------------------

/// Well-specified Gaussian estimation problem solved in closed form.
struct GaussianExperiment {
  GaussianModel truth;
  GaussianFamily family;
  ObjectiveSpec objective;

  /// Parameter error target (vech of the precision, then the mean if
  /// estimated).
  Vector true_theta() const;
  /// Fit on n fresh samples for repetition `rep`; seeds derived from
  /// (seed, n, rep).
  GaussianEstimate fit(Index n, Index rep, std::uint64_t seed) const;
};

struct ConsistencyCell {
  Index n = 0;
  Index rep = 0;
  double error = 0.0;
  bool ok = true;
  std::string failure;
};

struct ConsistencySweep {
  std::vector<Index> sample_sizes;
  Index reps = 0;
  std::uint64_t seed = 0;
  std::vector<ConsistencyCell> cells;
  /// Median error per sample size over successful cells.
  std::vector<double> median_errors;
  /// Least-squares slope of log median error against log N.
  double slope = 0.0;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

ConsistencySweep run_consistency_sweep(const GaussianExperiment& experiment,
                                       std::vector<Index> sample_sizes,
                                       Index reps, std::uint64_t seed,
                                       unsigned threads = 0);

// ---------------------------------------------------------------------------

struct AsymptoticsReport {
  std::string estimator;
  Index n = 0;
  Index reps = 0;
  Index failures = 0;
  std::uint64_t seed = 0;
  /// False when more than 5% of repetitions failed.
  bool valid = true;
  /// Empirical covariance of sqrt(N) (theta_hat - theta*).
  Matrix covariance;
  /// Closed form, available for the one-dimensional known-mean family.
  std::optional<Matrix> theoretical;
  /// |tr(empirical) - tr(theoretical)| / tr(theoretical) when available.
  double relative_deviation = std::numeric_limits<double>::quiet_NaN();
  /// Shape of the first coordinate (reported, not asserted).
  double skewness = 0.0;
  double excess_kurtosis = 0.0;
  std::vector<Vector> scaled_errors;

  double trace() const { return covariance.trace(); }
  nlohmann::json to_json() const;
};

/// Asymptotic variance of the precision estimate for data N(m, 1/lambda) with
/// m known: 2 E[a^2] lambda^2 for ssm (a = mean of the M values v^2),
/// (2 + Var[a]) lambda^2 for ssm_vr, 2 lambda^2 for sm_exact.
std::optional<double> theoretical_variance_1d(const ObjectiveSpec& spec,
                                              double precision);

AsymptoticsReport estimate_asymptotic_covariance(
    const GaussianExperiment& experiment, Index n, Index reps,
    std::uint64_t seed, unsigned threads = 0);

// ---------------------------------------------------------------------------

struct NceCheck {
  std::vector<double> displacements;
  std::vector<double> values;
  /// Second-order expansion and the residual against it.
  std::vector<double> predictions;
  std::vector<double> residuals;
  std::vector<double> residual_over_v2;
  /// Same with a 1/4 leading coefficient in place of 1/2; its residual
  /// tends to a nonzero multiple of v^2.
  std::vector<double> quarter_predictions;
  std::vector<double> quarter_residual_over_v2;
  bool decreasing = false;
  /// J at v = 0 extrapolated from the two smallest displacements
  /// (J = a + c v^2 + O(v^4)), and its distance from 2 log 2.
  double limit = 0.0;
  double limit_gap = 0.0;
  /// |J(v_min) - 2 log 2| without extrapolation.
  double smallest_v_gap = 0.0;

  nlohmann::json to_json() const;
};

/// Noise-contrastive objective -E_d[log h] - E_n[log(1 - h)] with
/// h(x) = p_m(x) / (p_m(x) + p_m(x - v)), data N(0, 1), noise samples x + v
/// (density p_d(x - v)) and model N(model_mean, 1/model_precision). Simpson
/// quadrature on [-half_width, half_width].
double nce_objective(double v, double model_mean, double model_precision,
                     Index nodes = 20001, double half_width = 14.0);

/// 2 log 2 + c E_d[v^2 (log p_m)'' + 1/2 (v (log p_m)')^2] with c = 1/2, the
/// coefficient the second-order expansion of the objective above produces.
double nce_prediction(double v, double model_mean, double model_precision,
                      double coefficient = 0.5);

/// `displacements` must be strictly decreasing and positive.
NceCheck check_nce_taylor(std::vector<double> displacements = {0.2, 0.1, 0.05, 0.025},
                          double model_mean = 0.0, double model_precision = 1.0,
                          Index nodes = 20001);

// ---------------------------------------------------------------------------

struct VarianceCell {
  ProjectionKind sampler = ProjectionKind::gaussian;
  Index projections = 1;
  double mean_ssm = 0.0;
  double mean_ssm_vr = 0.0;
  double var_ssm = 0.0;
  double var_ssm_vr = 0.0;
};

struct VarianceTable {
  Index draws = 0;
  std::uint64_t seed = 0;
  std::vector<VarianceCell> cells;
  /// Var[ssm_vr] <= Var[ssm] in every cell.
  bool vr_never_worse = false;
  /// Variance non-increasing in M for each sampler and objective.
  bool decreasing_in_m = false;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Variance across `draws` independent projection blocks of the ssm and
/// ssm_vr values on a fixed batch, for each sampler and M.
VarianceTable compare_estimator_variances(const ScoreField& model,
                                          const Matrix& batch,
                                          const std::vector<ProjectionKind>& samplers,
                                          const std::vector<Index>& projections,
                                          Index draws, std::uint64_t seed,
                                          unsigned threads = 0);

// ---------------------------------------------------------------------------

struct HutchinsonCheck {
  Index draws = 0;
  double sm_exact = 0.0;
  double ssm_mean = 0.0;
  double ssm_standard_error = 0.0;
  /// (mean ssm - sm_exact) / standard error.
  double z = 0.0;
  /// Largest per-draw error of ssm - ssm_vr = 1/2 s^T (A - I) s and
  /// ssm_vr - sm_exact = <J, A - I> with A the empirical second moment of
  /// the draw's projections, averaged over the batch.
  double max_score_cross_term_error = 0.0;
  double max_jacobian_cross_term_error = 0.0;

  nlohmann::json to_json() const;
};

HutchinsonCheck check_hutchinson_identity(const ScoreField& model, const Matrix& batch,
                                          const ProjectionSampler& sampler,
                                          Index draws, Index projections = 1);

}  // namespace ssm
