#pragma once

// Experiment drivers behind the command-line tool: objective timing across
// dimensions and the dsm noise-level grid search.

#include <string>
#include <vector>

#include <json.hpp>

#include "ssm/stats.hpp"
#include "ssm/training.hpp"

namespace ssm {

struct BenchConfig {
  std::vector<Index> dims{50, 100, 200, 400};
  std::vector<ObjectiveKind> objectives{ObjectiveKind::sm_exact, ObjectiveKind::ssm};
  /// Timed repetitions per cell (median reported); one extra warmup run is
  /// discarded.
  Index reps = 5;
  std::uint64_t seed = 0;
  Index batch_size = 100;
  /// "mlp_energy" or "gaussian" (autodiff score path).
  std::string model = "mlp_energy";
  std::vector<Index> hidden{160, 160, 160, 160};
  ProjectionKind sampler = ProjectionKind::rademacher;
  Index projections = 1;
  double dsm_sigma = 0.1;
  /// Also backpropagate to the model parameters, as in a training step.
  bool with_parameter_gradient = false;
};

struct BenchRecord {
  Index dim = 0;
  ObjectiveKind objective = ObjectiveKind::ssm;
  double median_seconds = 0.0;
  double mean_seconds = 0.0;
  std::size_t backward_passes = 0;
  Index reps = 0;
};

/// Wall-clock of one objective evaluation on a minibatch, per (D, objective).
/// Cells run sequentially so timings do not compete for cores.
std::vector<BenchRecord> run_bench_scaling(const BenchConfig& config);

/// dim,objective,median_seconds,mean_seconds,backward_passes,reps
std::string bench_csv_header();
std::string bench_csv_row(const BenchRecord& record);
nlohmann::json to_json(const BenchRecord& record);

struct DsmGridConfig {
  std::vector<double> sigmas{0.1, 0.5, 1.0};
  GaussianModel truth = GaussianModel::standard(1);
  Index n_train = 20000;
  Index n_validation = 5000;
  std::uint64_t seed = 0;
  /// "closed_form" (exact minimizer over the Gaussian family) or "adam".
  std::string backend = "closed_form";
  /// Used by the adam backend; the objective kind and sigma are overridden.
  TrainConfig train;
  unsigned threads = 0;
};

struct DsmGridCell {
  double sigma = 0.0;
  bool ok = false;
  std::string failure;
  Matrix precision;
  Vector mean;
  /// sm_exact of the fitted model on the validation set.
  double validation_loss = std::numeric_limits<double>::quiet_NaN();
};

struct DsmGridResult {
  std::vector<DsmGridCell> cells;
  /// Index of the smallest validation loss among successful cells, or -1.
  Index argmin = -1;

  nlohmann::json to_json() const;
  /// sigma,ok,validation_loss,precision_00,is_argmin
  std::string to_csv() const;
};

DsmGridResult run_dsm_grid(const DsmGridConfig& config);

// ---------------------------------------------------------------------------
// Named validation checks with pass/fail verdicts.

struct CheckVerdict {
  std::string name;
  bool passed = false;
  /// Headline number compared against the threshold.
  double metric = 0.0;
  double threshold = 0.0;
  nlohmann::json details;

  nlohmann::json to_json() const;
};

/// Deviation of (L - J) over `grid_points` precisions spaced geometrically in
/// [1/4, 4]; passes at <= 1e-6.
CheckVerdict verify_integration_by_parts(Index grid_points = 16,
                                         ProjectionKind sampler = ProjectionKind::rademacher,
                                         Index nodes = 4001);

/// Residual over v^2 decreasing and the v -> 0 limit within 1e-4 of 2 log 2.
CheckVerdict verify_nce_taylor(Index nodes = 20001);

/// 2D Gaussian model on a fixed 10-point batch: mean of ssm over `draws`
/// projection blocks within 3 standard errors of sm_exact, and the per-draw
/// cross-term decomposition within 1e-10.
CheckVerdict verify_hutchinson(Index draws = 10000, std::uint64_t seed = 0,
                               ProjectionKind sampler = ProjectionKind::rademacher);

/// Median parameter error of the 2D ssm_vr fit against N; passes when the
/// log-log slope lies in [-0.65, -0.35].
CheckVerdict verify_consistency(std::vector<Index> sample_sizes = {1000, 4000, 16000},
                                Index reps = 20, std::uint64_t seed = 0, unsigned threads = 0);

/// 1D known-mean Gaussian fit by ssm (M = 1, Rademacher): variance of
/// sqrt(N)(lambda_hat - 1) within 15% of 2.
CheckVerdict verify_asymptotic_variance(Index n = 10000, Index reps = 500,
                                        std::uint64_t seed = 0, unsigned threads = 0);

/// 2D Gaussian: trace of the asymptotic covariance of sm_exact <= ssm(M=1)
/// and ssm(M=10) <= ssm(M=1), each with 5% slack.
CheckVerdict verify_variance_ordering(Index n = 4000, Index reps = 300,
                                      std::uint64_t seed = 0, unsigned threads = 0);

/// Names accepted by run_check.
const std::vector<std::string>& check_names();

struct CheckSettings {
  std::uint64_t seed = 0;
  unsigned threads = 0;
  Index ibp_grid_points = 16;
  Index ibp_nodes = 4001;
  Index nce_nodes = 20001;
  Index hutchinson_draws = 10000;
  std::vector<Index> consistency_sizes{1000, 4000, 16000};
  Index consistency_reps = 20;
  Index asymptotics_n = 10000;
  Index asymptotics_reps = 500;
  Index ordering_n = 4000;
  Index ordering_reps = 300;
  ProjectionKind sampler = ProjectionKind::rademacher;
};

CheckVerdict run_check(const std::string& name, const CheckSettings& settings);

}  // namespace ssm
