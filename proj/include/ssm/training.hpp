#pragma once

// Minibatch optimization of score fields under any objective, plus the
// closed-form coefficient solve for kernel exponential families.

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssm/gaussian_fit.hpp"

namespace ssm {

enum class OptimizerKind { sgd, adam };

const char* to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First-order optimizer updating a flat parameter vector in place.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(Vector& theta, const Vector& gradient) = 0;

  static std::unique_ptr<Optimizer> make(const OptimizerConfig& config,
                                         Index num_parameters);
};

class Sgd : public Optimizer {
 public:
  explicit Sgd(double learning_rate) : lr_(learning_rate) {}
  void step(Vector& theta, const Vector& gradient) override;

 private:
  double lr_;
};

class Adam : public Optimizer {
 public:
  Adam(const OptimizerConfig& config, Index num_parameters);
  void step(Vector& theta, const Vector& gradient) override;

 private:
  OptimizerConfig cfg_;
  Vector m_;
  Vector v_;
  double beta1_power_ = 1.0;
  double beta2_power_ = 1.0;
};

/// Source of i.i.d. minibatches with a held-out validation set.
class BatchSource {
 public:
  using Generator = std::function<Matrix(Index n, std::uint64_t seed)>;

  /// Fixed dataset. The last `validation_fraction` of a seeded permutation is
  /// held out; training batches are drawn uniformly with replacement from the
  /// rest.
  static BatchSource from_dataset(Matrix data, double validation_fraction,
                                  std::uint64_t seed);
  /// Fresh draws per step; the validation set is a separate draw.
  static BatchSource from_generator(Generator generator, Index dim,
                                    Index validation_size, std::uint64_t seed);

  Index dim() const { return dim_; }
  /// Training minibatch for a step. Deterministic in (seed, step).
  Matrix batch(Index n, std::uint64_t step) const;
  const Matrix& validation() const { return validation_; }
  Index train_size() const { return train_.rows(); }

 private:
  BatchSource() = default;

  Index dim_ = 0;
  std::uint64_t seed_ = 0;
  Matrix train_;
  Matrix validation_;
  Generator generator_;
};

struct TrainConfig {
  ObjectiveSpec objective;
  OptimizerConfig optimizer;
  Index batch_size = 100;
  Index steps = 1000;
  std::uint64_t seed = 0;
  /// Validation loss is computed every `eval_every` steps; training stops
  /// after `patience` evaluations without improvement (0 disables).
  Index eval_every = 10;
  Index patience = 200;
  double validation_fraction = 0.1;
  /// Cap on validation points used per evaluation.
  Index max_validation = 2000;
};

struct CurvePoint {
  Index step = 0;
  double train = 0.0;
  double validation = std::numeric_limits<double>::quiet_NaN();
};

struct TrainReport {
  Vector initial_parameters;
  Vector final_parameters;
  std::vector<CurvePoint> curve;
  Index steps_run = 0;
  bool stopped_early = false;
  double best_validation = std::numeric_limits<double>::infinity();
  double seconds_total = 0.0;
  double seconds_per_step = 0.0;
  std::size_t backward_passes = 0;
  std::string projection_resampling = "per_step";

  nlohmann::json to_json() const;
  /// step,train,val rows with a header.
  std::string curve_csv() const;
};

/// The loss became non-finite during training.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(Index step, const std::string& what);
  Index step() const { return step_; }

 private:
  Index step_;
};

/// Objective value (and optionally gradient) of `field` on `batch`.
/// `stream` selects the projection block or dsm noise.
ObjectiveEstimate evaluate_objective(const ScoreField& field,
                                     const Matrix& batch,
                                     const ObjectiveSpec& spec,
                                     std::uint64_t stream,
                                     EvalOptions options = {});

/// Optimize the parameters of `field` with minibatch steps.
TrainReport train(const ScoreField& field, const BatchSource& data,
                  const TrainConfig& config);

/// alpha = -(G + lambda I)^{-1} b minimizing the ridge-regularized sliced
/// objective over the coefficients with the other KEF parts fixed.
Vector fit_kef_alpha(const KefModel& kef, const Matrix& batch,
                     const ProjectionBlock& projections,
                     double lambda_alpha = 0.01);

/// Quadratic form of the plain sliced objective in alpha (without the ridge).
QuadraticObjective kef_quadratic(const KefModel& kef, const Matrix& batch,
                                 const ProjectionBlock& projections);

enum class EvalMetric { sm_exact, ssm_vr, sliced_fisher_exact };

const char* to_string(EvalMetric metric);
EvalMetric eval_metric_from_string(const std::string& name);

struct EvalConfig {
  EvalMetric metric = EvalMetric::sm_exact;
  ProjectionSampler sampler;
  Index projections = 1;
  std::uint64_t stream = 0;
  /// Required for sliced_fisher_exact.
  VectorFieldFn data_score;
};

/// Held-out metric; the model is not modified.
double evaluate(const ScoreField& field, const Matrix& test_batch,
                const EvalConfig& config);

}  // namespace ssm
