#include "ssm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "ssm/random.hpp"

namespace ssm {

namespace {

constexpr std::uint64_t kSplitTag = 0x73706C6974ULL;
constexpr std::uint64_t kBatchTag = 0x6261746368ULL;
constexpr std::uint64_t kValidationTag = 0x76616CULL;
constexpr std::uint64_t kStepTag = 0x73746570ULL;

bool is_sliced(ObjectiveKind kind) {
  return kind == ObjectiveKind::ssm || kind == ObjectiveKind::ssm_vr ||
         kind == ObjectiveKind::ssm_cv;
}

std::string format_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace

const char* to_string(OptimizerKind kind) {
  return kind == OptimizerKind::adam ? "adam" : "sgd";
}

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw std::invalid_argument("unknown optimizer '" + name + "'");
}

std::unique_ptr<Optimizer> Optimizer::make(const OptimizerConfig& config,
                                           Index num_parameters) {
  if (!(config.learning_rate >= 0.0) || !std::isfinite(config.learning_rate)) {
    throw std::invalid_argument("optimizer: learning rate must be finite and >= 0");
  }
  if (config.kind == OptimizerKind::sgd) {
    return std::make_unique<Sgd>(config.learning_rate);
  }
  return std::make_unique<Adam>(config, num_parameters);
}

void Sgd::step(Vector& theta, const Vector& gradient) {
  theta -= lr_ * gradient;
}

Adam::Adam(const OptimizerConfig& config, Index num_parameters)
    : cfg_(config),
      m_(Vector::Zero(num_parameters)),
      v_(Vector::Zero(num_parameters)) {
  if (!(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0 && cfg_.beta2 >= 0.0 &&
        cfg_.beta2 < 1.0 && cfg_.epsilon > 0.0)) {
    throw std::invalid_argument("adam: betas must lie in [0, 1) and epsilon > 0");
  }
}

void Adam::step(Vector& theta, const Vector& gradient) {
  beta1_power_ *= cfg_.beta1;
  beta2_power_ *= cfg_.beta2;
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * gradient;
  v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * gradient.cwiseAbs2();
  const double c1 = 1.0 / (1.0 - beta1_power_);
  const double c2 = 1.0 / (1.0 - beta2_power_);
  theta.array() -= cfg_.learning_rate * (c1 * m_.array()) /
                   ((c2 * v_.array()).sqrt() + cfg_.epsilon);
}

// ---------------------------------------------------------------------------
// Batches

BatchSource BatchSource::from_dataset(Matrix data, double validation_fraction,
                                      std::uint64_t seed) {
  if (data.rows() < 1) throw std::invalid_argument("BatchSource: empty dataset");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw std::invalid_argument("BatchSource: validation fraction must be in [0, 1)");
  }
  const Index n = data.rows();
  const Index n_val = std::min<Index>(
      n - 1, static_cast<Index>(std::floor(validation_fraction * static_cast<double>(n))));
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  SplitMix64 g = make_stream(seed, {kSplitTag});
  std::shuffle(order.begin(), order.end(), g);

  BatchSource out;
  out.dim_ = data.cols();
  out.seed_ = seed;
  out.train_.resize(n - n_val, data.cols());
  out.validation_.resize(n_val, data.cols());
  for (Index i = 0; i < n - n_val; ++i) out.train_.row(i) = data.row(order[i]);
  for (Index i = 0; i < n_val; ++i) out.validation_.row(i) = data.row(order[n - n_val + i]);
  return out;
}

BatchSource BatchSource::from_generator(Generator generator, Index dim,
                                        Index validation_size,
                                        std::uint64_t seed) {
  BatchSource out;
  out.dim_ = dim;
  out.seed_ = seed;
  out.generator_ = std::move(generator);
  out.validation_ = validation_size > 0
                        ? out.generator_(validation_size, mix_seed(seed, {kValidationTag}))
                        : Matrix(0, dim);
  return out;
}

Matrix BatchSource::batch(Index n, std::uint64_t step) const {
  if (n < 1) throw std::invalid_argument("BatchSource: batch size must be >= 1");
  if (generator_) return generator_(n, mix_seed(seed_, {kBatchTag, step}));
  SplitMix64 g = make_stream(seed_, {kBatchTag, step});
  std::uniform_int_distribution<Index> pick(0, train_.rows() - 1);
  Matrix out(n, dim_);
  for (Index i = 0; i < n; ++i) out.row(i) = train_.row(pick(g));
  return out;
}

// ---------------------------------------------------------------------------
// Reports

TrainingDiverged::TrainingDiverged(Index step, const std::string& what)
    : std::runtime_error("training diverged at step " + std::to_string(step) +
                         ": " + what),
      step_(step) {}

nlohmann::json TrainReport::to_json() const {
  nlohmann::json curve_json = nlohmann::json::array();
  for (const CurvePoint& p : curve) {
    curve_json.push_back({{"step", p.step},
                          {"train", p.train},
                          {"val", std::isfinite(p.validation)
                                      ? nlohmann::json(p.validation)
                                      : nlohmann::json(nullptr)}});
  }
  return {{"initial_parameters", std::vector<double>(initial_parameters.begin(),
                                                     initial_parameters.end())},
          {"final_parameters", std::vector<double>(final_parameters.begin(),
                                                   final_parameters.end())},
          {"steps_run", steps_run},
          {"stopped_early", stopped_early},
          {"best_validation", std::isfinite(best_validation)
                                  ? nlohmann::json(best_validation)
                                  : nlohmann::json(nullptr)},
          {"seconds_total", seconds_total},
          {"seconds_per_step", seconds_per_step},
          {"backward_passes", backward_passes},
          {"projection_resampling", projection_resampling},
          {"curve", curve_json}};
}

std::string TrainReport::curve_csv() const {
  std::string out = "step,train,val\n";
  for (const CurvePoint& p : curve) {
    out += std::to_string(p.step) + "," + format_double(p.train) + "," +
           (std::isfinite(p.validation) ? format_double(p.validation) : "") + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

ObjectiveEstimate evaluate_objective(const ScoreField& field,
                                     const Matrix& batch,
                                     const ObjectiveSpec& spec,
                                     std::uint64_t stream,
                                     EvalOptions options) {
  switch (spec.kind) {
    case ObjectiveKind::sm_exact:
      return sm_exact(field, batch, options);
    case ObjectiveKind::dsm:
      return dsm(field, batch, {spec.dsm_sigma}, mix_seed(spec.sampler.seed, {stream}),
                 options);
    default:
      break;
  }
  ProjectionSampler sampler = spec.sampler;
  sampler.dim = field.dim();
  const ProjectionBlock block =
      sample_projections(sampler, batch.rows(), spec.projections, stream);
  if (spec.kind == ObjectiveKind::ssm) return ssm(field, batch, block, options);
  if (spec.kind == ObjectiveKind::ssm_vr) return ssm_vr(field, batch, block, options);
  return ssm_cv(field, batch, block, spec.cv, options);
}

TrainReport train(const ScoreField& field, const BatchSource& data,
                  const TrainConfig& config) {
  if (config.batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
  if (config.steps < 0) throw std::invalid_argument("train: steps must be >= 0");
  if (config.eval_every < 1) throw std::invalid_argument("train: eval_every must be >= 1");
  if (data.dim() != field.dim()) {
    throw ShapeError("train: data dimension does not match the model");
  }
  if (is_sliced(config.objective.kind) && config.objective.projections < 1) {
    throw std::invalid_argument("train: projections must be >= 1");
  }

  ObjectiveSpec spec = config.objective;
  spec.sampler.seed = mix_seed(config.seed, {spec.sampler.seed});
  const Index n_val = std::min(data.validation().rows(), config.max_validation);
  const Matrix validation = data.validation().topRows(n_val);
  const std::uint64_t val_stream = mix_seed(config.seed, {kValidationTag});

  TrainReport report;
  report.initial_parameters = field.parameters();
  Vector theta = field.parameters();
  auto optimizer = Optimizer::make(config.optimizer, theta.size());

  Index since_best = 0;
  const auto start = std::chrono::steady_clock::now();
  for (Index step = 0; step < config.steps; ++step) {
    const Matrix batch = data.batch(config.batch_size, static_cast<std::uint64_t>(step));
    const ScoreField current = field.with_parameters(theta);
    const std::uint64_t stream = mix_seed(config.seed, {kStepTag, static_cast<std::uint64_t>(step)});
    const ObjectiveEstimate est =
        evaluate_objective(current, batch, spec, stream, {true});
    report.backward_passes += est.backward_passes;
    if (!std::isfinite(est.value)) {
      throw TrainingDiverged(step, "objective is " + format_double(est.value));
    }
    if (!est.gradient.allFinite()) {
      throw TrainingDiverged(step, "gradient is not finite");
    }
    optimizer->step(theta, est.gradient);
    if (!theta.allFinite()) throw TrainingDiverged(step, "parameters are not finite");
    report.steps_run = step + 1;

    const bool last = step + 1 == config.steps;
    if ((step + 1) % config.eval_every != 0 && !last) continue;
    CurvePoint point{step, est.value};
    if (n_val > 0) {
      point.validation =
          evaluate_objective(field.with_parameters(theta), validation, spec, val_stream)
              .value;
      if (!std::isfinite(point.validation)) {
        throw TrainingDiverged(step, "validation loss is not finite");
      }
      if (point.validation < report.best_validation) {
        report.best_validation = point.validation;
        since_best = 0;
      } else {
        ++since_best;
      }
    }
    report.curve.push_back(point);
    if (config.patience > 0 && since_best >= config.patience) {
      report.stopped_early = !last;
      break;
    }
  }
  const auto stop = std::chrono::steady_clock::now();
  report.seconds_total = std::chrono::duration<double>(stop - start).count();
  report.seconds_per_step =
      report.steps_run > 0 ? report.seconds_total / static_cast<double>(report.steps_run) : 0.0;
  report.final_parameters = theta;
  return report;
}

// ---------------------------------------------------------------------------
// Kernel exponential family

QuadraticObjective kef_quadratic(const KefModel& kef, const Matrix& batch,
                                 const ProjectionBlock& projections) {
  const Index n = batch.rows();
  const Index l = kef.num_inducing();
  if (batch.cols() != kef.dim() || n == 0) {
    throw ShapeError("kef_quadratic: batch does not match model dimension");
  }
  if (projections.samples() != n || projections.dim() != kef.dim() ||
      projections.projections() < 1) {
    throw ShapeError("kef_quadratic: projection block does not match batch");
  }
  const bool analytic = !kef.features().has_value();
  const double base_curv = -1.0 / (kef.base_scale() * kef.base_scale());

  QuadraticObjective q{Matrix::Zero(l, l), Vector::Zero(l), 0.0};
  Vector w(l);
  for (Index i = 0; i < n; ++i) {
    const Vector x = batch.row(i).transpose();
    const Vector base = kef.base_score(x);
    for (const Matrix& slice : projections.slices) {
      const Vector v = slice.row(i).transpose();
      const double vb = v.dot(base);
      for (Index k = 0; k < l; ++k) {
        const Vector z = kef.inducing_points().row(k).transpose();
        const KernelDerivatives kd = analytic ? kernel_derivatives(kef, x, z, v)
                                              : kernel_derivatives_autodiff(kef, x, z, v);
        w(k) = kd.directional;
        q.linear(k) += kd.curvature + vb * kd.directional;
      }
      q.hessian.noalias() += w * w.transpose();
      q.constant += base_curv * v.squaredNorm() + 0.5 * vb * vb;
    }
  }
  const double inv = 1.0 / static_cast<double>(n * projections.projections());
  q.hessian *= inv;
  q.linear *= inv;
  q.constant *= inv;
  return q;
}

Vector fit_kef_alpha(const KefModel& kef, const Matrix& batch,
                     const ProjectionBlock& projections, double lambda_alpha) {
  if (!(lambda_alpha > 0.0)) {
    throw std::invalid_argument("fit_kef_alpha: lambda_alpha must be > 0");
  }
  const QuadraticObjective q = kef_quadratic(kef, batch, projections);
  const Matrix system =
      q.hessian + lambda_alpha * Matrix::Identity(q.hessian.rows(), q.hessian.cols());
  Eigen::LLT<Matrix> llt(system);
  if (llt.info() != Eigen::Success || llt.rcond() < 1e-14) {
    throw std::runtime_error(
        "fit_kef_alpha: G + lambda I is numerically singular (duplicated "
        "inducing points or lambda too small)");
  }
  return -llt.solve(q.linear);
}

// ---------------------------------------------------------------------------
// Evaluation

const char* to_string(EvalMetric metric) {
  switch (metric) {
    case EvalMetric::sm_exact: return "sm_exact";
    case EvalMetric::ssm_vr: return "ssm_vr";
    case EvalMetric::sliced_fisher_exact: return "sliced_fisher_exact";
  }
  return "?";
}

EvalMetric eval_metric_from_string(const std::string& name) {
  if (name == "sm_exact" || name == "sm") return EvalMetric::sm_exact;
  if (name == "ssm_vr") return EvalMetric::ssm_vr;
  if (name == "sliced_fisher_exact") return EvalMetric::sliced_fisher_exact;
  throw std::invalid_argument("unknown metric '" + name + "'");
}

double evaluate(const ScoreField& field, const Matrix& test_batch,
                const EvalConfig& config) {
  if (config.metric == EvalMetric::sm_exact) return sm_exact(field, test_batch).value;
  ProjectionSampler sampler = config.sampler;
  sampler.dim = field.dim();
  const ProjectionBlock block =
      sample_projections(sampler, test_batch.rows(), config.projections, config.stream);
  if (config.metric == EvalMetric::ssm_vr) return ssm_vr(field, test_batch, block).value;
  if (!config.data_score) {
    throw std::invalid_argument("evaluate: sliced_fisher_exact needs a data score");
  }
  return sliced_fisher_exact(field, config.data_score, test_batch, block);
}

}  // namespace ssm
