#include "ssm/score_estimation.hpp"

#include <cmath>

namespace ssm {

ScoreFit fit_score_network(const BatchSource& samples,
                           const ScoreEstimatorConfig& config) {
  return fit_score_network(ScoreNetwork::random(samples.dim(), config.seed, config.hidden,
                                                config.activation),
                           samples, config);
}

ScoreFit fit_score_network(const ScoreNetwork& init, const BatchSource& samples,
                           const ScoreEstimatorConfig& config) {
  if (init.dim() != samples.dim()) {
    throw ShapeError("fit_score_network: network and data dimensions differ");
  }
  if (config.objective != ObjectiveKind::ssm && config.objective != ObjectiveKind::ssm_vr &&
      config.objective != ObjectiveKind::ssm_cv) {
    throw std::invalid_argument("fit_score_network: objective must be a sliced objective");
  }
  TrainConfig train_cfg;
  train_cfg.objective.kind = config.objective;
  train_cfg.objective.sampler = config.sampler;
  train_cfg.objective.projections = config.projections;
  train_cfg.optimizer = config.optimizer;
  train_cfg.batch_size = config.batch_size;
  train_cfg.steps = config.steps;
  train_cfg.seed = config.seed;
  train_cfg.eval_every = config.eval_every;
  train_cfg.patience = config.patience;
  TrainReport report = train(score_field(init), samples, train_cfg);
  ScoreNetwork network = init.with_parameters(report.final_parameters);
  return {std::move(network), std::move(report)};
}

Vector EntropyGradEstimate::gradient() const {
  Vector out(mean.size() + log_scale.size());
  out << mean, log_scale;
  return out;
}

EntropyGradEstimate entropy_gradient(const ReparamGaussian& dist,
                                     const ScoreField& score, Index n,
                                     std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("entropy_gradient: need at least 2 samples");
  if (score.dim() != dist.dim()) {
    throw ShapeError("entropy_gradient: score and distribution dimensions differ");
  }
  const Matrix eps = dist.noise(n, seed);
  const Matrix s = score.value(dist.transform(eps));

  // One copy of the parameters per sample so a single backward pass yields
  // every per-sample gradient.
  ad::Tape tape;
  const Var mean = tape.leaf_matrix(dist.mean().transpose().replicate(n, 1));
  const Var log_scale = tape.leaf_matrix(dist.log_scale().transpose().replicate(n, 1));
  const Var x = ReparamGaussian::transform(mean, log_scale, tape.constant_matrix(eps));
  const Var objective = -ad::sum(ad::mul(tape.constant_matrix(s), x));
  const Var parts[] = {mean, log_scale};
  const std::vector<Var> grads = tape.grad(objective, parts);

  EntropyGradEstimate out;
  out.samples = n;
  auto summarize = [n](const Matrix& per_sample, Vector& avg, Vector& se) {
    avg = per_sample.colwise().mean().transpose();
    const Matrix centered = per_sample.rowwise() - avg.transpose();
    const Vector var = centered.colwise().squaredNorm().transpose() / static_cast<double>(n - 1);
    se = (var / static_cast<double>(n)).cwiseSqrt();
  };
  summarize(grads[0].value(), out.mean, out.mean_standard_error);
  summarize(grads[1].value(), out.log_scale, out.log_scale_standard_error);
  return out;
}

double score_error(const ScoreField& score, const VectorFieldFn& oracle,
                   const Matrix& test_batch) {
  if (test_batch.rows() == 0) throw std::invalid_argument("score_error: empty batch");
  const Matrix diff = score.value(test_batch) - oracle(test_batch);
  return diff.rowwise().squaredNorm().mean();
}

}  // namespace ssm
