#include "ssm/objectives.hpp"

#include <cmath>
#include <random>

#include "ssm/random.hpp"

namespace ssm {

using ad::Tape;

namespace {

constexpr std::uint64_t kDsmNoiseTag = 0xD5D5;

void check_batch(const ScoreField& score, const Matrix& batch,
                 const char* name) {
  if (batch.rows() == 0) {
    throw ShapeError(std::string(name) + ": empty batch");
  }
  if (batch.cols() != score.dim()) {
    throw ShapeError(std::string(name) + ": batch has " +
                     std::to_string(batch.cols()) + " columns, model dim is " +
                     std::to_string(score.dim()));
  }
}

void check_projections(const ProjectionBlock& p, const Matrix& batch,
                       const char* name) {
  if (p.projections() == 0) {
    throw ShapeError(std::string(name) + ": no projections");
  }
  for (const Matrix& slice : p.slices) {
    if (slice.rows() != batch.rows() || slice.cols() != batch.cols()) {
      throw ShapeError(std::string(name) + ": projection slice [" +
                       std::to_string(slice.rows()) + "," +
                       std::to_string(slice.cols()) + "] does not match batch [" +
                       std::to_string(batch.rows()) + "," +
                       std::to_string(batch.cols()) + "]");
    }
  }
}

void require_identity_moment(const ProjectionBlock& p, const char* name) {
  if (!p.identity_moment) {
    throw PreconditionError(
        std::string(name) +
        " requires projections with E[v v^T] = I; unscaled sphere "
        "projections have E[v v^T] = I/D (enable scale_to_identity)");
  }
}

// Builds per-sample values ([N]) on a fresh tape and packages the estimate.
template <class Build>
ObjectiveEstimate evaluate(const ScoreField& score, const Matrix& input,
                           const EvalOptions& options, Build&& build) {
  Tape tape;
  const Var x = tape.leaf_matrix(input);
  const Var theta = options.with_gradient ? tape.leaf(score.parameters())
                                          : tape.constant(score.parameters());
  tape.reset_backward_passes();
  const BoundScore s = score.bind(x, theta);
  const Var per_sample = build(tape, s, options.with_gradient);

  ObjectiveEstimate out;
  out.backward_passes = tape.backward_passes();
  out.per_sample = per_sample.vector();
  out.value = out.per_sample.mean();
  if (options.with_gradient) {
    const Var mean = ad::scale(ad::sum(per_sample),
                               1.0 / static_cast<double>(input.rows()));
    out.gradient = tape.grad(mean, theta).vector();
  }
  return out;
}

enum class SlicedForm { plain, variance_reduced, control_variate };

// h_i = mean_j v_ij . J v_ij, c_i = mean_j 1/2 (v_ij . s_i)^2, q_i = 1/2 |s_i|^2.
// plain: h + c; variance_reduced: h + q; control_variate: h + (1-b) c + b q.
// The shared grouping makes beta = 0 and beta = 1 reproduce the other two
// forms bit for bit.
Var sliced_terms(Tape& tape, const BoundScore& s, const ProjectionBlock& p,
                 bool differentiable, SlicedForm form, const Vector& beta) {
  const double inv_m = 1.0 / static_cast<double>(p.projections());
  Var h;
  Var c;
  for (const Matrix& slice : p.slices) {
    const Var v = tape.constant_matrix(slice);
    const Var jv = s.directional_jacobian(v, differentiable);
    const Var hj = ad::sum_axis1(ad::mul(v, jv));
    h = h.valid() ? ad::add(h, hj) : hj;
    if (form != SlicedForm::variance_reduced) {
      const Var cj =
          ad::scale(ad::square(ad::sum_axis1(ad::mul(v, s.value()))), 0.5);
      c = c.valid() ? ad::add(c, cj) : cj;
    }
  }
  h = ad::scale(h, inv_m);
  if (form == SlicedForm::plain) return ad::add(h, ad::scale(c, inv_m));

  const Var q = ad::scale(ad::sum_axis1(ad::square(s.value())), 0.5);
  if (form == SlicedForm::variance_reduced) return ad::add(h, q);

  c = ad::scale(c, inv_m);
  const Var b = tape.constant(beta);
  const Var one_minus_b = tape.constant(Vector((1.0 - beta.array()).matrix()));
  return ad::add(ad::add(h, ad::mul(one_minus_b, c)), ad::mul(b, q));
}

}  // namespace

const char* to_string(ProjectionKind kind) {
  switch (kind) {
    case ProjectionKind::gaussian: return "gaussian";
    case ProjectionKind::rademacher: return "rademacher";
    case ProjectionKind::sphere: return "sphere";
  }
  return "?";
}

ProjectionKind projection_kind_from_string(const std::string& name) {
  if (name == "gaussian") return ProjectionKind::gaussian;
  if (name == "rademacher") return ProjectionKind::rademacher;
  if (name == "sphere") return ProjectionKind::sphere;
  throw std::invalid_argument("unknown sampler '" + name +
                              "' (expected gaussian, rademacher or sphere)");
}

bool ProjectionSampler::identity_second_moment() const {
  return kind != ProjectionKind::sphere || scale_to_identity;
}

double ProjectionSampler::second_moment_scale() const {
  return identity_second_moment() ? 1.0 : 1.0 / static_cast<double>(dim);
}

ProjectionBlock ProjectionBlock::scaled(double factor) const {
  ProjectionBlock out = *this;
  for (Matrix& slice : out.slices) slice *= factor;
  out.identity_moment = identity_moment && factor == 1.0;
  return out;
}

ProjectionBlock sample_projections(const ProjectionSampler& sampler, Index n,
                                   Index m, std::uint64_t stream) {
  if (n < 1 || m < 1) {
    throw std::invalid_argument("sample_projections: n and m must be >= 1");
  }
  if (sampler.dim < 1) {
    throw std::invalid_argument("sample_projections: dimension must be >= 1");
  }
  const Index d = sampler.dim;
  const double sphere_scale =
      sampler.scale_to_identity ? std::sqrt(static_cast<double>(d)) : 1.0;

  ProjectionBlock block;
  block.kind = sampler.kind;
  block.identity_moment = sampler.identity_second_moment();
  block.slices.assign(static_cast<std::size_t>(m), Matrix(n, d));
  for (Index j = 0; j < m; ++j) {
    Matrix& slice = block.slices[static_cast<std::size_t>(j)];
    for (Index i = 0; i < n; ++i) {
      SplitMix64 g = make_stream(sampler.seed,
                                 {stream, static_cast<std::uint64_t>(i),
                                  static_cast<std::uint64_t>(j)});
      switch (sampler.kind) {
        case ProjectionKind::rademacher: {
          std::uint64_t bits = 0;
          for (Index k = 0; k < d; ++k) {
            if (k % 64 == 0) bits = g();
            slice(i, k) = (bits & 1U) ? 1.0 : -1.0;
            bits >>= 1;
          }
          break;
        }
        case ProjectionKind::gaussian: {
          std::normal_distribution<double> normal;
          for (Index k = 0; k < d; ++k) slice(i, k) = normal(g);
          break;
        }
        case ProjectionKind::sphere: {
          std::normal_distribution<double> normal;
          double norm = 0.0;
          do {
            for (Index k = 0; k < d; ++k) slice(i, k) = normal(g);
            norm = slice.row(i).norm();
          } while (norm == 0.0);
          slice.row(i) *= sphere_scale / norm;
          break;
        }
      }
    }
  }
  return block;
}

ObjectiveEstimate ssm(const ScoreField& score, const Matrix& batch,
                      const ProjectionBlock& projections,
                      EvalOptions options) {
  check_batch(score, batch, "ssm");
  check_projections(projections, batch, "ssm");
  ObjectiveEstimate out = evaluate(
      score, batch, options, [&](Tape& tape, const BoundScore& s, bool diff) {
        return sliced_terms(tape, s, projections, diff, SlicedForm::plain, {});
      });
  out.projections_used = projections.projections();
  return out;
}

ObjectiveEstimate ssm_vr(const ScoreField& score, const Matrix& batch,
                         const ProjectionBlock& projections,
                         EvalOptions options) {
  check_batch(score, batch, "ssm_vr");
  check_projections(projections, batch, "ssm_vr");
  require_identity_moment(projections, "ssm_vr");
  ObjectiveEstimate out = evaluate(
      score, batch, options, [&](Tape& tape, const BoundScore& s, bool diff) {
        return sliced_terms(tape, s, projections, diff,
                            SlicedForm::variance_reduced, {});
      });
  out.projections_used = projections.projections();
  return out;
}

ObjectiveEstimate ssm_cv(const ScoreField& score, const Matrix& batch,
                         const ProjectionBlock& projections,
                         const ControlVariateConfig& cv,
                         EvalOptions options) {
  check_batch(score, batch, "ssm_cv");
  check_projections(projections, batch, "ssm_cv");
  require_identity_moment(projections, "ssm_cv");
  Vector beta(batch.rows());
  for (Index i = 0; i < batch.rows(); ++i) {
    beta[i] = cv.beta ? cv.beta(batch.row(i).transpose()) : 1.0;
  }
  ObjectiveEstimate out = evaluate(
      score, batch, options, [&](Tape& tape, const BoundScore& s, bool diff) {
        return sliced_terms(tape, s, projections, diff,
                            SlicedForm::control_variate, beta);
      });
  out.projections_used = projections.projections();
  return out;
}

ObjectiveEstimate sm_exact(const ScoreField& score, const Matrix& batch,
                           EvalOptions options) {
  check_batch(score, batch, "sm_exact");
  return evaluate(score, batch, options,
                  [&](Tape&, const BoundScore& s, bool diff) {
                    const Var trace = ad::sum_axis1(s.jacobian_diagonal(diff));
                    const Var q =
                        ad::scale(ad::sum_axis1(ad::square(s.value())), 0.5);
                    return ad::add(trace, q);
                  });
}

ObjectiveEstimate dsm(const ScoreField& score, const Matrix& batch,
                      const DsmConfig& config, std::uint64_t seed,
                      EvalOptions options) {
  check_batch(score, batch, "dsm");
  if (!(config.sigma > 0.0)) {
    throw std::invalid_argument("dsm: sigma must be > 0");
  }
  const double sigma = config.sigma;
  const Matrix noisy = dsm_perturb(batch, sigma, seed);
  const Matrix target = (batch - noisy) * (1.0 / (sigma * sigma));
  return evaluate(score, noisy, options,
                  [&](Tape& tape, const BoundScore& s, bool) {
                    const Var diff =
                        ad::sub(s.value(), tape.constant_matrix(target));
                    return ad::scale(ad::sum_axis1(ad::square(diff)), 0.5);
                  });
}

Matrix dsm_perturb(const Matrix& batch, double sigma, std::uint64_t seed) {
  return batch + sigma * standard_normal(batch.rows(), batch.cols(), seed,
                                         kDsmNoiseTag);
}

double sliced_fisher_exact(const ScoreField& score,
                           const VectorFieldFn& data_score, const Matrix& batch,
                           const ProjectionBlock& projections) {
  check_batch(score, batch, "sliced_fisher_exact");
  check_projections(projections, batch, "sliced_fisher_exact");
  const Matrix diff = score.value(batch) - data_score(batch);
  double total = 0.0;
  for (const Matrix& slice : projections.slices) {
    total += 0.5 * (slice.cwiseProduct(diff).rowwise().sum()).squaredNorm();
  }
  return total / static_cast<double>(batch.rows() * projections.projections());
}

Vector hutchinson_samples(const std::function<Vector(const Vector&)>& apply,
                          Index dim, const ProjectionSampler& sampler,
                          Index m) {
  if (!sampler.identity_second_moment()) {
    throw PreconditionError(
        "hutchinson_trace requires a sampler with E[v v^T] = I");
  }
  ProjectionSampler s = sampler;
  s.dim = dim;
  const Matrix vs = sample_projections(s, m, 1).slices.front();
  Vector out(m);
  for (Index j = 0; j < m; ++j) {
    const Vector v = vs.row(j).transpose();
    out[j] = v.dot(apply(v));
  }
  return out;
}

double hutchinson_trace(const std::function<Vector(const Vector&)>& apply,
                        Index dim, const ProjectionSampler& sampler, Index m) {
  return hutchinson_samples(apply, dim, sampler, m).mean();
}

const char* to_string(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::sm_exact: return "sm_exact";
    case ObjectiveKind::ssm: return "ssm";
    case ObjectiveKind::ssm_vr: return "ssm_vr";
    case ObjectiveKind::ssm_cv: return "ssm_cv";
    case ObjectiveKind::dsm: return "dsm";
  }
  return "?";
}

ObjectiveKind objective_kind_from_string(const std::string& name) {
  if (name == "sm_exact" || name == "sm") return ObjectiveKind::sm_exact;
  if (name == "ssm") return ObjectiveKind::ssm;
  if (name == "ssm_vr") return ObjectiveKind::ssm_vr;
  if (name == "ssm_cv") return ObjectiveKind::ssm_cv;
  if (name == "dsm") return ObjectiveKind::dsm;
  throw std::invalid_argument("unknown objective '" + name + "'");
}

}  // namespace ssm
