#include "ssm/gaussian_fit.hpp"

#include <cmath>

namespace ssm {

namespace {

// Upper-triangle pairs (p, q), p <= q, row by row.
std::vector<std::pair<Index, Index>> upper_pairs(Index d) {
  std::vector<std::pair<Index, Index>> out;
  for (Index p = 0; p < d; ++p)
    for (Index q = p; q < d; ++q) out.emplace_back(p, q);
  return out;
}

// Phi(x) with s(x) = Phi(x) phi. Columns for precision entries hold
// -E_pq (x - m0) (m0 = known mean, or 0 for the full family); columns for eta
// hold unit vectors.
Matrix feature_matrix(const GaussianFamily& family,
                      const std::vector<std::pair<Index, Index>>& pairs,
                      const Vector& x) {
  const Index d = family.dim;
  const Vector c = family.known_mean ? Vector(x - *family.known_mean) : x;
  Matrix phi = Matrix::Zero(d, family.num_natural_parameters());
  Index k = 0;
  for (const auto& [p, q] : pairs) {
    phi(p, k) -= c(q);
    if (p != q) phi(q, k) -= c(p);
    ++k;
  }
  if (!family.known_mean) phi.rightCols(d) = Matrix::Identity(d, d);
  return phi;
}

// a with v^T grad s v = a . phi: -v_p^2 on diagonal entries, -2 v_p v_q off it.
Vector curvature_row(const GaussianFamily& family,
                     const std::vector<std::pair<Index, Index>>& pairs,
                     const Vector& v) {
  Vector a = Vector::Zero(family.num_natural_parameters());
  Index k = 0;
  for (const auto& [p, q] : pairs) {
    a(k++) = (p == q) ? -v(p) * v(p) : -2.0 * v(p) * v(q);
  }
  return a;
}

}  // namespace

Index GaussianFamily::num_natural_parameters() const {
  return num_precision_entries() + (known_mean ? 0 : dim);
}

Vector natural_parameters(const GaussianFamily& family, const Matrix& precision,
                          const Vector& mean) {
  Vector phi(family.num_natural_parameters());
  Index k = 0;
  for (const auto& [p, q] : upper_pairs(family.dim)) phi(k++) = precision(p, q);
  if (!family.known_mean) phi.tail(family.dim) = precision * mean;
  return phi;
}

std::pair<Matrix, Vector> moments_from_natural(const GaussianFamily& family,
                                               const Vector& phi) {
  const Index d = family.dim;
  Matrix precision(d, d);
  Index k = 0;
  for (const auto& [p, q] : upper_pairs(d)) {
    precision(p, q) = phi(k);
    precision(q, p) = phi(k);
    ++k;
  }
  Vector mean = family.known_mean
                    ? *family.known_mean
                    : Vector(precision.ldlt().solve(phi.tail(d)));
  return {precision, mean};
}

QuadraticObjective gaussian_quadratic(const GaussianFamily& family,
                                      const Matrix& batch,
                                      const ObjectiveSpec& spec,
                                      const ProjectionBlock* projections,
                                      std::uint64_t seed) {
  const Index n = batch.rows();
  const Index d = family.dim;
  if (batch.cols() != d || n == 0) {
    throw ShapeError("gaussian_quadratic: batch does not match family dimension");
  }
  const Index p = family.num_natural_parameters();
  const auto pairs = upper_pairs(d);
  QuadraticObjective q{Matrix::Zero(p, p), Vector::Zero(p), 0.0};

  const bool sliced = spec.kind == ObjectiveKind::ssm ||
                      spec.kind == ObjectiveKind::ssm_vr ||
                      spec.kind == ObjectiveKind::ssm_cv;
  if (sliced) {
    if (projections == nullptr || projections->samples() != n ||
        projections->dim() != d) {
      throw ShapeError("gaussian_quadratic: projection block does not match batch");
    }
    if (spec.kind != ObjectiveKind::ssm && !projections->identity_moment) {
      throw PreconditionError(std::string(to_string(spec.kind)) +
                              " requires projections with E[v v^T] = I");
    }
  }

  if (spec.kind == ObjectiveKind::dsm) {
    if (!(spec.dsm_sigma > 0.0)) throw std::invalid_argument("dsm: sigma must be > 0");
    const double s2 = spec.dsm_sigma * spec.dsm_sigma;
    const Matrix noisy = dsm_perturb(batch, spec.dsm_sigma, seed);
    for (Index i = 0; i < n; ++i) {
      const Matrix phi = feature_matrix(family, pairs, noisy.row(i).transpose());
      const Vector t = (batch.row(i) - noisy.row(i)).transpose() * (1.0 / s2);
      q.hessian.noalias() += phi.transpose() * phi;
      q.linear.noalias() -= phi.transpose() * t;
      q.constant += 0.5 * t.squaredNorm();
    }
  } else {
    const double inv_m =
        sliced ? 1.0 / static_cast<double>(projections->projections()) : 1.0;
    for (Index i = 0; i < n; ++i) {
      const Vector x = batch.row(i).transpose();
      const Matrix phi = feature_matrix(family, pairs, x);
      double beta = spec.kind == ObjectiveKind::ssm_vr ? 1.0 : 0.0;
      if (spec.kind == ObjectiveKind::ssm_cv) {
        beta = spec.cv.beta ? spec.cv.beta(x) : 1.0;
      }
      if (spec.kind == ObjectiveKind::sm_exact) {
        for (Index k = 0; k < static_cast<Index>(pairs.size()); ++k) {
          if (pairs[static_cast<std::size_t>(k)].first ==
              pairs[static_cast<std::size_t>(k)].second) {
            q.linear(k) -= 1.0;
          }
        }
        q.hessian.noalias() += phi.transpose() * phi;
        continue;
      }
      for (const Matrix& slice : projections->slices) {
        const Vector v = slice.row(i).transpose();
        q.linear += inv_m * curvature_row(family, pairs, v);
        if (beta != 1.0) {
          const Vector w = phi.transpose() * v;
          q.hessian.noalias() += ((1.0 - beta) * inv_m) * (w * w.transpose());
        }
      }
      if (beta != 0.0) q.hessian.noalias() += beta * (phi.transpose() * phi);
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  q.hessian *= inv_n;
  q.linear *= inv_n;
  q.constant *= inv_n;
  return q;
}

Vector gaussian_theta(const GaussianFamily& family, const Matrix& precision,
                      const Vector& mean) {
  const Index e = family.num_precision_entries();
  Vector theta(e + (family.known_mean ? 0 : family.dim));
  Index k = 0;
  for (const auto& [p, q] : upper_pairs(family.dim)) theta(k++) = precision(p, q);
  if (!family.known_mean) theta.tail(family.dim) = mean;
  return theta;
}

Vector GaussianEstimate::theta(const GaussianFamily& family) const {
  return gaussian_theta(family, precision, mean);
}

GaussianEstimate fit_gaussian_closed_form(const GaussianFamily& family,
                                          const Matrix& batch,
                                          const ObjectiveSpec& spec,
                                          std::uint64_t seed) {
  std::optional<ProjectionBlock> block;
  if (spec.kind != ObjectiveKind::sm_exact && spec.kind != ObjectiveKind::dsm) {
    ProjectionSampler sampler = spec.sampler;
    sampler.dim = family.dim;
    block = sample_projections(sampler, batch.rows(), spec.projections, seed);
  }
  const QuadraticObjective q =
      gaussian_quadratic(family, batch, spec, block ? &*block : nullptr, seed);

  GaussianEstimate out;
  Eigen::LDLT<Matrix> ldlt(q.hessian);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      ldlt.rcond() < 1e-12) {
    out.failure = "objective Hessian is singular";
    return out;
  }
  out.natural = -ldlt.solve(q.linear);
  std::tie(out.precision, out.mean) = moments_from_natural(family, out.natural);
  if (!out.natural.allFinite() ||
      Eigen::LLT<Matrix>(out.precision).info() != Eigen::Success) {
    out.failure = "minimizer precision is not positive definite";
    return out;
  }
  out.ok = true;
  return out;
}

}  // namespace ssm
