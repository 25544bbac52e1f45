#include "ssm/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "ssm/parallel.hpp"
#include "ssm/random.hpp"

namespace ssm {

namespace {

constexpr std::uint64_t kDataTag = 0x64617461ULL;
constexpr std::uint64_t kFitTag = 0x666974ULL;

double median(std::vector<double> xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t mid = xs.size() / 2;
  std::nth_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(mid), xs.end());
  const double upper = xs[mid];
  if (xs.size() % 2 == 1) return upper;
  return 0.5 * (upper + *std::max_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(mid)));
}

// Welford's update keeps the variance of a constant sequence exactly zero.
double sample_variance(const std::vector<double>& xs) {
  double mean = 0.0, ss = 0.0, k = 0.0;
  for (double x : xs) {
    k += 1.0;
    const double delta = x - mean;
    mean += delta / k;
    ss += delta * (x - mean);
  }
  return ss / (k - 1.0);
}

nlohmann::json json_number(double x) {
  return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr);
}

nlohmann::json json_matrix(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace

double simpson(const std::function<double(double)>& f, double a, double b,
               Index nodes) {
  if (nodes < 3 || nodes % 2 == 0) {
    throw std::invalid_argument("simpson: node count must be odd and >= 3");
  }
  if (!(b > a)) throw std::invalid_argument("simpson: empty interval");
  const Index intervals = nodes - 1;
  const double h = (b - a) / static_cast<double>(intervals);
  double odd = 0.0, even = 0.0;
  for (Index k = 1; k < intervals; ++k) {
    const double fx = f(a + h * static_cast<double>(k));
    (k % 2 == 1 ? odd : even) += fx;
  }
  const double total = (f(a) + f(b) + 4.0 * odd + 2.0 * even) * h / 3.0;
  if (!std::isfinite(total)) throw std::runtime_error("simpson: integral is not finite");
  return total;
}

// ---------------------------------------------------------------------------
// Integration by parts

nlohmann::json IntegrationByPartsCheck::to_json() const {
  return {{"check", "integration-by-parts"},
          {"sampler", to_string(sampler)},
          {"nodes", nodes},
          {"precisions", precisions},
          {"fisher", fisher},
          {"objective", objective},
          {"constant", constant},
          {"deviation", deviation}};
}

IntegrationByPartsCheck check_integration_by_parts(const std::vector<double>& precisions,
                                                   ProjectionKind sampler, Index nodes,
                                                   double data_sd) {
  if (precisions.empty()) throw std::invalid_argument("integration by parts: empty grid");
  if (!(data_sd > 0.0)) throw std::invalid_argument("integration by parts: data_sd must be > 0");
  const double var = data_sd * data_sd;
  const double norm = 1.0 / (data_sd * std::sqrt(2.0 * std::numbers::pi));
  auto density = [&](double x) { return norm * std::exp(-0.5 * x * x / var); };
  const double lo = -10.0 * data_sd, hi = 10.0 * data_sd;

  IntegrationByPartsCheck out;
  out.precisions = precisions;
  out.nodes = nodes;
  out.sampler = sampler;
  out.constant = 0.5 / var;
  std::vector<double> diff;
  for (double lambda : precisions) {
    if (!(lambda > 0.0)) throw std::invalid_argument("integration by parts: precision must be > 0");
    // s_m = -lambda x, s_d = -x / var, v s_m' v = -lambda v^2 with E[v^2] = 1.
    const double l = simpson(
        [&](double x) {
          const double d = -lambda * x + x / var;
          return density(x) * 0.5 * d * d;
        },
        lo, hi, nodes);
    const double j = simpson(
        [&](double x) { return density(x) * (-lambda + 0.5 * lambda * lambda * x * x); }, lo,
        hi, nodes);
    out.fisher.push_back(l);
    out.objective.push_back(j);
    diff.push_back(l - j);
  }
  double mean = 0.0;
  for (double d : diff) mean += d;
  mean /= static_cast<double>(diff.size());
  for (double d : diff) out.deviation = std::max(out.deviation, std::abs(d - mean));
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian experiments

Vector GaussianExperiment::true_theta() const {
  return gaussian_theta(family, truth.precision(), truth.mean());
}

GaussianEstimate GaussianExperiment::fit(Index n, Index rep, std::uint64_t seed) const {
  const auto un = static_cast<std::uint64_t>(n);
  const auto ur = static_cast<std::uint64_t>(rep);
  const Matrix x = truth.sample(n, mix_seed(seed, {kDataTag, un, ur}));
  return fit_gaussian_closed_form(family, x, objective, mix_seed(seed, {kFitTag, un, ur}));
}

nlohmann::json ConsistencySweep::to_json() const {
  nlohmann::json cells_json = nlohmann::json::array();
  for (const ConsistencyCell& c : cells) {
    cells_json.push_back({{"n", c.n}, {"rep", c.rep}, {"error", json_number(c.error)},
                          {"ok", c.ok}, {"failure", c.failure}});
  }
  nlohmann::json medians = nlohmann::json::array();
  for (double m : median_errors) medians.push_back(json_number(m));
  return {{"sample_sizes", sample_sizes}, {"reps", reps},  {"seed", seed},
          {"median_errors", medians},     {"slope", slope}, {"cells", cells_json}};
}

std::string ConsistencySweep::to_csv() const {
  std::string out = "n,rep,error,ok\n";
  for (const ConsistencyCell& c : cells) {
    out += std::to_string(c.n) + "," + std::to_string(c.rep) + "," +
           (c.ok ? fmt(c.error) : "") + "," + (c.ok ? "1" : "0") + "\n";
  }
  return out;
}

ConsistencySweep run_consistency_sweep(const GaussianExperiment& experiment,
                                       std::vector<Index> sample_sizes, Index reps,
                                       std::uint64_t seed, unsigned threads) {
  if (sample_sizes.empty() || reps < 1) {
    throw std::invalid_argument("consistency sweep: need sample sizes and reps >= 1");
  }
  for (std::size_t k = 1; k < sample_sizes.size(); ++k) {
    if (sample_sizes[k] <= sample_sizes[k - 1]) {
      throw std::invalid_argument("consistency sweep: sample sizes must increase");
    }
  }
  ConsistencySweep out;
  out.sample_sizes = sample_sizes;
  out.reps = reps;
  out.seed = seed;
  out.cells.resize(sample_sizes.size() * static_cast<std::size_t>(reps));
  const Vector target = experiment.true_theta();
  parallel_for(
      out.cells.size(),
      [&](std::size_t idx) {
        ConsistencyCell& cell = out.cells[idx];
        cell.n = sample_sizes[idx / static_cast<std::size_t>(reps)];
        cell.rep = static_cast<Index>(idx % static_cast<std::size_t>(reps));
        const GaussianEstimate est = experiment.fit(cell.n, cell.rep, seed);
        cell.ok = est.ok;
        cell.failure = est.failure;
        cell.error = est.ok ? (est.theta(experiment.family) - target).norm()
                            : std::numeric_limits<double>::quiet_NaN();
        if (cell.ok && !std::isfinite(cell.error)) {
          cell.ok = false;
          cell.failure = "non-finite estimate";
        }
      },
      threads);

  std::vector<double> log_n, log_err;
  for (std::size_t k = 0; k < sample_sizes.size(); ++k) {
    std::vector<double> errs;
    for (Index r = 0; r < reps; ++r) {
      const ConsistencyCell& c = out.cells[k * static_cast<std::size_t>(reps) + static_cast<std::size_t>(r)];
      if (c.ok) errs.push_back(c.error);
    }
    const double m = median(errs);
    out.median_errors.push_back(m);
    if (std::isfinite(m) && m > 0.0) {
      log_n.push_back(std::log(static_cast<double>(sample_sizes[k])));
      log_err.push_back(std::log(m));
    }
  }
  if (log_n.size() >= 2) {
    const double k = static_cast<double>(log_n.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < log_n.size(); ++i) {
      mx += log_n[i];
      my += log_err[i];
    }
    mx /= k;
    my /= k;
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < log_n.size(); ++i) {
      sxy += (log_n[i] - mx) * (log_err[i] - my);
      sxx += (log_n[i] - mx) * (log_n[i] - mx);
    }
    out.slope = sxy / sxx;
  } else {
    out.slope = std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Asymptotic covariance

std::optional<double> theoretical_variance_1d(const ObjectiveSpec& spec, double precision) {
  const double l2 = precision * precision;
  if (spec.kind == ObjectiveKind::sm_exact) return 2.0 * l2;
  if (spec.kind != ObjectiveKind::ssm && spec.kind != ObjectiveKind::ssm_vr) return std::nullopt;
  // a = mean of M i.i.d. v^2; v^2 = 1 for Rademacher and the 1D sphere,
  // chi-square(1) for Gaussian projections.
  const double var_a = spec.sampler.kind == ProjectionKind::gaussian
                           ? 2.0 / static_cast<double>(spec.projections)
                           : 0.0;
  if (spec.kind == ObjectiveKind::ssm) return 2.0 * (1.0 + var_a) * l2;
  return (2.0 + var_a) * l2;
}

nlohmann::json AsymptoticsReport::to_json() const {
  return {{"estimator", estimator},
          {"n", n},
          {"reps", reps},
          {"failures", failures},
          {"seed", seed},
          {"valid", valid},
          {"covariance", json_matrix(covariance)},
          {"trace", trace()},
          {"theoretical", theoretical ? json_matrix(*theoretical) : nlohmann::json(nullptr)},
          {"relative_deviation", json_number(relative_deviation)},
          {"skewness", skewness},
          {"excess_kurtosis", excess_kurtosis}};
}

AsymptoticsReport estimate_asymptotic_covariance(const GaussianExperiment& experiment,
                                                 Index n, Index reps, std::uint64_t seed,
                                                 unsigned threads) {
  if (reps < 2 || n < 2) throw std::invalid_argument("asymptotics: need reps >= 2 and n >= 2");
  const Vector target = experiment.true_theta();
  std::vector<std::optional<Vector>> results(static_cast<std::size_t>(reps));
  parallel_for(
      results.size(),
      [&](std::size_t r) {
        const GaussianEstimate est = experiment.fit(n, static_cast<Index>(r), seed);
        if (est.ok) {
          Vector e = std::sqrt(static_cast<double>(n)) * (est.theta(experiment.family) - target);
          if (e.allFinite()) results[r] = std::move(e);
        }
      },
      threads);

  AsymptoticsReport out;
  const ObjectiveSpec& spec = experiment.objective;
  out.estimator = to_string(spec.kind);
  if (spec.kind != ObjectiveKind::sm_exact && spec.kind != ObjectiveKind::dsm) {
    out.estimator += std::string("/") + to_string(spec.sampler.kind) + "/M=" +
                     std::to_string(spec.projections);
  }
  out.n = n;
  out.reps = reps;
  out.seed = seed;
  for (auto& r : results) {
    if (r) out.scaled_errors.push_back(std::move(*r));
  }
  out.failures = reps - static_cast<Index>(out.scaled_errors.size());
  out.valid = out.failures * 20 <= reps && out.scaled_errors.size() >= 2;
  if (out.scaled_errors.size() < 2) return out;

  const Index p = target.size();
  const Index k = static_cast<Index>(out.scaled_errors.size());
  Matrix e(k, p);
  for (Index i = 0; i < k; ++i) e.row(i) = out.scaled_errors[static_cast<std::size_t>(i)].transpose();
  const Matrix centered = e.rowwise() - e.colwise().mean();
  out.covariance = centered.transpose() * centered / static_cast<double>(k - 1);

  const Vector c0 = centered.col(0);
  const double m2 = c0.squaredNorm() / static_cast<double>(k);
  const double m3 = c0.array().cube().mean();
  const double m4 = c0.array().square().square().mean();
  out.skewness = m3 / std::pow(m2, 1.5);
  out.excess_kurtosis = m4 / (m2 * m2) - 3.0;

  if (experiment.family.dim == 1 && experiment.family.known_mean) {
    const auto v = theoretical_variance_1d(spec, experiment.truth.precision()(0, 0));
    if (v) {
      out.theoretical = Matrix::Constant(1, 1, *v);
      out.relative_deviation = std::abs(out.covariance(0, 0) - *v) / *v;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Noise-contrastive estimation

nlohmann::json NceCheck::to_json() const {
  return {{"check", "nce-taylor"},
          {"displacements", displacements},
          {"values", values},
          {"predictions", predictions},
          {"residuals", residuals},
          {"residual_over_v2", residual_over_v2},
          {"quarter_predictions", quarter_predictions},
          {"quarter_residual_over_v2", quarter_residual_over_v2},
          {"decreasing", decreasing},
          {"limit", limit},
          {"limit_gap", limit_gap},
          {"smallest_v_gap", smallest_v_gap}};
}

double nce_objective(double v, double model_mean, double model_precision, Index nodes,
                     double half_width) {
  const double norm = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  auto log_model = [&](double x) {
    return -0.5 * model_precision * (x - model_mean) * (x - model_mean);
  };
  // -log h = softplus(delta), -log(1 - h) = softplus(-delta) with
  // delta = log p_m(x - v) - log p_m(x).
  return simpson(
      [&](double x) {
        const double delta = log_model(x - v) - log_model(x);
        const double pd = norm * std::exp(-0.5 * x * x);
        const double pn = norm * std::exp(-0.5 * (x - v) * (x - v));
        return pd * softplus(delta) + pn * softplus(-delta);
      },
      -half_width, half_width, nodes);
}

double nce_prediction(double v, double model_mean, double model_precision,
                      double coefficient) {
  // Data N(0, 1): E[(x - m)^2] = 1 + m^2.
  const double second = 1.0 + model_mean * model_mean;
  return 2.0 * std::numbers::ln2 +
         coefficient * (-model_precision * v * v +
                        0.5 * v * v * model_precision * model_precision * second);
}

NceCheck check_nce_taylor(std::vector<double> displacements, double model_mean,
                          double model_precision, Index nodes) {
  if (displacements.size() < 2) {
    throw std::invalid_argument("nce: need at least two displacements");
  }
  for (std::size_t k = 0; k < displacements.size(); ++k) {
    if (!(displacements[k] > 0.0) || (k > 0 && displacements[k] >= displacements[k - 1])) {
      throw std::invalid_argument("nce: displacements must be positive and strictly decreasing");
    }
  }
  NceCheck out;
  out.displacements = displacements;
  for (double v : displacements) {
    const double j = nce_objective(v, model_mean, model_precision, nodes);
    const double pred = nce_prediction(v, model_mean, model_precision);
    const double quarter = nce_prediction(v, model_mean, model_precision, 0.25);
    out.values.push_back(j);
    out.predictions.push_back(pred);
    out.residuals.push_back(std::abs(j - pred));
    out.residual_over_v2.push_back(std::abs(j - pred) / (v * v));
    out.quarter_predictions.push_back(quarter);
    out.quarter_residual_over_v2.push_back(std::abs(j - quarter) / (v * v));
  }
  out.decreasing = true;
  for (std::size_t k = 1; k < out.residual_over_v2.size(); ++k) {
    if (!(out.residual_over_v2[k] < out.residual_over_v2[k - 1])) out.decreasing = false;
  }
  const std::size_t last = displacements.size() - 1;
  const double v1 = displacements[last - 1] * displacements[last - 1];
  const double v2 = displacements[last] * displacements[last];
  out.limit = (v1 * out.values[last] - v2 * out.values[last - 1]) / (v1 - v2);
  out.limit_gap = std::abs(out.limit - 2.0 * std::numbers::ln2);
  out.smallest_v_gap = std::abs(out.values[last] - 2.0 * std::numbers::ln2);
  return out;
}

// ---------------------------------------------------------------------------
// Objective variance across projections

nlohmann::json VarianceTable::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const VarianceCell& c : cells) {
    rows.push_back({{"sampler", to_string(c.sampler)},
                    {"projections", c.projections},
                    {"mean_ssm", c.mean_ssm},
                    {"mean_ssm_vr", c.mean_ssm_vr},
                    {"var_ssm", c.var_ssm},
                    {"var_ssm_vr", c.var_ssm_vr}});
  }
  return {{"draws", draws},
          {"seed", seed},
          {"vr_never_worse", vr_never_worse},
          {"decreasing_in_m", decreasing_in_m},
          {"cells", rows}};
}

std::string VarianceTable::to_csv() const {
  std::string out = "sampler,projections,mean_ssm,mean_ssm_vr,var_ssm,var_ssm_vr\n";
  for (const VarianceCell& c : cells) {
    out += std::string(to_string(c.sampler)) + "," + std::to_string(c.projections) + "," +
           fmt(c.mean_ssm) + "," + fmt(c.mean_ssm_vr) + "," + fmt(c.var_ssm) + "," +
           fmt(c.var_ssm_vr) + "\n";
  }
  return out;
}

VarianceTable compare_estimator_variances(const ScoreField& model, const Matrix& batch,
                                          const std::vector<ProjectionKind>& samplers,
                                          const std::vector<Index>& projections,
                                          Index draws, std::uint64_t seed,
                                          unsigned threads) {
  if (draws < 2) throw std::invalid_argument("variance comparison: need draws >= 2");
  VarianceTable out;
  out.draws = draws;
  out.seed = seed;
  for (ProjectionKind kind : samplers) {
    for (Index m : projections) {
      if (m < 1) throw std::invalid_argument("variance comparison: M must be >= 1");
      const ProjectionSampler sampler{kind, model.dim(), true, seed};
      std::vector<double> plain(static_cast<std::size_t>(draws));
      std::vector<double> vr(static_cast<std::size_t>(draws));
      parallel_for(
          static_cast<std::size_t>(draws),
          [&](std::size_t d) {
            const ProjectionBlock block = sample_projections(
                sampler, batch.rows(), m, mix_seed(seed, {static_cast<std::uint64_t>(m), d}));
            plain[d] = ssm(model, batch, block).value;
            vr[d] = ssm_vr(model, batch, block).value;
          },
          threads);
      VarianceCell cell;
      cell.sampler = kind;
      cell.projections = m;
      for (std::size_t d = 0; d < plain.size(); ++d) {
        cell.mean_ssm += plain[d];
        cell.mean_ssm_vr += vr[d];
      }
      cell.mean_ssm /= static_cast<double>(draws);
      cell.mean_ssm_vr /= static_cast<double>(draws);
      cell.var_ssm = sample_variance(plain);
      cell.var_ssm_vr = sample_variance(vr);
      out.cells.push_back(cell);
    }
  }
  out.vr_never_worse = std::all_of(out.cells.begin(), out.cells.end(), [](const VarianceCell& c) {
    return c.var_ssm_vr <= c.var_ssm;
  });
  out.decreasing_in_m = true;
  for (std::size_t k = 1; k < out.cells.size(); ++k) {
    const VarianceCell& a = out.cells[k - 1];
    const VarianceCell& b = out.cells[k];
    if (a.sampler != b.sampler || b.projections <= a.projections) continue;
    if (b.var_ssm > a.var_ssm || b.var_ssm_vr > a.var_ssm_vr) out.decreasing_in_m = false;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trace-estimator identity

nlohmann::json HutchinsonCheck::to_json() const {
  return {{"check", "hutchinson"},
          {"draws", draws},
          {"sm_exact", sm_exact},
          {"ssm_mean", ssm_mean},
          {"ssm_standard_error", ssm_standard_error},
          {"z", z},
          {"max_score_cross_term_error", max_score_cross_term_error},
          {"max_jacobian_cross_term_error", max_jacobian_cross_term_error}};
}

HutchinsonCheck check_hutchinson_identity(const ScoreField& model, const Matrix& batch,
                                          const ProjectionSampler& sampler, Index draws,
                                          Index projections) {
  if (draws < 2) throw std::invalid_argument("hutchinson check: need draws >= 2");
  if (!sampler.identity_second_moment()) {
    throw PreconditionError("hutchinson check requires projections with E[v v^T] = I");
  }
  const Index n = batch.rows();
  const Index d = model.dim();
  const Matrix s = model.value(batch);
  // jac[i] = grad_x s(x_i); column q from the directional Jacobian along e_q
  // is row q of the Jacobian.
  std::vector<Matrix> jac(static_cast<std::size_t>(n), Matrix(d, d));
  for (Index q = 0; q < d; ++q) {
    Matrix e = Matrix::Zero(n, d);
    e.col(q).setOnes();
    const Matrix rows = model.directional_jacobian(batch, e);
    for (Index i = 0; i < n; ++i) jac[static_cast<std::size_t>(i)].row(q) = rows.row(i);
  }

  HutchinsonCheck out;
  out.draws = draws;
  out.sm_exact = sm_exact(model, batch).value;
  std::vector<double> values(static_cast<std::size_t>(draws));
  for (Index k = 0; k < draws; ++k) {
    ProjectionSampler sp = sampler;
    sp.dim = d;
    const ProjectionBlock block = sample_projections(sp, n, projections, static_cast<std::uint64_t>(k));
    const double plain = ssm(model, batch, block).value;
    const double vr = ssm_vr(model, batch, block).value;
    values[static_cast<std::size_t>(k)] = plain;

    double score_cross = 0.0, jac_cross = 0.0;
    for (Index i = 0; i < n; ++i) {
      Matrix a = Matrix::Zero(d, d);
      for (Index j = 0; j < projections; ++j) {
        const Vector v = block.v(i, j);
        a.noalias() += v * v.transpose();
      }
      a /= static_cast<double>(projections);
      a -= Matrix::Identity(d, d);
      const Vector si = s.row(i).transpose();
      score_cross += 0.5 * si.dot(a * si);
      jac_cross += (jac[static_cast<std::size_t>(i)].array() * a.array()).sum();
    }
    score_cross /= static_cast<double>(n);
    jac_cross /= static_cast<double>(n);
    out.max_score_cross_term_error =
        std::max(out.max_score_cross_term_error, std::abs((plain - vr) - score_cross));
    out.max_jacobian_cross_term_error =
        std::max(out.max_jacobian_cross_term_error, std::abs((vr - out.sm_exact) - jac_cross));
  }
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(draws);
  out.ssm_mean = mean;
  out.ssm_standard_error = std::sqrt(sample_variance(values) / static_cast<double>(draws));
  out.z = out.ssm_standard_error > 0.0 ? (mean - out.sm_exact) / out.ssm_standard_error : 0.0;
  return out;
}

}  // namespace ssm
