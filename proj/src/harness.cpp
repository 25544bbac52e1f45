#include "ssm/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "ssm/parallel.hpp"
#include "ssm/random.hpp"

namespace ssm {

namespace {

constexpr std::uint64_t kBenchDataTag = 0x62656E6368ULL;
constexpr std::uint64_t kGridDataTag = 0x67726964ULL;
constexpr std::uint64_t kGridFitTag = 0x67666974ULL;

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

ScoreField bench_model(const BenchConfig& cfg, Index dim) {
  if (cfg.model == "mlp_energy") {
    return score_field(MlpEnergy::random(dim, cfg.seed, cfg.hidden));
  }
  if (cfg.model == "gaussian") {
    return score_field(GaussianModel::standard(dim), ScoreMode::autodiff);
  }
  throw std::invalid_argument("bench: unknown model '" + cfg.model + "'");
}

}  // namespace

std::vector<BenchRecord> run_bench_scaling(const BenchConfig& config) {
  if (config.reps < 1) throw std::invalid_argument("bench: reps must be >= 1");
  if (config.dims.empty() || config.objectives.empty()) {
    throw std::invalid_argument("bench: need at least one dimension and objective");
  }
  for (std::size_t k = 1; k < config.dims.size(); ++k) {
    if (config.dims[k] <= config.dims[k - 1]) {
      throw std::invalid_argument("bench: dims must be increasing");
    }
  }
  std::vector<BenchRecord> out;
  for (Index dim : config.dims) {
    const ScoreField field = bench_model(config, dim);
    const Matrix batch = standard_normal(config.batch_size, dim, config.seed, kBenchDataTag);
    for (ObjectiveKind kind : config.objectives) {
      ObjectiveSpec spec;
      spec.kind = kind;
      spec.sampler = {config.sampler, dim, true, config.seed};
      spec.projections = config.projections;
      spec.dsm_sigma = config.dsm_sigma;
      BenchRecord rec;
      rec.dim = dim;
      rec.objective = kind;
      rec.reps = config.reps;
      std::vector<double> times;
      for (Index r = 0; r <= config.reps; ++r) {
        const auto start = std::chrono::steady_clock::now();
        const ObjectiveEstimate est = evaluate_objective(
            field, batch, spec, static_cast<std::uint64_t>(r), {config.with_parameter_gradient});
        const auto stop = std::chrono::steady_clock::now();
        rec.backward_passes = est.backward_passes;
        if (r > 0) times.push_back(std::chrono::duration<double>(stop - start).count());
      }
      double total = 0.0;
      for (double t : times) total += t;
      rec.mean_seconds = total / static_cast<double>(times.size());
      std::sort(times.begin(), times.end());
      const std::size_t mid = times.size() / 2;
      rec.median_seconds = times.size() % 2 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
      out.push_back(rec);
    }
  }
  return out;
}

std::string bench_csv_header() {
  return "dim,objective,median_seconds,mean_seconds,backward_passes,reps";
}

std::string bench_csv_row(const BenchRecord& r) {
  return std::to_string(r.dim) + "," + to_string(r.objective) + "," + fmt(r.median_seconds) +
         "," + fmt(r.mean_seconds) + "," + std::to_string(r.backward_passes) + "," +
         std::to_string(r.reps);
}

nlohmann::json to_json(const BenchRecord& r) {
  return {{"dim", r.dim},
          {"objective", to_string(r.objective)},
          {"median_seconds", r.median_seconds},
          {"mean_seconds", r.mean_seconds},
          {"backward_passes", r.backward_passes},
          {"reps", r.reps}};
}

// ---------------------------------------------------------------------------

nlohmann::json DsmGridResult::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const DsmGridCell& c : cells) {
    nlohmann::json precision = nlohmann::json::array();
    for (Index r = 0; r < c.precision.rows(); ++r) {
      std::vector<double> row;
      for (Index k = 0; k < c.precision.cols(); ++k) row.push_back(c.precision(r, k));
      precision.push_back(row);
    }
    rows.push_back({{"sigma", c.sigma},
                    {"ok", c.ok},
                    {"failure", c.failure},
                    {"validation_loss", std::isfinite(c.validation_loss)
                                            ? nlohmann::json(c.validation_loss)
                                            : nlohmann::json(nullptr)},
                    {"precision", precision},
                    {"mean", std::vector<double>(c.mean.begin(), c.mean.end())}});
  }
  return {{"cells", rows},
          {"argmin", argmin},
          {"argmin_sigma", argmin >= 0 ? nlohmann::json(cells[static_cast<std::size_t>(argmin)].sigma)
                                       : nlohmann::json(nullptr)}};
}

std::string DsmGridResult::to_csv() const {
  std::string out = "sigma,ok,validation_loss,precision_00,is_argmin\n";
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const DsmGridCell& c = cells[k];
    out += fmt(c.sigma) + "," + (c.ok ? "1" : "0") + "," + (c.ok ? fmt(c.validation_loss) : "") +
           "," + (c.ok ? fmt(c.precision(0, 0)) : "") + "," +
           (static_cast<Index>(k) == argmin ? "1" : "0") + "\n";
  }
  return out;
}

DsmGridResult run_dsm_grid(const DsmGridConfig& config) {
  if (config.sigmas.empty()) throw std::invalid_argument("dsm grid: empty sigma grid");
  for (double s : config.sigmas) {
    if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("dsm grid: sigmas must be > 0");
  }
  if (config.backend != "closed_form" && config.backend != "adam") {
    throw std::invalid_argument("dsm grid: backend must be closed_form or adam");
  }
  const Index d = config.truth.dim();
  const Matrix train_data = config.truth.sample(config.n_train, mix_seed(config.seed, {kGridDataTag, 0}));
  const Matrix validation =
      config.truth.sample(config.n_validation, mix_seed(config.seed, {kGridDataTag, 1}));
  const std::uint64_t fit_seed = mix_seed(config.seed, {kGridFitTag});

  DsmGridResult out;
  out.cells.resize(config.sigmas.size());
  parallel_for(
      out.cells.size(),
      [&](std::size_t k) {
        DsmGridCell& cell = out.cells[k];
        cell.sigma = config.sigmas[k];
        try {
          GaussianModel fitted = GaussianModel::standard(d);
          if (config.backend == "closed_form") {
            ObjectiveSpec spec;
            spec.kind = ObjectiveKind::dsm;
            spec.dsm_sigma = cell.sigma;
            const GaussianEstimate est =
                fit_gaussian_closed_form(GaussianFamily::full(d), train_data, spec, fit_seed);
            if (!est.ok) throw std::runtime_error(est.failure);
            fitted = GaussianModel::from_moments(est.mean, est.precision);
          } else {
            TrainConfig tc = config.train;
            tc.objective.kind = ObjectiveKind::dsm;
            tc.objective.dsm_sigma = cell.sigma;
            tc.seed = fit_seed;
            const TrainReport report =
                train(score_field(fitted), BatchSource::from_dataset(train_data, 0.1, fit_seed), tc);
            fitted = fitted.with_parameters(report.final_parameters);
          }
          cell.precision = fitted.precision();
          cell.mean = fitted.mean();
          cell.validation_loss = sm_exact(score_field(fitted), validation).value;
          cell.ok = std::isfinite(cell.validation_loss);
          if (!cell.ok) cell.failure = "validation loss is not finite";
        } catch (const std::exception& e) {
          cell.ok = false;
          cell.failure = e.what();
        }
      },
      config.threads);

  for (std::size_t k = 0; k < out.cells.size(); ++k) {
    if (!out.cells[k].ok) continue;
    if (out.argmin < 0 ||
        out.cells[k].validation_loss < out.cells[static_cast<std::size_t>(out.argmin)].validation_loss) {
      out.argmin = static_cast<Index>(k);
    }
  }
  return out;
}

}  // namespace ssm

// ---------------------------------------------------------------------------

namespace ssm {

namespace {

Matrix reference_precision_2d() {
  Matrix p(2, 2);
  p << 2.0, 0.5, 0.5, 1.0;
  return p;
}

}  // namespace

nlohmann::json CheckVerdict::to_json() const {
  return {{"name", name},
          {"passed", passed},
          {"metric", metric},
          {"threshold", threshold},
          {"details", details}};
}

CheckVerdict verify_integration_by_parts(Index grid_points, ProjectionKind sampler, Index nodes) {
  if (grid_points < 1) throw std::invalid_argument("integration-by-parts: empty grid");
  std::vector<double> grid;
  for (Index k = 0; k < grid_points; ++k) {
    const double t = grid_points == 1 ? 0.5 : static_cast<double>(k) / static_cast<double>(grid_points - 1);
    grid.push_back(0.25 * std::pow(16.0, t));
  }
  const IntegrationByPartsCheck check = check_integration_by_parts(grid, sampler, nodes);
  CheckVerdict v;
  v.name = "integration-by-parts";
  v.metric = check.deviation;
  v.threshold = 1e-6;
  v.passed = check.deviation <= v.threshold;
  v.details = check.to_json();
  return v;
}

CheckVerdict verify_nce_taylor(Index nodes) {
  const NceCheck check = check_nce_taylor({0.2, 0.1, 0.05, 0.025}, 0.0, 1.0, nodes);
  CheckVerdict v;
  v.name = "nce-taylor";
  v.metric = check.limit_gap;
  v.threshold = 1e-4;
  v.passed = check.decreasing && check.limit_gap <= v.threshold;
  v.details = check.to_json();
  return v;
}

CheckVerdict verify_hutchinson(Index draws, std::uint64_t seed, ProjectionKind sampler) {
  Vector mean(2);
  mean << 0.3, -0.2;
  const GaussianModel model = GaussianModel::from_moments(mean, reference_precision_2d());
  const Matrix batch = standard_normal(10, 2, seed, 0x68757463ULL);
  const HutchinsonCheck check =
      check_hutchinson_identity(score_field(model), batch, {sampler, 2, true, seed}, draws);
  CheckVerdict v;
  v.name = "hutchinson";
  v.metric = std::abs(check.z);
  v.threshold = 3.0;
  const double cross = std::max(check.max_score_cross_term_error, check.max_jacobian_cross_term_error);
  v.passed = v.metric <= v.threshold && cross <= 1e-10;
  v.details = check.to_json();
  return v;
}

CheckVerdict verify_consistency(std::vector<Index> sample_sizes, Index reps, std::uint64_t seed,
                                unsigned threads) {
  GaussianExperiment exp{GaussianModel::from_moments(Vector::Zero(2), reference_precision_2d()),
                         GaussianFamily::full(2), {}};
  exp.objective.kind = ObjectiveKind::ssm_vr;
  exp.objective.sampler = {ProjectionKind::rademacher, 2, true, 0};
  const ConsistencySweep sweep = run_consistency_sweep(exp, std::move(sample_sizes), reps, seed, threads);
  CheckVerdict v;
  v.name = "consistency";
  v.metric = sweep.slope;
  v.threshold = -0.5;
  v.passed = sweep.slope >= -0.65 && sweep.slope <= -0.35;
  v.details = sweep.to_json();
  return v;
}

CheckVerdict verify_asymptotic_variance(Index n, Index reps, std::uint64_t seed, unsigned threads) {
  GaussianExperiment exp{GaussianModel::standard(1), GaussianFamily::precision_only(Vector::Zero(1)), {}};
  exp.objective.kind = ObjectiveKind::ssm;
  exp.objective.sampler = {ProjectionKind::rademacher, 1, true, 0};
  const AsymptoticsReport report = estimate_asymptotic_covariance(exp, n, reps, seed, threads);
  CheckVerdict v;
  v.name = "asymptotics";
  v.metric = report.covariance(0, 0);
  v.threshold = 2.0;
  v.passed = report.valid && std::abs(v.metric - 2.0) <= 0.15 * 2.0;
  v.details = report.to_json();
  v.details.erase("scaled_errors");
  return v;
}

CheckVerdict verify_variance_ordering(Index n, Index reps, std::uint64_t seed, unsigned threads) {
  const GaussianModel truth = GaussianModel::from_moments(Vector::Zero(2), reference_precision_2d());
  auto trace_for = [&](ObjectiveKind kind, Index m) {
    GaussianExperiment exp{truth, GaussianFamily::full(2), {}};
    exp.objective.kind = kind;
    exp.objective.projections = m;
    exp.objective.sampler = {ProjectionKind::rademacher, 2, true, 0};
    const AsymptoticsReport r = estimate_asymptotic_covariance(exp, n, reps, seed, threads);
    if (!r.valid) throw std::runtime_error("variance-ordering: too many failed repetitions");
    return r.trace();
  };
  const double sm = trace_for(ObjectiveKind::sm_exact, 1);
  const double ssm1 = trace_for(ObjectiveKind::ssm, 1);
  const double ssm10 = trace_for(ObjectiveKind::ssm, 10);
  CheckVerdict v;
  v.name = "variance-ordering";
  v.metric = std::max(sm / ssm1, ssm10 / ssm1);
  v.threshold = 1.05;
  v.passed = sm <= 1.05 * ssm1 && ssm10 <= 1.05 * ssm1;
  v.details = {{"trace_sm_exact", sm}, {"trace_ssm_m1", ssm1}, {"trace_ssm_m10", ssm10},
               {"n", n}, {"reps", reps}, {"seed", seed}};
  return v;
}

const std::vector<std::string>& check_names() {
  static const std::vector<std::string> names{"integration-by-parts", "nce-taylor", "hutchinson",
                                              "consistency", "asymptotics", "variance-ordering"};
  return names;
}

CheckVerdict run_check(const std::string& name, const CheckSettings& s) {
  if (name == "integration-by-parts") {
    return verify_integration_by_parts(s.ibp_grid_points, s.sampler, s.ibp_nodes);
  }
  if (name == "nce-taylor") return verify_nce_taylor(s.nce_nodes);
  if (name == "hutchinson") return verify_hutchinson(s.hutchinson_draws, s.seed, s.sampler);
  if (name == "consistency") {
    return verify_consistency(s.consistency_sizes, s.consistency_reps, s.seed, s.threads);
  }
  if (name == "asymptotics") {
    return verify_asymptotic_variance(s.asymptotics_n, s.asymptotics_reps, s.seed, s.threads);
  }
  if (name == "variance-ordering") {
    return verify_variance_ordering(s.ordering_n, s.ordering_reps, s.seed, s.threads);
  }
  throw std::invalid_argument("unknown check '" + name + "'");
}

}  // namespace ssm
