#include "ssm/cli.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <type_traits>

#include <CLI11.hpp>
#include <toml.hpp>

#include "ssm/harness.hpp"
#include "ssm/model_io.hpp"
#include "ssm/random.hpp"
#include "ssm/score_estimation.hpp"

namespace ssm {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr std::uint64_t kCliDataTag = 0x636C6964ULL;

const std::vector<std::string> kCommands{"train", "bench-scaling", "validate", "estimate-score",
                                         "dsm-grid"};

// ---------------------------------------------------------------------------
// Config access with dotted field paths in every error.

json toml_to_json(const toml::node& node, const std::string& path) {
  if (const auto* t = node.as_table()) {
    json obj = json::object();
    for (const auto& [key, value] : *t) {
      const std::string k(key.str());
      obj[k] = toml_to_json(value, path.empty() ? k : path + "." + k);
    }
    return obj;
  }
  if (const auto* a = node.as_array()) {
    json arr = json::array();
    for (std::size_t i = 0; i < a->size(); ++i) {
      arr.push_back(toml_to_json(*a->get(i), path + "[" + std::to_string(i) + "]"));
    }
    return arr;
  }
  if (const auto* s = node.as_string()) return s->get();
  if (const auto* i = node.as_integer()) return i->get();
  if (const auto* f = node.as_floating_point()) return f->get();
  if (const auto* b = node.as_boolean()) return b->get();
  throw ConfigError(path, "unsupported value type (dates and times are not accepted)");
}

template <class T>
struct is_vector : std::false_type {};
template <class T>
struct is_vector<std::vector<T>> : std::true_type {};

template <class T>
T convert(const json& j, const std::string& field) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) throw ConfigError(field, "expected a boolean");
    return j.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) throw ConfigError(field, "expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (!j.is_number_unsigned() && j.get<std::int64_t>() < 0) {
        throw ConfigError(field, "expected a non-negative integer");
      }
    }
    return j.get<T>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) throw ConfigError(field, "expected a number");
    return j.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) throw ConfigError(field, "expected a string");
    return j.get<std::string>();
  } else {
    static_assert(is_vector<T>::value);
    if (!j.is_array()) throw ConfigError(field, "expected an array");
    T out;
    for (std::size_t i = 0; i < j.size(); ++i) {
      out.push_back(convert<typename T::value_type>(j[i], field + "[" + std::to_string(i) + "]"));
    }
    return out;
  }
}

/// One table of the config. Every read is recorded (with defaults filled in)
/// so the manifest holds the complete effective configuration.
class Section {
 public:
  Section(const json& raw, std::string path) : path_(std::move(path)) {
    if (raw.is_null()) {
      raw_ = json::object();
    } else if (!raw.is_object()) {
      throw ConfigError(path_.empty() ? "config" : path_, "expected a table");
    } else {
      raw_ = raw;
    }
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    used_.insert(key);
    T value = raw_.contains(key) ? convert<T>(raw_.at(key), field(key)) : std::move(fallback);
    effective_[key] = value;
    return value;
  }

  template <class T>
  std::optional<T> optional(const std::string& key) {
    used_.insert(key);
    if (!raw_.contains(key)) return std::nullopt;
    T value = convert<T>(raw_.at(key), field(key));
    effective_[key] = value;
    return value;
  }

  void ignore(const std::string& key) { used_.insert(key); }

  void finish() const {
    for (const auto& item : raw_.items()) {
      if (!used_.count(item.key())) throw ConfigError(field(item.key()), "unknown field");
    }
  }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }
  const json& effective() const { return effective_; }

 private:
  json raw_;
  std::string path_;
  std::set<std::string> used_;
  json effective_ = json::object();
};

template <class Fn>
auto parse_kind(Section& s, const std::string& key, const std::string& fallback, Fn from_string) {
  const std::string name = s.get<std::string>(key, fallback);
  try {
    return from_string(name);
  } catch (const std::invalid_argument&) {
    throw ConfigError(s.field(key), "unknown value '" + name + "'");
  }
}

Index positive(Section& s, const std::string& key, Index fallback) {
  const Index v = s.get<Index>(key, fallback);
  if (v < 1) throw ConfigError(s.field(key), "must be >= 1");
  return v;
}

Index non_negative(Section& s, const std::string& key, Index fallback) {
  const Index v = s.get<Index>(key, fallback);
  if (v < 0) throw ConfigError(s.field(key), "must be >= 0");
  return v;
}

double positive_real(Section& s, const std::string& key, double fallback) {
  const double v = s.get<double>(key, fallback);
  if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(s.field(key), "must be > 0");
  return v;
}

std::vector<Index> layer_widths(Section& s, const std::string& key, std::vector<Index> fallback) {
  const auto widths = s.get<std::vector<Index>>(key, std::move(fallback));
  for (Index w : widths) {
    if (w < 1) throw ConfigError(s.field(key), "layer widths must be >= 1");
  }
  return widths;
}

Activation parse_activation(Section& s, const std::string& fallback) {
  const std::string name = s.get<std::string>("activation", fallback);
  if (name == "tanh") return Activation::tanh;
  if (name == "softplus") return Activation::softplus;
  throw ConfigError(s.field("activation"), "must be tanh or softplus");
}

Vector parse_vector(Section& s, const std::string& key, Index dim, double fill) {
  const auto values = s.get<std::vector<double>>(key, std::vector<double>(static_cast<std::size_t>(dim), fill));
  if (static_cast<Index>(values.size()) != dim) {
    throw ConfigError(s.field(key), "expected " + std::to_string(dim) + " entries");
  }
  return Eigen::Map<const Vector>(values.data(), dim);
}

/// Symmetric positive-definite dim x dim matrix given as rows; identity by
/// default.
Matrix parse_precision(Section& s, const std::string& key, Index dim) {
  std::vector<std::vector<double>> identity(static_cast<std::size_t>(dim),
                                            std::vector<double>(static_cast<std::size_t>(dim), 0.0));
  for (Index i = 0; i < dim; ++i) identity[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = 1.0;
  const auto rows = s.get<std::vector<std::vector<double>>>(key, identity);
  if (static_cast<Index>(rows.size()) != dim) {
    throw ConfigError(s.field(key), "expected " + std::to_string(dim) + " rows");
  }
  Matrix m(dim, dim);
  for (Index i = 0; i < dim; ++i) {
    const auto& row = rows[static_cast<std::size_t>(i)];
    if (static_cast<Index>(row.size()) != dim) {
      throw ConfigError(s.field(key) + "[" + std::to_string(i) + "]",
                        "expected " + std::to_string(dim) + " entries");
    }
    for (Index k = 0; k < dim; ++k) m(i, k) = row[static_cast<std::size_t>(k)];
  }
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 || m.llt().info() != Eigen::Success) {
    throw ConfigError(s.field(key), "must be symmetric positive definite");
  }
  return m;
}

ProjectionSampler parse_sampler(Section& s, Index dim) {
  return {parse_kind(s, "sampler", "rademacher", projection_kind_from_string), dim, true, 0};
}

OptimizerConfig parse_optimizer(Section& s) {
  OptimizerConfig o;
  o.kind = parse_kind(s, "optimizer", "adam", optimizer_kind_from_string);
  o.learning_rate = s.get<double>("learning_rate", o.learning_rate);
  if (!(o.learning_rate >= 0.0) || !std::isfinite(o.learning_rate)) {
    throw ConfigError(s.field("learning_rate"), "must be finite and >= 0");
  }
  return o;
}

Matrix read_csv_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open data file '" + path + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (cell.find_first_not_of(" \t\r", used) != std::string::npos) numeric = false;
      } catch (const std::exception&) {
        numeric = false;
      }
    }
    if (!numeric) {
      if (first) {
        first = false;
        continue;  // header
      }
      throw std::runtime_error("non-numeric row in '" + path + "': " + line);
    }
    first = false;
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw std::runtime_error("ragged rows in '" + path + "'");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error("no data rows in '" + path + "'");
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index k = 0; k < m.cols(); ++k) m(i, k) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
  }
  return m;
}

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Index k = 0; k < m.cols(); ++k) row[static_cast<std::size_t>(k)] = m(i, k);
    rows.push_back(row);
  }
  return rows;
}

json vector_json(const Vector& v) { return std::vector<double>(v.begin(), v.end()); }

// ---------------------------------------------------------------------------
// Commands. Parsing finishes before any work starts, so config errors never
// leave partial output behind.

struct Common {
  std::uint64_t seed = 0;
  std::string out;
  unsigned threads = 0;
};

struct Artifacts {
  json report = json::object();
  std::string csv;
  std::vector<std::pair<std::string, json>> extra_json;
  std::optional<std::string> failure;
};

using Runner = std::function<Artifacts()>;

Runner parse_train(Section& s, const Common& c) {
  const std::string model = s.get<std::string>("model", "gaussian");
  if (model != "gaussian" && model != "mlp_energy" && model != "score_network" && model != "kef") {
    throw ConfigError(s.field("model"), "must be gaussian, mlp_energy, score_network or kef");
  }
  const std::optional<std::string> data_file = s.optional<std::string>("data_file");
  const std::optional<std::string> init_model = s.optional<std::string>("init_model");
  const Index dim = positive(s, "dim", 2);
  const std::vector<Index> hidden = layer_widths(s, "hidden", {32, 32});
  const Activation activation = parse_activation(s, model == "score_network" ? "tanh" : "softplus");
  const Index inducing = positive(s, "inducing", 20);
  const std::vector<double> bandwidths = s.get<std::vector<double>>("bandwidths", {1.0});
  if (bandwidths.empty()) throw ConfigError(s.field("bandwidths"), "must not be empty");
  for (double b : bandwidths) {
    if (!(b > 0.0)) throw ConfigError(s.field("bandwidths"), "must be > 0");
  }

  TrainConfig tc;
  tc.seed = c.seed;
  tc.objective.kind = parse_kind(s, "objective", "ssm_vr", objective_kind_from_string);
  tc.objective.sampler = parse_sampler(s, dim);
  tc.objective.projections = positive(s, "projections", 1);
  tc.objective.dsm_sigma = positive_real(s, "dsm_sigma", 0.1);
  tc.optimizer = parse_optimizer(s);
  tc.batch_size = positive(s, "batch_size", 100);
  tc.steps = non_negative(s, "steps", 2000);
  tc.eval_every = positive(s, "eval_every", 10);
  tc.patience = non_negative(s, "patience", 200);
  tc.validation_fraction = s.get<double>("validation_fraction", 0.1);
  if (!(tc.validation_fraction >= 0.0 && tc.validation_fraction < 1.0)) {
    throw ConfigError(s.field("validation_fraction"), "must lie in [0, 1)");
  }

  std::optional<GaussianModel> truth;
  Index n = 0;
  if (!data_file) {
    n = positive(s, "n", 10000);
    truth = GaussianModel::from_moments(parse_vector(s, "data_mean", dim, 0.0),
                                        parse_precision(s, "data_precision", dim));
  }

  return [=]() {
    const Matrix data = data_file ? read_csv_matrix(*data_file)
                                  : truth->sample(n, mix_seed(c.seed, {kCliDataTag}));
    if (data.cols() != dim) {
      throw std::runtime_error("data has " + std::to_string(data.cols()) + " columns, expected " +
                               std::to_string(dim));
    }
    const BatchSource source = BatchSource::from_dataset(data, tc.validation_fraction, c.seed);

    AnyModel initial = GaussianModel::standard(dim);
    if (init_model) {
      std::ifstream in(*init_model);
      if (!in) throw std::runtime_error("cannot open init_model '" + *init_model + "'");
      initial = model_from_json(json::parse(in));
    } else if (model == "mlp_energy") {
      initial = MlpEnergy::random(dim, c.seed, hidden, activation);
    } else if (model == "score_network") {
      initial = ScoreNetwork::random(dim, c.seed, hidden, activation);
    } else if (model == "kef") {
      const Index m = std::min(inducing, data.rows());
      KernelMixture kernel{Eigen::Map<const Vector>(bandwidths.data(), static_cast<Index>(bandwidths.size())),
                           Vector::Constant(static_cast<Index>(bandwidths.size()),
                                            1.0 / static_cast<double>(bandwidths.size()))};
      initial = KefModel(data.topRows(m), Vector::Zero(m), kernel);
    }
    if (any_score_field(initial).dim() != dim) throw std::runtime_error("init_model dimension mismatch");

    const TrainReport report = train(any_score_field(initial), source, tc);
    const AnyModel fitted = with_parameters(initial, report.final_parameters);

    Artifacts a;
    a.report["train"] = report.to_json();
    a.report["model"] = to_json(fitted);
    if (source.validation().rows() > 0) {
      a.report["validation_sm_exact"] = sm_exact(any_score_field(fitted), source.validation()).value;
    }
    if (truth && std::holds_alternative<GaussianModel>(fitted)) {
      const GaussianModel& g = std::get<GaussianModel>(fitted);
      a.report["precision"] = matrix_json(g.precision());
      a.report["mean"] = vector_json(g.mean());
      a.report["precision_error_frobenius"] = (g.precision() - truth->precision()).norm();
    }
    a.csv = report.curve_csv();
    a.extra_json.emplace_back("model.json", to_json(fitted));
    return a;
  };
}

Runner parse_bench(Section& s, const Common& c) {
  BenchConfig cfg;
  cfg.seed = c.seed;
  cfg.dims = s.get<std::vector<Index>>("dims", cfg.dims);
  if (cfg.dims.empty()) throw ConfigError(s.field("dims"), "must not be empty");
  for (std::size_t k = 0; k < cfg.dims.size(); ++k) {
    if (cfg.dims[k] < 1 || (k > 0 && cfg.dims[k] <= cfg.dims[k - 1])) {
      throw ConfigError(s.field("dims"), "must be positive and increasing");
    }
  }
  const auto names = s.get<std::vector<std::string>>("objectives", {"sm", "ssm"});
  if (names.empty()) throw ConfigError(s.field("objectives"), "must not be empty");
  cfg.objectives.clear();
  for (std::size_t k = 0; k < names.size(); ++k) {
    try {
      cfg.objectives.push_back(objective_kind_from_string(names[k]));
    } catch (const std::invalid_argument&) {
      throw ConfigError(s.field("objectives") + "[" + std::to_string(k) + "]",
                        "unknown objective '" + names[k] + "'");
    }
  }
  cfg.reps = s.get<Index>("reps", 5);
  if (cfg.reps < 5) throw ConfigError(s.field("reps"), "must be >= 5");
  cfg.batch_size = positive(s, "batch_size", 100);
  cfg.model = s.get<std::string>("model", cfg.model);
  if (cfg.model != "mlp_energy" && cfg.model != "gaussian") {
    throw ConfigError(s.field("model"), "must be mlp_energy or gaussian");
  }
  cfg.hidden = layer_widths(s, "hidden", cfg.hidden);
  cfg.sampler = parse_kind(s, "sampler", "rademacher", projection_kind_from_string);
  cfg.projections = positive(s, "projections", 1);
  cfg.dsm_sigma = positive_real(s, "dsm_sigma", 0.1);
  cfg.with_parameter_gradient = s.get<bool>("with_parameter_gradient", false);

  return [cfg]() {
    const std::vector<BenchRecord> records = run_bench_scaling(cfg);
    Artifacts a;
    json rows = json::array();
    a.csv = bench_csv_header() + "\n";
    for (const BenchRecord& r : records) {
      rows.push_back(to_json(r));
      a.csv += bench_csv_row(r) + "\n";
    }
    json ratios = json::object();
    for (ObjectiveKind kind : cfg.objectives) {
      double first = 0.0;
      double last = 0.0;
      for (const BenchRecord& r : records) {
        if (r.objective != kind) continue;
        if (r.dim == cfg.dims.front()) first = r.median_seconds;
        if (r.dim == cfg.dims.back()) last = r.median_seconds;
      }
      ratios[to_string(kind)] = last / first;
    }
    a.report["records"] = rows;
    a.report["time_ratio_last_vs_first_dim"] = ratios;
    return a;
  };
}

Runner parse_validate(Section& s, const Common& c) {
  auto checks = s.get<std::vector<std::string>>("checks", {"integration-by-parts"});
  if (checks.empty()) throw ConfigError(s.field("checks"), "must not be empty");
  std::vector<std::string> expanded;
  for (std::size_t k = 0; k < checks.size(); ++k) {
    if (checks[k] == "all") {
      expanded.insert(expanded.end(), check_names().begin(), check_names().end());
    } else if (std::find(check_names().begin(), check_names().end(), checks[k]) == check_names().end()) {
      throw ConfigError(s.field("checks") + "[" + std::to_string(k) + "]",
                        "unknown check '" + checks[k] + "'");
    } else {
      expanded.push_back(checks[k]);
    }
  }
  CheckSettings cs;
  cs.seed = c.seed;
  cs.threads = c.threads;
  cs.sampler = parse_kind(s, "sampler", "rademacher", projection_kind_from_string);
  cs.ibp_grid_points = positive(s, "ibp_grid_points", cs.ibp_grid_points);
  cs.ibp_nodes = s.get<Index>("ibp_nodes", cs.ibp_nodes);
  if (cs.ibp_nodes < 3 || cs.ibp_nodes % 2 == 0) throw ConfigError(s.field("ibp_nodes"), "must be odd and >= 3");
  cs.nce_nodes = s.get<Index>("nce_nodes", cs.nce_nodes);
  if (cs.nce_nodes < 3 || cs.nce_nodes % 2 == 0) throw ConfigError(s.field("nce_nodes"), "must be odd and >= 3");
  cs.hutchinson_draws = positive(s, "hutchinson_draws", cs.hutchinson_draws);
  cs.consistency_sizes = s.get<std::vector<Index>>("consistency_sizes", cs.consistency_sizes);
  if (cs.consistency_sizes.size() < 2) throw ConfigError(s.field("consistency_sizes"), "need >= 2 sizes");
  cs.consistency_reps = positive(s, "consistency_reps", cs.consistency_reps);
  cs.asymptotics_n = positive(s, "asymptotics_n", cs.asymptotics_n);
  cs.asymptotics_reps = positive(s, "asymptotics_reps", cs.asymptotics_reps);
  cs.ordering_n = positive(s, "ordering_n", cs.ordering_n);
  cs.ordering_reps = positive(s, "ordering_reps", cs.ordering_reps);

  return [expanded, cs]() {
    Artifacts a;
    json verdicts = json::array();
    a.csv = "check,passed,metric,threshold\n";
    bool all = true;
    std::string failed;
    for (const std::string& name : expanded) {
      const CheckVerdict v = run_check(name, cs);
      verdicts.push_back(v.to_json());
      std::ostringstream row;
      row.precision(17);
      row << v.name << "," << (v.passed ? 1 : 0) << "," << v.metric << "," << v.threshold << "\n";
      a.csv += row.str();
      if (!v.passed) {
        all = false;
        failed += (failed.empty() ? "" : ", ") + name;
      }
    }
    a.report["checks"] = verdicts;
    a.report["passed"] = all;
    if (!all) a.failure = "checks failed: " + failed;
    return a;
  };
}

Runner parse_estimate_score(Section& s, const Common& c) {
  const Index dim = positive(s, "dim", 2);
  const Vector mean = parse_vector(s, "mean", dim, 0.0);
  const Vector log_scale = parse_vector(s, "log_scale", dim, 0.0);
  const Index n = positive(s, "n", 10000);
  const Index n_test = positive(s, "n_test", 2000);
  const Index entropy_samples = s.get<Index>("entropy_samples", 20000);
  if (entropy_samples < 2) throw ConfigError(s.field("entropy_samples"), "must be >= 2");
  ScoreEstimatorConfig cfg;
  cfg.seed = c.seed;
  cfg.hidden = layer_widths(s, "hidden", cfg.hidden);
  cfg.activation = parse_activation(s, "tanh");
  cfg.objective = parse_kind(s, "objective", "ssm_vr", objective_kind_from_string);
  cfg.sampler = parse_sampler(s, dim);
  cfg.projections = positive(s, "projections", 1);
  cfg.optimizer = parse_optimizer(s);
  cfg.batch_size = positive(s, "batch_size", 100);
  cfg.steps = non_negative(s, "steps", 4000);
  cfg.eval_every = positive(s, "eval_every", 100);
  cfg.patience = non_negative(s, "patience", 0);

  return [=]() {
    const ReparamGaussian target(mean, log_scale);
    const Matrix samples = target.sample(n, mix_seed(c.seed, {kCliDataTag, 0}));
    const ScoreFit fit = fit_score_network(BatchSource::from_dataset(samples, 0.1, c.seed), cfg);
    const Matrix test = target.sample(n_test, mix_seed(c.seed, {kCliDataTag, 1}));
    const VectorFieldFn oracle = [&target](const Matrix& x) { return target.score(x); };
    const ScoreField learned = score_field(fit.network);
    const double error = score_error(learned, oracle, test);

    const std::uint64_t entropy_seed = mix_seed(c.seed, {kCliDataTag, 2});
    const EntropyGradEstimate with_network = entropy_gradient(target, learned, entropy_samples, entropy_seed);
    const EntropyGradEstimate with_oracle =
        entropy_gradient(target, any_score_field(AnyModel(target)), entropy_samples, entropy_seed);
    Vector analytic(2 * dim);
    analytic << Vector::Zero(dim), Vector::Ones(dim);

    Artifacts a;
    a.report["train"] = fit.report.to_json();
    a.report["held_out_score_error"] = error;
    a.report["entropy_gradient"] = {
        {"network", vector_json(with_network.gradient())},
        {"oracle_score", vector_json(with_oracle.gradient())},
        {"analytic", vector_json(analytic)},
        {"max_abs_deviation_network", (with_network.gradient() - analytic).cwiseAbs().maxCoeff()},
        {"mean_standard_error", vector_json(with_network.mean_standard_error)},
        {"log_scale_standard_error", vector_json(with_network.log_scale_standard_error)}};
    a.csv = fit.report.curve_csv();
    a.extra_json.emplace_back("model.json", to_json(AnyModel(fit.network)));
    return a;
  };
}

Runner parse_dsm_grid(Section& s, const Common& c) {
  DsmGridConfig cfg;
  cfg.seed = c.seed;
  cfg.threads = c.threads;
  cfg.sigmas = s.get<std::vector<double>>("sigmas", cfg.sigmas);
  if (cfg.sigmas.empty()) throw ConfigError(s.field("sigmas"), "must not be empty");
  for (double sigma : cfg.sigmas) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError(s.field("sigmas"), "must be > 0");
  }
  const Index dim = positive(s, "dim", 1);
  cfg.truth = GaussianModel::from_moments(parse_vector(s, "data_mean", dim, 0.0),
                                          parse_precision(s, "data_precision", dim));
  cfg.n_train = positive(s, "n_train", cfg.n_train);
  cfg.n_validation = positive(s, "n_validation", cfg.n_validation);
  cfg.backend = s.get<std::string>("backend", cfg.backend);
  if (cfg.backend != "closed_form" && cfg.backend != "adam") {
    throw ConfigError(s.field("backend"), "must be closed_form or adam");
  }
  cfg.train.optimizer = parse_optimizer(s);
  cfg.train.batch_size = positive(s, "batch_size", 100);
  cfg.train.steps = non_negative(s, "steps", 2000);

  return [cfg]() {
    const DsmGridResult result = run_dsm_grid(cfg);
    Artifacts a;
    a.report = result.to_json();
    const Matrix covariance = cfg.truth.precision().inverse();
    const Index d = covariance.rows();
    for (std::size_t k = 0; k < cfg.sigmas.size(); ++k) {
      const double s2 = cfg.sigmas[k] * cfg.sigmas[k];
      const Matrix target = (covariance + s2 * Matrix::Identity(d, d)).inverse();
      a.report["cells"][k]["convolution_precision"] = matrix_json(target);
    }
    a.csv = result.to_csv();
    return a;
  };
}

// ---------------------------------------------------------------------------
// Output.

std::string with_run_columns(const std::string& csv, const std::string& hash, std::uint64_t seed) {
  std::istringstream in(csv);
  std::string out;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out += line + (header ? ",config_hash,seed" : "," + hash + "," + std::to_string(seed)) + "\n";
    header = false;
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
}

void ensure_writable(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("out", "cannot create directory '" + dir + "': " + ec.message());
  const fs::path probe = fs::path(dir) / ".write_probe";
  {
    std::ofstream f(probe);
    if (!f) throw ConfigError("out", "directory '" + dir + "' is not writable");
  }
  fs::remove(probe, ec);
}

json version_info() {
  return {{"ssm", kToolVersion},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                        "." + std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"tomlplusplus", std::to_string(TOML_LIB_MAJOR) + "." + std::to_string(TOML_LIB_MINOR) + "." +
                               std::to_string(TOML_LIB_PATCH)},
          {"cli11", CLI11_VERSION},
          {"compiler", __VERSION__}};
}

void report_error(std::ostream& err, int code, const std::string& kind, const std::string& message,
                  const std::string& field = "") {
  json e = {{"status", "error"}, {"exit_code", code}, {"kind", kind}, {"message", message}};
  if (!field.empty()) e["field"] = field;
  err << e.dump() << "\n";
}

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<unsigned> threads;
  std::vector<Index> dims;
  std::vector<std::string> objectives;
  std::optional<std::string> sampler;
  std::optional<Index> projections;
  std::vector<double> sigma_grid;
  std::vector<std::string> checks;
};

void add_common_flags(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "TOML config file, or a manifest.json to re-run");
  sub->add_option("--seed", f.seed, "Master seed");
  sub->add_option("--out", f.out, "Output directory");
  sub->add_option("--threads", f.threads, "Worker threads (0 = hardware concurrency)");
  sub->add_option("--dims", f.dims, "Comma-separated dimensions")->delimiter(',');
  sub->add_option("--objectives", f.objectives, "Comma-separated objective kinds")->delimiter(',');
  sub->add_option("--sampler", f.sampler, "Projection distribution")
      ->check(CLI::IsMember({"gaussian", "rademacher", "sphere"}));
  sub->add_option("--projections", f.projections, "Projections per point (M)");
  sub->add_option("--sigma-grid", f.sigma_grid, "Comma-separated dsm noise levels")->delimiter(',');
}

}  // namespace

std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::json load_config_file(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config", "file not found: '" + path + "'");
  if (fs::path(path).extension() == ".json") {
    std::ifstream in(path);
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config", std::string("invalid JSON: ") + e.what());
    }
    if (doc.is_object() && doc.contains("config") && doc.contains("config_hash")) return doc["config"];
    return doc;
  }
  try {
    const toml::table table = toml::parse_file(path);
    return toml_to_json(table, "");
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "invalid TOML at line " << e.source().begin.line << ": " << e.description();
    throw ConfigError("config", msg.str());
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sliced score matching: training, benchmarks and validation checks", "ssm"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", kToolVersion);
  Flags flags;
  std::map<std::string, CLI::App*> subs;
  const std::map<std::string, std::string> descriptions{
      {"train", "Train a model on a Gaussian or CSV dataset"},
      {"bench-scaling", "Time objectives across data dimensions"},
      {"validate", "Run numerical checks of the estimator theory"},
      {"estimate-score", "Fit a score network to samples and estimate entropy gradients"},
      {"dsm-grid", "Grid search over the dsm noise level"}};
  for (const std::string& name : kCommands) {
    CLI::App* sub = app.add_subcommand(name, descriptions.at(name));
    add_common_flags(sub, flags);
    subs[name] = sub;
  }
  subs["validate"]
      ->add_option("--check", flags.checks, "Checks to run (comma-separated or 'all')")
      ->delimiter(',');

  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  if (argv.empty()) argv.push_back("ssm");
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    report_error(err, kExitUsage, "usage", e.what());
    return kExitUsage;
  }
  std::string command;
  for (const auto& [name, sub] : subs) {
    if (sub->parsed()) command = name;
  }

  json raw = json::object();
  Runner runner;
  Common common;
  json effective;
  try {
    if (!flags.config.empty()) raw = load_config_file(flags.config);
    if (!raw.is_object()) throw ConfigError("config", "top level must be a table");
    auto override_in = [&](const std::string& key, const json& value) {
      if (!raw.contains(command) || raw[command].is_null()) raw[command] = json::object();
      if (!raw[command].is_object()) throw ConfigError(command, "expected a table");
      raw[command][key] = value;
    };
    if (flags.seed) raw["seed"] = *flags.seed;
    if (flags.out) raw["out"] = *flags.out;
    if (flags.threads) raw["threads"] = *flags.threads;
    if (!flags.dims.empty()) override_in("dims", flags.dims);
    if (!flags.objectives.empty()) override_in("objectives", flags.objectives);
    if (flags.sampler) override_in("sampler", *flags.sampler);
    if (flags.projections) override_in("projections", *flags.projections);
    if (!flags.sigma_grid.empty()) override_in("sigmas", flags.sigma_grid);
    if (!flags.checks.empty()) override_in("checks", flags.checks);

    Section root(raw, "");
    common.seed = root.get<std::uint64_t>("seed", 0);
    common.out = root.get<std::string>("out", "runs/" + command);
    common.threads = root.get<unsigned>("threads", 0);
    for (const std::string& name : kCommands) root.ignore(name);
    root.finish();

    Section section(raw.contains(command) ? raw[command] : json(), command);
    if (command == "train") runner = parse_train(section, common);
    if (command == "bench-scaling") runner = parse_bench(section, common);
    if (command == "validate") runner = parse_validate(section, common);
    if (command == "estimate-score") runner = parse_estimate_score(section, common);
    if (command == "dsm-grid") runner = parse_dsm_grid(section, common);
    section.finish();

    effective = root.effective();
    effective[command] = section.effective();
    ensure_writable(common.out);
  } catch (const ConfigError& e) {
    report_error(err, kExitUsage, "config", e.what(), e.field());
    return kExitUsage;
  }

  json hashed = effective;
  hashed.erase("out");
  const std::string hash = config_hash(hashed);
  const fs::path dir(common.out);
  json manifest = {{"tool", "ssm"},
                   {"command", command},
                   {"config", effective},
                   {"config_hash", hash},
                   {"seed", common.seed},
                   {"versions", version_info()}};
  try {
    Artifacts a = runner();
    a.report["config_hash"] = hash;
    a.report["seed"] = common.seed;
    a.report["command"] = command;
    write_text(dir / "report.json", a.report.dump(2) + "\n");
    write_text(dir / "results.csv", with_run_columns(a.csv, hash, common.seed));
    json artifacts = {"report.json", "results.csv"};
    for (auto& [name, doc] : a.extra_json) {
      doc["run"] = {{"config_hash", hash}, {"seed", common.seed}};
      write_text(dir / name, doc.dump(2) + "\n");
      artifacts.push_back(name);
    }
    manifest["artifacts"] = artifacts;
    manifest["status"] = a.failure ? "failed" : "ok";
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    if (a.failure) {
      report_error(err, kExitRuntime, "check", *a.failure);
      return kExitRuntime;
    }
    out << json{{"status", "ok"}, {"command", command}, {"out", dir.string()}, {"config_hash", hash}}.dump()
        << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    manifest["status"] = "error";
    manifest["error"] = e.what();
    try {
      write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    } catch (const std::exception&) {
    }
    report_error(err, kExitRuntime, "runtime", e.what());
    return kExitRuntime;
  }
}

}  // namespace ssm
