#include "ssm/model_io.hpp"

#include <stdexcept>

namespace ssm {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

std::vector<double> flat(const Vector& v) { return {v.begin(), v.end()}; }

// Row-major flattening so the array reads point by point.
std::vector<double> flat_rows(const Matrix& m) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(m.size()));
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
  return out;
}

const nlohmann::json& field(const nlohmann::json& obj, const std::string& key,
                            const std::string& path) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw std::invalid_argument("missing field '" + path + key + "'");
  }
  return obj.at(key);
}

Vector read_vector(const nlohmann::json& params, const std::string& key,
                   std::optional<Index> size = std::nullopt) {
  const nlohmann::json& arr = field(params, key, "params.");
  if (!arr.is_array()) throw std::invalid_argument("field 'params." + key + "' must be an array");
  Vector out(static_cast<Index>(arr.size()));
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_number()) {
      throw std::invalid_argument("field 'params." + key + "' must hold numbers");
    }
    out(static_cast<Index>(i)) = arr[i].get<double>();
  }
  if (size && out.size() != *size) {
    throw std::invalid_argument("field 'params." + key + "' must have " +
                                std::to_string(*size) + " entries");
  }
  return out;
}

Matrix read_rows(const nlohmann::json& params, const std::string& key, Index cols) {
  const Vector v = read_vector(params, key);
  if (cols < 1 || v.size() % cols != 0) {
    throw std::invalid_argument("field 'params." + key + "' is not a multiple of dim");
  }
  Matrix out(v.size() / cols, cols);
  for (Index r = 0; r < out.rows(); ++r)
    for (Index c = 0; c < cols; ++c) out(r, c) = v(r * cols + c);
  return out;
}

std::vector<Index> read_hidden(const nlohmann::json& params) {
  std::vector<Index> out;
  for (double h : flat(read_vector(params, "hidden"))) {
    if (h < 1 || h != static_cast<double>(static_cast<Index>(h))) {
      throw std::invalid_argument("field 'params.hidden' must hold positive integers");
    }
    out.push_back(static_cast<Index>(h));
  }
  return out;
}

const char* activation_name(Activation a) { return a == Activation::tanh ? "tanh" : "softplus"; }

Activation read_activation(const nlohmann::json& doc) {
  const std::string name = doc.value("activation", std::string("softplus"));
  if (name == "tanh") return Activation::tanh;
  if (name == "softplus") return Activation::softplus;
  throw std::invalid_argument("field 'activation' must be tanh or softplus");
}

std::vector<double> hidden_of(const Mlp& net) {
  const auto& sizes = net.sizes();
  return {sizes.begin() + 1, sizes.end() - 1};
}

}  // namespace

std::string model_kind(const AnyModel& model) {
  return std::visit(overloaded{[](const GaussianModel&) { return "gaussian"; },
                               [](const KefModel&) { return "kef"; },
                               [](const MlpEnergy&) { return "mlp_energy"; },
                               [](const ScoreNetwork&) { return "score_network"; },
                               [](const ReparamGaussian&) { return "reparam_gaussian"; }},
                    model);
}

nlohmann::json to_json(const AnyModel& model) {
  nlohmann::json doc{{"model", model_kind(model)}};
  std::visit(
      overloaded{
          [&](const GaussianModel& m) {
            doc["dim"] = m.dim();
            doc["params"] = {{"mean", flat(m.mean())},
                             {"diag_raw", flat(m.diag_raw())},
                             {"offdiag", flat(m.offdiag())}};
          },
          [&](const KefModel& m) {
            doc["dim"] = m.dim();
            doc["params"] = {{"alpha", flat(m.alpha())},
                             {"inducing_points", flat_rows(m.inducing_points())},
                             {"bandwidths", flat(m.kernel().bandwidths)},
                             {"weights", flat(m.kernel().weights)},
                             {"base_scale", std::vector<double>{m.base_scale()}}};
            if (m.features()) {
              doc["params"]["features_w1"] = flat_rows(m.features()->w1);
              doc["params"]["features_b1"] = flat(m.features()->b1);
              doc["params"]["features_w2"] = flat_rows(m.features()->w2);
            }
          },
          [&](const MlpEnergy& m) {
            doc["dim"] = m.dim();
            doc["activation"] = activation_name(m.network().activation());
            doc["params"] = {{"hidden", hidden_of(m.network())}, {"theta", flat(m.parameters())}};
          },
          [&](const ScoreNetwork& m) {
            doc["dim"] = m.dim();
            doc["activation"] = activation_name(m.network().activation());
            doc["params"] = {{"hidden", hidden_of(m.network())}, {"theta", flat(m.parameters())}};
          },
          [&](const ReparamGaussian& m) {
            doc["dim"] = m.dim();
            doc["params"] = {{"mean", flat(m.mean())}, {"log_scale", flat(m.log_scale())}};
          }},
      model);
  return doc;
}

AnyModel model_from_json(const nlohmann::json& doc) {
  const nlohmann::json& kind_json = field(doc, "model", "");
  if (!kind_json.is_string()) throw std::invalid_argument("field 'model' must be a string");
  const std::string kind = kind_json.get<std::string>();
  const nlohmann::json& dim_json = field(doc, "dim", "");
  if (!dim_json.is_number_integer() || dim_json.get<Index>() < 1) {
    throw std::invalid_argument("field 'dim' must be a positive integer");
  }
  const Index d = dim_json.get<Index>();
  const nlohmann::json& p = field(doc, "params", "");

  if (kind == "gaussian") {
    return GaussianModel(read_vector(p, "mean", d), read_vector(p, "diag_raw", d),
                         read_vector(p, "offdiag", d * (d - 1) / 2));
  }
  if (kind == "kef") {
    const Matrix z = read_rows(p, "inducing_points", d);
    std::optional<FeatureExtractor> fx;
    if (p.contains("features_w1")) {
      FeatureExtractor f;
      f.w1 = read_rows(p, "features_w1", d);
      f.b1 = read_vector(p, "features_b1", f.w1.rows());
      f.w2 = read_rows(p, "features_w2", f.w1.rows());
      if (f.w2.rows() != d) throw std::invalid_argument("field 'params.features_w2' has wrong shape");
      fx = std::move(f);
    }
    return KefModel(z, read_vector(p, "alpha", z.rows()),
                    KernelMixture{read_vector(p, "bandwidths"), read_vector(p, "weights")},
                    read_vector(p, "base_scale", 1)(0), std::move(fx));
  }
  if (kind == "mlp_energy" || kind == "score_network") {
    const std::vector<Index> hidden = read_hidden(p);
    const Activation act = read_activation(doc);
    const Vector theta = read_vector(p, "theta");
    if (kind == "mlp_energy") {
      if (theta.size() != MlpEnergy::random(d, 0, hidden, act).num_parameters()) {
        throw std::invalid_argument("field 'params.theta' has the wrong length");
      }
      return MlpEnergy(d, hidden, theta, act);
    }
    if (theta.size() != ScoreNetwork::random(d, 0, hidden, act).num_parameters()) {
      throw std::invalid_argument("field 'params.theta' has the wrong length");
    }
    return ScoreNetwork(d, hidden, theta, act);
  }
  if (kind == "reparam_gaussian") {
    return ReparamGaussian(read_vector(p, "mean", d), read_vector(p, "log_scale", d));
  }
  throw std::invalid_argument("field 'model': unknown kind '" + kind + "'");
}

ScoreField any_score_field(const AnyModel& model) {
  return std::visit(
      overloaded{[](const ReparamGaussian& m) {
                   const Vector prec = (-2.0 * m.log_scale().array()).exp();
                   return score_field(GaussianModel::from_moments(m.mean(), prec.asDiagonal()));
                 },
                 [](const auto& m) { return score_field(m); }},
      model);
}

AnyModel with_parameters(const AnyModel& model, const Vector& theta) {
  return std::visit(
      overloaded{[&](const ReparamGaussian&) -> AnyModel {
                   throw std::invalid_argument("reparam_gaussian has no trainable parameters");
                 },
                 [&](const auto& m) -> AnyModel { return m.with_parameters(theta); }},
      model);
}

}  // namespace ssm
