#pragma once

// JSON documents for models: {"model": kind, "dim": D, "params": {name:
// flat array}}. Network architectures travel in "params" too ("hidden" as
// layer widths) with the activation name alongside.

#include <string>
#include <variant>

#include <json.hpp>

#include "ssm/score_field.hpp"

namespace ssm {

using AnyModel = std::variant<GaussianModel, KefModel, MlpEnergy, ScoreNetwork, ReparamGaussian>;

/// Kind string stored under "model".
std::string model_kind(const AnyModel& model);

nlohmann::json to_json(const AnyModel& model);

/// Throws std::invalid_argument naming the offending field.
AnyModel model_from_json(const nlohmann::json& doc);

/// Score field of any trainable model (ReparamGaussian uses its analytic
/// score).
ScoreField any_score_field(const AnyModel& model);

/// Same model with a new trainable parameter vector.
AnyModel with_parameters(const AnyModel& model, const Vector& theta);

}  // namespace ssm
