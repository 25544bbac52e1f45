#include <gtest/gtest.h>

#include "ssm/model_io.hpp"
#include "ssm/random.hpp"

namespace ssm {
namespace {

KefModel small_kef(bool with_features) {
  const Matrix z = standard_normal(5, 2, 3, 0);
  KernelMixture kernel{Vector::Constant(2, 1.0), Vector::Constant(2, 0.5)};
  kernel.bandwidths[1] = 2.0;
  std::optional<FeatureExtractor> features;
  if (with_features) features = FeatureExtractor::random(2, 4, 9);
  return KefModel(z, standard_normal(5, 1, 4, 0).col(0), kernel, 1.5, features);
}

std::vector<AnyModel> zoo() {
  Matrix p(2, 2);
  p << 2.0, 0.3, 0.3, 1.0;
  return {GaussianModel::from_moments(Vector::Constant(2, 0.4), p),
          small_kef(false),
          small_kef(true),
          MlpEnergy::random(2, 1, {8, 8}),
          ScoreNetwork::random(2, 2, {8}, Activation::softplus),
          ReparamGaussian(Vector::Constant(2, 1.0), Vector::Constant(2, -0.5))};
}

TEST(ModelIo, RoundTripPreservesScores) {
  const Matrix x = standard_normal(7, 2, 11, 0);
  for (const AnyModel& model : zoo()) {
    const nlohmann::json doc = to_json(model);
    EXPECT_EQ(doc.at("model"), model_kind(model));
    const AnyModel back = model_from_json(nlohmann::json::parse(doc.dump()));
    EXPECT_EQ(model_kind(back), model_kind(model));
    const Matrix a = any_score_field(model).value(x);
    const Matrix b = any_score_field(back).value(x);
    EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-12) << model_kind(model);
    EXPECT_EQ(to_json(back), doc) << model_kind(model);
  }
}

TEST(ModelIo, MissingFieldIsNamed) {
  nlohmann::json doc = to_json(AnyModel(GaussianModel::standard(2)));
  doc["params"].erase("mean");
  try {
    model_from_json(doc);
    FAIL() << "expected invalid_argument";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("params.mean"), std::string::npos) << e.what();
  }
}

TEST(ModelIo, RejectsUnknownKindAndWrongLength) {
  EXPECT_THROW(model_from_json({{"model", "wavelet"}, {"dim", 1}, {"params", nlohmann::json::object()}}),
               std::invalid_argument);
  nlohmann::json doc = to_json(AnyModel(MlpEnergy::random(2, 0, {4})));
  doc["params"]["theta"].erase(0);
  EXPECT_THROW(model_from_json(doc), std::invalid_argument);
}

TEST(ModelIo, WithParametersReplacesTheta) {
  const AnyModel model = MlpEnergy::random(2, 5, {4});
  const ScoreField field = any_score_field(model);
  const Vector theta = field.parameters() * 0.5;
  const AnyModel scaled = with_parameters(model, theta);
  EXPECT_EQ(any_score_field(scaled).parameters(), theta);
}

}  // namespace
}  // namespace ssm
