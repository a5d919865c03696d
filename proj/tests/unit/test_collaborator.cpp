#include <gtest/gtest.h>

#include "cks/collaborator.hpp"
#include "cks/error.hpp"
#include "oracles.hpp"

namespace {

cks::CollaboratorConfig variant(cks::ForegroundVariant a, cks::BorderVariant b) {
  cks::CollaboratorConfig c;
  c.foreground_variant = a;
  c.border_variant = b;
  return c;
}

TEST(Collaborator, ParameterCountsMatchLayerByLayerOracle) {
  using A = cks::ForegroundVariant;
  using B = cks::BorderVariant;
  const std::vector<std::tuple<A, int, B>> cases{{A::A1, 2, B::B1}, {A::A2, 3, B::B1}, {A::A3, 4, B::B1}, {A::A1, 2, B::B2}};
  for (const auto& [a, depth, b] : cases) {
    const auto cfg = variant(a, b);
    const long long border = b == B::B1 ? oracle::plain_cnn_params(1, 32, 3) : oracle::unet_params(1, 32, 2);
    const long long expected = oracle::unet_params(1, 16, depth) + border;
    cks::CollaboratorModel model(cfg);
    EXPECT_EQ(cks::parameter_count(*model), expected) << cks::to_string(a) << cks::to_string(b);
    EXPECT_EQ(cks::parameter_count(cfg), expected);
  }
}

TEST(Collaborator, HandCountForSmallestVariant) {
  EXPECT_EQ(oracle::unet_params(1, 16, 2), 129553);
  EXPECT_EQ(oracle::plain_cnn_params(1, 32, 3), 18849);
  EXPECT_EQ(cks::parameter_count(variant(cks::ForegroundVariant::A1, cks::BorderVariant::B1)), 148402);
}

TEST(Collaborator, CapacityGrowsWithVariant) {
  using A = cks::ForegroundVariant;
  const auto b1 = cks::BorderVariant::B1;
  EXPECT_LT(cks::parameter_count(variant(A::A1, b1)), cks::parameter_count(variant(A::A2, b1)));
  EXPECT_LT(cks::parameter_count(variant(A::A2, b1)), cks::parameter_count(variant(A::A3, b1)));
  EXPECT_LT(cks::parameter_count(variant(A::A1, b1)), cks::parameter_count(variant(A::A1, cks::BorderVariant::B2)));
}

TEST(Collaborator, OutputsAreProbabilityMapsOfInputSize) {
  torch::manual_seed(0);
  for (auto a : {cks::ForegroundVariant::A1, cks::ForegroundVariant::A3}) {
    cks::CollaboratorModel model(variant(a, cks::BorderVariant::B2));
    const int d = cks::required_divisor(model->config());
    const auto x = torch::rand({1, 1, 2 * d, 3 * d});
    const auto maps = model->forward(x);
    EXPECT_EQ(maps.foreground.sizes(), (std::vector<int64_t>{2 * d, 3 * d}));
    EXPECT_EQ(maps.border.sizes(), (std::vector<int64_t>{2 * d, 3 * d}));
    for (const auto& m : {maps.foreground, maps.border}) {
      EXPECT_GE(m.min().item<float>(), 0.0f);
      EXPECT_LE(m.max().item<float>(), 1.0f);
    }
  }
}

TEST(Collaborator, RequiredDivisor) {
  EXPECT_EQ(cks::required_divisor(variant(cks::ForegroundVariant::A1, cks::BorderVariant::B1)), 4);
  EXPECT_EQ(cks::required_divisor(variant(cks::ForegroundVariant::A3, cks::BorderVariant::B1)), 16);
}

TEST(Collaborator, RejectsIndivisibleInput) {
  cks::CollaboratorModel model(cks::CollaboratorConfig{});
  EXPECT_THROW(model->forward(torch::rand({1, 1, 30, 32})), cks::InvalidArgument);
}

TEST(CollaboratorConfig, JsonRoundTripAndUnknownVariant) {
  const auto cfg = variant(cks::ForegroundVariant::A2, cks::BorderVariant::B2);
  EXPECT_EQ(cks::to_json(cks::collaborator_config_from_json(cks::to_json(cfg))), cks::to_json(cfg));
  auto j = cks::to_json(cfg);
  j["foreground_variant"] = "a9";
  EXPECT_THROW(cks::collaborator_config_from_json(j), cks::ConfigError);
}

}  // namespace
