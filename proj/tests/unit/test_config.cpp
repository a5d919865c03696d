#include <cstdlib>
#include <fstream>

#include <gtest/gtest.h>

#include "cks/config.hpp"
#include "cks/error.hpp"
#include "fixtures.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

TEST(RunConfig, DefaultsValidateAndRoundTrip) {
  const cks::RunConfig c;
  cks::validate(c);
  EXPECT_EQ(cks::to_json(cks::run_config_from_json(cks::to_json(c))), cks::to_json(c));
}

TEST(RunConfig, NonDefaultRoundTrip) {
  auto c = fixtures::tiny_run("out/x", cks::TrainMode::Supervised);
  c.train.lr_schedule = cks::LrSchedule::BackboneSplit;
  c.losses.d_by_group = {{"a", 3.0}};
  c.data.prescale = {{"a", 0.5}};
  const auto back = cks::run_config_from_json(cks::to_json(c));
  EXPECT_EQ(cks::to_json(back), cks::to_json(c));
  EXPECT_TRUE(cks::config_diff(back, c).empty());
}

TEST(RunConfig, UnknownKeyIsRejectedWithPath) {
  auto j = cks::to_json(cks::RunConfig{});
  j["train"]["totl_steps"] = 5;
  try {
    cks::run_config_from_json(j);
    FAIL();
  } catch (const cks::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("totl_steps"), std::string::npos) << e.what();
  }
}

TEST(RunConfig, SchemaVersionIsChecked) {
  auto j = cks::to_json(cks::RunConfig{});
  j["schema_version"] = 99;
  EXPECT_THROW(cks::run_config_from_json(j), cks::ConfigError);
  j.erase("schema_version");
  EXPECT_THROW(cks::run_config_from_json(j), cks::ConfigError);
}

TEST(RunConfig, InvalidValues) {
  auto bad = [](auto mutate) {
    cks::RunConfig c;
    mutate(c);
    EXPECT_THROW(cks::validate(c), cks::ConfigError);
  };
  bad([](cks::RunConfig& c) { c.train.batch = 0; });
  bad([](cks::RunConfig& c) { c.train.lr_finetune = 1.0; });
  bad([](cks::RunConfig& c) { c.losses.pi = -1.0; });
  bad([](cks::RunConfig& c) { c.data.format = "tiff"; });
  bad([](cks::RunConfig& c) { c.data.format = "coco"; });
  bad([](cks::RunConfig& c) { c.collaborator.in_channels = 3; });
  bad([](cks::RunConfig& c) { c.inference.score_threshold = 2.0; });
}

TEST(RunConfig, FileLoadingAndEnvironmentOverride) {
  const auto dir = fixtures::temp_dir("config_file");
  const auto c = fixtures::tiny_run("runs/from_file");
  cks::write_run_config(dir / "c.json", c);
  EXPECT_EQ(cks::load_run_config(dir / "c.json").output_dir, "runs/from_file");
  ::setenv("CKS_OUTPUT_DIR", "/tmp/elsewhere", 1);
  EXPECT_EQ(cks::load_run_config(dir / "c.json").output_dir, "/tmp/elsewhere");
  ::unsetenv("CKS_OUTPUT_DIR");
  EXPECT_THROW(cks::load_run_config(dir / "missing.json"), cks::LoadError);
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_THROW(cks::load_run_config(dir / "broken.json"), cks::ConfigError);
}

TEST(ConfigDiff, ListsDottedKeys) {
  cks::RunConfig a, b;
  b.losses.pi = 0.0;
  b.collaborator.foreground_variant = cks::ForegroundVariant::A2;
  EXPECT_EQ(cks::config_diff(a, b), (std::vector<std::string>{"collaborator.foreground_variant", "losses.pi"}));
}

TEST(TrainingData, SyntheticCentroidsAndPrescale) {
  auto c = fixtures::tiny_run("unused");
  c.data.point_source = "centroids";
  c.data.prescale = {{"synthetic", 2.0}};
  const auto data = cks::load_training_data(c.data);
  ASSERT_EQ(data.size(), 2u);
  EXPECT_EQ(data[0].height(), 64);
  for (const auto& s : data) {
    const auto expected = cks::centroids_from_masks(s.gt_masks);
    ASSERT_EQ(s.points.size(), expected.size());
    // Centroids are taken at native resolution and scaled, so compare loosely.
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(s.points[i].y, expected[i].y, 1.5);
  }
}

TEST(TrainingData, DatasetDirectoryWithPointTable) {
  const auto dir = fixtures::temp_dir("config_dataset");
  cks::SyntheticParams p;
  p.n_images = 2;
  p.image_size = 32;
  p.radius_min = 3;
  p.radius_max = 4;
  cks::write_dataset(dir / "data", cks::generate_synthetic(p).samples);
  cks::write_point_table(dir / "pts.csv", {{"synth_0", {{5.0, 6.0}}}});
  cks::DatasetConfig d;
  d.format = "dataset";
  d.path = (dir / "data").string();
  d.points = (dir / "pts.csv").string();
  const auto data = cks::load_training_data(d);
  ASSERT_EQ(data.size(), 2u);
  EXPECT_EQ(data[0].points, (std::vector<cks::Point>{{5.0, 6.0}}));
  EXPECT_TRUE(data[1].points.empty());
}

TEST(TrainingData, ModeChecks) {
  auto c = fixtures::tiny_run("unused");
  auto data = cks::load_training_data(c.data);
  EXPECT_NO_THROW(cks::check_dataset_for_mode(data, cks::TrainMode::Cks));
  EXPECT_NO_THROW(cks::check_dataset_for_mode(data, cks::TrainMode::Supervised));
  auto no_points = data;
  for (auto& s : no_points) s.points.clear();
  EXPECT_THROW(cks::check_dataset_for_mode(no_points, cks::TrainMode::Cks), cks::ConfigError);
  auto no_masks = data;
  for (auto& s : no_masks) s.gt_masks.clear();
  EXPECT_THROW(cks::check_dataset_for_mode(no_masks, cks::TrainMode::Supervised), cks::ConfigError);
  EXPECT_THROW(cks::check_dataset_for_mode({}, cks::TrainMode::Cks), cks::ConfigError);
}

TEST(DeskConfig, ShippedConfigLoads) {
  const auto c = cks::load_run_config(fs::path(CKS_SOURCE_DIR) / "configs" / "desk_cks.json");
  EXPECT_EQ(c.train.mode, cks::TrainMode::Cks);
  EXPECT_EQ(c.data.synthetic.n_images, 8);
}

}  // namespace
