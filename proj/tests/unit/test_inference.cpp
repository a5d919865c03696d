#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "cks/checkpoint.hpp"
#include "cks/error.hpp"
#include "cks/inference.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

namespace {

std::vector<cks::Detection> random_detections(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> pos(0.0, 40.0);
  // Coarse scores produce ties, which exercise the tie-break.
  std::uniform_int_distribution<int> score(1, 8), stride(0, 1), cell(0, 9);
  std::vector<cks::Detection> d;
  for (int i = 0; i < n; ++i) {
    cks::Detection x;
    x.location = {pos(rng), pos(rng)};
    x.score = score(rng) / 8.0;
    x.stride = stride(rng) ? 4 : 8;
    x.cell_y = cell(rng);
    x.cell_x = i;
    d.push_back(x);
  }
  return d;
}

bool same_locations(const std::vector<cks::Detection>& a, const std::vector<cks::Detection>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].location != b[i].location || a[i].score != b[i].score) return false;
  }
  return true;
}

TEST(Decode, SpecExampleCell) {
  cks::DetectionGrids g;
  g.logits[4] = torch::full({8, 8}, -10.0);
  g.logits[4][2][3] = 10.0;
  g.offsets[4] = torch::zeros({2, 8, 8});
  g.offsets[4][0][2][3] = 0.5;
  const auto d = cks::decode_detections(g, 0.5);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].location, (cks::Point{10.0, 12.0}));
  EXPECT_EQ(d[0].stride, 4);
  EXPECT_EQ(d[0].cell_y, 2);
  EXPECT_EQ(d[0].cell_x, 3);
}

TEST(Decode, ThresholdAndOrdering) {
  cks::DetectionGrids g;
  g.logits[4] = torch::full({4, 4}, -10.0);
  g.logits[8] = torch::full({2, 2}, -10.0);
  g.logits[4][0][0] = 1.0;
  g.logits[8][1][1] = 1.0;
  g.logits[4][3][3] = 3.0;
  g.offsets[4] = torch::zeros({2, 4, 4});
  g.offsets[8] = torch::zeros({2, 2, 2});
  const auto d = cks::decode_detections(g, 0.5);
  ASSERT_EQ(d.size(), 3u);
  EXPECT_EQ(d[0].cell_y, 3);
  EXPECT_EQ(d[1].stride, 4);  // tie between strides resolved toward the finer one
  EXPECT_EQ(d[2].stride, 8);
  EXPECT_TRUE(cks::decode_detections(g, 0.99).empty());
}

TEST(Decode, LocationsClampedIntoImage) {
  cks::DetectionGrids g;
  g.logits[4] = torch::full({2, 2}, 5.0);
  g.offsets[4] = torch::full({2, 2, 2}, 3.0);
  for (const auto& d : cks::decode_detections(g, 0.5)) {
    EXPECT_LE(d.location.y, 7.0);
    EXPECT_LE(d.location.x, 7.0);
  }
}

TEST(Nms, RadiusBoundaryIsKept) {
  std::vector<cks::Detection> d(2);
  d[0].score = 0.9;
  d[0].location = {0, 0};
  d[1].score = 0.8;
  d[1].location = {0, 5};
  EXPECT_EQ(cks::nms(d, 5.0).size(), 2u);
  EXPECT_EQ(cks::nms(d, 5.0001).size(), 1u);
}

TEST(Nms, MatchesSuppressionOracle) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    auto d = random_detections(rng, std::uniform_int_distribution<int>(0, 10)(rng));
    const double r = std::uniform_real_distribution<double>(1.0, 15.0)(rng);
    cks::sort_detections(d);
    EXPECT_TRUE(same_locations(cks::nms(d, r), oracle::nms(d, r)));
  }
}

TEST(Nms, IndependentOfInputOrderAfterCanonicalSort) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 100; ++trial) {
    auto d = random_detections(rng, 12);
    auto e = d;
    std::shuffle(e.begin(), e.end(), rng);
    cks::sort_detections(d);
    cks::sort_detections(e);
    EXPECT_TRUE(same_locations(cks::nms(d, 6.0), cks::nms(e, 6.0)));
  }
}

TEST(Nms, KeptDetectionsArePairwiseSeparated) {
  std::mt19937_64 rng(23);
  auto d = random_detections(rng, 60);
  cks::sort_detections(d);
  const auto kept = cks::nms(d, 7.0);
  for (std::size_t i = 0; i < kept.size(); ++i)
    for (std::size_t j = i + 1; j < kept.size(); ++j)
      EXPECT_GE(std::hypot(kept[i].location.y - kept[j].location.y, kept[i].location.x - kept[j].location.x), 7.0);
}

TEST(ResolveMasks, ArgmaxWithThreshold) {
  auto p = torch::zeros({2, 2, 3});
  p[0][0][0] = 0.9;
  p[1][0][0] = 0.8;
  p[0][0][1] = 0.6;
  p[1][0][1] = 0.7;
  p[1][1][2] = 0.4;
  const auto m = cks::resolve_instance_masks(p, 0.5, 2, 3);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[0].at<std::uint8_t>(0, 0), 1);
  EXPECT_EQ(m[1].at<std::uint8_t>(0, 0), 0);
  EXPECT_EQ(m[1].at<std::uint8_t>(0, 1), 1);
  EXPECT_EQ(m[1].at<std::uint8_t>(1, 2), 0);
}

TEST(ResolveMasks, DisjointOnRandomInputs) {
  torch::manual_seed(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = cks::resolve_instance_masks(torch::rand({5, 12, 14}), 0.3, 10, 11);
    cv::Mat sum = cv::Mat::zeros(10, 11, CV_8UC1);
    for (const auto& x : m) {
      EXPECT_EQ(x.size(), cv::Size(11, 10));
      sum += x;
    }
    double hi;
    cv::minMaxLoc(sum, nullptr, &hi);
    EXPECT_LE(hi, 1.0);
  }
}

TEST(LabelMap, LabelsFollowListOrder) {
  std::vector<cks::InstancePrediction> p(2);
  p[0].mask = fixtures::disk_mask(16, 16, 4, 4, 2);
  p[1].mask = fixtures::disk_mask(16, 16, 11, 11, 2);
  const auto label = cks::render_label_map(p, 16, 16);
  EXPECT_EQ(label.type(), CV_16UC1);
  EXPECT_EQ(label.at<std::uint16_t>(4, 4), 1);
  EXPECT_EQ(label.at<std::uint16_t>(11, 11), 2);
  EXPECT_EQ(label.at<std::uint16_t>(0, 15), 0);
}

TEST(Predict, UntrainedModelGivesValidDisjointMasks) {
  torch::manual_seed(0);
  cks::PrincipalModel model(fixtures::tiny_principal());
  cv::Mat img(40, 50, CV_32FC1);
  cv::randu(img, 0.0, 1.0);
  cks::InferenceConfig cfg;
  cfg.score_threshold = 0.0;
  cfg.max_detections = 30;
  const auto preds = cks::predict(model, img, cfg, 8.0);
  EXPECT_LE(preds.size(), 30u);
  cv::Mat sum = cv::Mat::zeros(40, 50, CV_8UC1);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    EXPECT_EQ(preds[i].mask.size(), cv::Size(50, 40));
    EXPECT_GT(cv::countNonZero(preds[i].mask), 0);
    EXPECT_GE(preds[i].score, 0.0);
    EXPECT_LE(preds[i].score, 1.0);
    if (i > 0) EXPECT_GE(preds[i - 1].score, preds[i].score);
    sum += preds[i].mask;
  }
  double hi = 0;
  cv::minMaxLoc(sum, nullptr, &hi);
  EXPECT_LE(hi, 1.0);
}

TEST(Predict, DeterministicAcrossCalls) {
  torch::manual_seed(0);
  cks::PrincipalModel model(fixtures::tiny_principal());
  cv::Mat img(32, 32, CV_32FC1);
  cv::randu(img, 0.0, 1.0);
  cks::InferenceConfig cfg;
  cfg.score_threshold = 0.0;
  const auto a = cks::predict(model, img, cfg, 8.0);
  const auto b = cks::predict(model, img, cfg, 8.0);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].location, b[i].location);
    EXPECT_EQ(cv::countNonZero(a[i].mask != b[i].mask), 0);
  }
}

TEST(Predict, EffectiveRadiusDefaultsToHalfPrior) {
  cks::InferenceConfig c;
  EXPECT_DOUBLE_EQ(cks::effective_nms_radius(c, 20.0), 10.0);
  c.nms_radius = 3.0;
  EXPECT_DOUBLE_EQ(cks::effective_nms_radius(c, 20.0), 3.0);
}

TEST(LoadPrincipal, RoundTripAndErrors) {
  torch::manual_seed(1);
  const auto dir = fixtures::temp_dir("load_principal");
  cks::PrincipalModel model(fixtures::tiny_principal());
  torch::serialize::OutputArchive out;
  cks::checkpoint::write_int(out, "schema_version", cks::checkpoint::kSchemaVersion);
  cks::checkpoint::write_principal(out, model);
  cks::checkpoint::save_archive(out, dir / "p.pt");
  auto back = cks::load_principal(dir / "p.pt");
  const auto a = model->parameters(), b = back->parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(torch::equal(a[i], b[i]));
  EXPECT_THROW(cks::load_principal(dir / "missing.pt"), cks::LoadError);
}

TEST(Records, RleRecordsDecodeToMasks) {
  std::vector<cks::InstancePrediction> p(1);
  p[0].mask = fixtures::disk_mask(12, 10, 5, 5, 3);
  p[0].score = 0.7;
  const auto r = cks::prediction_records("img", p);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].at("image_id"), "img");
  EXPECT_EQ(r[0].at("segmentation").at("size"), (nlohmann::json{12, 10}));
}

}  // namespace
