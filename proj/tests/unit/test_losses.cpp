#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cks/error.hpp"
#include "cks/losses.hpp"
#include "fd_cases.hpp"
#include "oracles.hpp"

namespace {

cks::InstanceWindows windows_at(const std::vector<cks::Point>& locs, torch::Tensor logits, int H, int W) {
  return cks::make_windows(locs, std::move(logits), static_cast<int>(logits.size(-1)), H, W);
}

TEST(TotalLosses, WeightedSumsWithUnitWeights) {
  const cks::LossWeights w;
  const auto b = cks::total_losses({1.0, 2.0, 3.0, 4.0, 0.0}, w);
  EXPECT_DOUBLE_EQ(b.l_pr, 10.0);
  const auto c = cks::total_losses({0.0, 0.0, 0.2, 0.0, 0.3}, w);
  EXPECT_DOUBLE_EQ(c.l_co, 0.5);
}

TEST(TotalLosses, NonFiniteComponentIsNamed) {
  try {
    cks::total_losses({1.0, std::nan(""), 0.0, 0.0, 0.0}, {}, 17);
    FAIL();
  } catch (const cks::NonFiniteError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("l_s"), std::string::npos) << msg;
    EXPECT_NE(msg.find("17"), std::string::npos) << msg;
  }
}

TEST(CollaboratorSegLoss, GradientIdentity) {
  torch::manual_seed(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto Mp = torch::rand({16, 16});
    const auto Mc = torch::rand({16, 16}).requires_grad_(true);
    const auto g = torch::autograd::grad({cks::collaborator_seg_loss(Mp, Mc)}, {Mc})[0];
    EXPECT_LT((g - (1.0 - 2.0 * Mp) / 256.0).abs().max().item<double>(), 1e-6);
  }
}

TEST(CollaboratorSegLoss, ShapeMismatch) {
  EXPECT_THROW(cks::collaborator_seg_loss(torch::rand({4, 4}), torch::rand({4, 5})), cks::ShapeError);
}

TEST(GaussianPrior, ValueAtDistanceD) {
  const cks::WindowAnchor a{0, 0};
  const auto p = cks::gaussian_prior({4.0, 4.0}, 3.0, a, 16);
  EXPECT_FLOAT_EQ(p[4][4].item<float>(), 1.0f);
  EXPECT_NEAR(p[4][7].item<float>(), std::exp(-0.5), 1e-7);
  EXPECT_NEAR(p[7][4].item<float>(), std::exp(-0.5), 1e-7);
  EXPECT_THROW(cks::gaussian_prior({0, 0}, 0.0, a, 4), cks::InvalidArgument);
}

TEST(AggregateMp, ZeroLogitsWithPriorAtCentre) {
  auto w = windows_at({{8.0, 8.0}}, torch::zeros({1, 8, 8}), 16, 16);
  const auto Mp = cks::aggregate_Mp(w, 3.0, 2.0, 16, 16);
  EXPECT_NEAR(Mp[8][8].item<double>(), oracle::sigmoid(2.0), 1e-6);
  EXPECT_EQ(Mp[0][0].item<float>(), 0.0f);
  EXPECT_FALSE(Mp.requires_grad());
  const auto no_prior = cks::aggregate_Mp(w, 3.0, 0.0, 16, 16);
  EXPECT_NEAR(no_prior[8][8].item<double>(), 0.5, 1e-7);
}

TEST(AggregateMp, IsPixelwiseMaxAndInRange) {
  torch::manual_seed(2);
  auto logits = (torch::randn({3, 8, 8}) * 3.0).requires_grad_(true);
  auto w = windows_at({{5, 5}, {8, 9}, {12, 4}}, logits, 16, 16);
  const auto Mp = cks::aggregate_Mp(w, 4.0, 2.0, 16, 16);
  EXPECT_GE(Mp.min().item<float>(), 0.0f);
  EXPECT_LE(Mp.max().item<float>(), 1.0f);
  EXPECT_FALSE(Mp.requires_grad());
  const auto priors = cks::gaussian_priors(w, 4.0);
  const auto direct = std::get<0>(cks::render_windows(torch::sigmoid(logits.detach() + 2.0 * priors), w.anchors, 16, 16).max(0));
  EXPECT_TRUE(torch::allclose(Mp, direct));
}

TEST(OverlapTerm, TwoUnitWindowsOnOnePixel) {
  auto r = torch::zeros({2, 3, 3});
  r[0][1][1] = 1.0;
  r[1][1][1] = 1.0;
  EXPECT_DOUBLE_EQ(cks::overlap_term(r).item<double>(), 2.0);
  auto single = torch::ones({1, 3, 3});
  EXPECT_DOUBLE_EQ(cks::overlap_term(single).item<double>(), 0.0);
}

TEST(OverlapTerm, MatchesPairwiseLoop) {
  torch::manual_seed(5);
  const auto r = torch::rand({4, 5, 5}, torch::kFloat64);
  double expected = 0.0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (i != j) expected += (r[i] * r[j]).sum().item<double>();
  EXPECT_NEAR(cks::overlap_term(r).item<double>(), expected, 1e-9);
}

TEST(PrincipalSegLoss, MatchesDirectFormula) {
  torch::manual_seed(6);
  const int L = 6, H = 12, W = 12;
  auto w = windows_at({{3, 3}, {8, 7}}, torch::randn({2, L, L}), H, W);
  const auto Mc = torch::rand({H, W});
  const auto s = torch::sigmoid(w.logits);
  const auto crops = cks::crop_windows(Mc, w.anchors, L);
  const auto consistency = ((1 - crops) * s + crops * (1 - s)).sum();
  const auto rendered = cks::render_windows(s, w.anchors, H, W);
  const auto overlap = rendered.sum(0).pow(2).sum() - rendered.pow(2).sum();
  EXPECT_NEAR(cks::principal_seg_loss(Mc, w, cks::KMode::PerInstanceWindow).item<double>(),
              ((consistency + overlap) / (2.0 * L * L)).item<double>(), 1e-5);
  EXPECT_NEAR(cks::principal_seg_loss(Mc, w, cks::KMode::ImageArea).item<double>(),
              ((consistency + overlap) / (H * W)).item<double>(), 1e-5);
}

TEST(PrincipalSegLoss, NoGradientIntoCollaboratorMap) {
  auto w = windows_at({{4, 4}}, torch::randn({1, 6, 6}).requires_grad_(true), 10, 10);
  const auto Mc = torch::rand({10, 10}).requires_grad_(true);
  cks::principal_seg_loss(Mc, w, cks::KMode::PerInstanceWindow).backward();
  EXPECT_FALSE(Mc.grad().defined() && Mc.grad().abs().sum().item<double>() > 0.0);
}

TEST(Sobel, MatchesLoopOracle) {
  torch::manual_seed(7);
  const auto maps = torch::rand({2, 7, 9}, torch::kFloat64);
  const auto got = cks::sobel_magnitude(maps, 1e-3);
  for (int i = 0; i < 2; ++i) {
    std::vector<std::vector<double>> m(7, std::vector<double>(9));
    for (int y = 0; y < 7; ++y)
      for (int x = 0; x < 9; ++x) m[y][x] = maps[i][y][x].item<double>();
    const auto ref = oracle::sobel_magnitude(m, 1e-3);
    for (int y = 0; y < 7; ++y)
      for (int x = 0; x < 9; ++x) EXPECT_NEAR(got[i][y][x].item<double>(), ref[y][x], 1e-12);
  }
}

TEST(Sobel, FlatMapHasZeroEdges) {
  const auto m = torch::full({1, 5, 5}, 0.3, torch::kFloat64);
  const auto g = cks::sobel_magnitude(m);
  EXPECT_NEAR(g[0][2][2].item<double>(), 0.0, 1e-12);
}

TEST(Boundary, RangeAndLoss) {
  torch::manual_seed(8);
  auto w = windows_at({{5, 5}, {10, 12}}, torch::randn({2, 8, 8}) * 4.0, 20, 20);
  const auto B = cks::boundary_from_instances(w, 20, 20);
  EXPECT_GE(B.min().item<float>(), 0.0f);
  EXPECT_LT(B.max().item<float>(), 1.0f);
  EXPECT_EQ(B[19][0].item<float>(), 0.0f);
  const auto other = torch::rand({20, 20});
  EXPECT_NEAR(cks::boundary_loss(B, other).item<double>(), (B - other).pow(2).mean().item<double>(), 1e-7);
}

TEST(CollapsePenalty, HandExampleAndEpsilonFloor) {
  auto w = windows_at({{4, 4}}, torch::zeros({1, 8, 8}), 16, 16);
  EXPECT_NEAR(cks::collapse_penalty(w, 0.1).item<double>(), 0.2, 1e-7);
  auto dead = windows_at({{4, 4}}, torch::full({1, 8, 8}, -40.0), 16, 16);
  EXPECT_NEAR(cks::collapse_penalty(dead, 0.1, 1e-3).item<double>(), 100.0, 1e-3);
  auto none = windows_at({}, torch::zeros({0, 8, 8}), 16, 16);
  EXPECT_EQ(cks::collapse_penalty(none, 0.1).item<double>(), 0.0);
}

TEST(CollapsePenalty, IncreasesAsWindowsEmpty) {
  auto a = windows_at({{4, 4}}, torch::full({1, 8, 8}, -1.0), 16, 16);
  auto b = windows_at({{4, 4}}, torch::full({1, 8, 8}, -3.0), 16, 16);
  EXPECT_LT(cks::collapse_penalty(a, 0.1).item<double>(), cks::collapse_penalty(b, 0.1).item<double>());
}

TEST(DetectionLoss, MatchesFocalAndOffsetOracle) {
  torch::manual_seed(9);
  const auto targets = cks::detection_targets({{5.0, 9.0}, {20.0, 22.0}}, 32, 32, {4}, 1.0);
  cks::DetectionGrids g;
  g.logits[4] = torch::randn({8, 8});
  g.offsets[4] = torch::rand({2, 8, 8});
  const auto& d = targets.d_gt.at(4);
  const double n_pos = d.sum().item<double>();
  const auto mask = targets.pos_mask.at(4).to(torch::kFloat32);
  const double off = ((g.offsets[4] - targets.off_gt.at(4)).pow(2).sum(0) * mask).sum().item<double>() /
                     mask.sum().item<double>();
  const double expected = oracle::focal_sum(g.logits[4], d, 2.0) / n_pos + off;
  EXPECT_NEAR(cks::detection_loss(g, targets, 2.0).item<double>(), expected, 1e-4);
}

TEST(DetectionLoss, FocalWithGammaZeroIsBce) {
  torch::manual_seed(10);
  const auto l = torch::randn({5, 5});
  const auto t = (torch::rand({5, 5}) > 0.5).to(torch::kFloat32);
  EXPECT_NEAR(cks::focal_bce_with_logits(l, t, 0.0).mean().item<double>(), oracle::bce_mean(l, t), 1e-6);
  EXPECT_NEAR(cks::focal_bce_with_logits(l, t, 2.0).sum().item<double>(), oracle::focal_sum(l, t, 2.0), 1e-4);
}

TEST(DetectionLoss, ShapeMismatchAndMissingScale) {
  const auto targets = cks::detection_targets({{5.0, 9.0}}, 32, 32, {4}, 1.0);
  cks::DetectionGrids g;
  g.logits[8] = torch::zeros({4, 4});
  g.offsets[8] = torch::zeros({2, 4, 4});
  EXPECT_THROW(cks::detection_loss(g, targets, 2.0), cks::ShapeError);
  cks::DetectionGrids h;
  h.logits[4] = torch::zeros({4, 4});
  h.offsets[4] = torch::zeros({2, 4, 4});
  EXPECT_THROW(cks::detection_loss(h, targets, 2.0), cks::ShapeError);
}

TEST(FiniteDifferences, AllLossesAgreeWithCentralDifferences) {
  for (const auto& [name, err] : fd::run_suite(5, 123)) EXPECT_LT(err, 1e-3) << name;
}

TEST(LossWeights, JsonRoundTripAndValidation) {
  cks::LossWeights w;
  w.d_by_group = {{"a", 4.0}};
  w.k_mode = cks::KMode::ImageArea;
  EXPECT_EQ(cks::to_json(cks::loss_weights_from_json(cks::to_json(w))), cks::to_json(w));
  EXPECT_DOUBLE_EQ(w.d_for("a"), 4.0);
  EXPECT_DOUBLE_EQ(w.d_for("b"), w.d);
  auto j = cks::to_json(w);
  j["lambda_b"] = -1.0;
  EXPECT_THROW(cks::loss_weights_from_json(j), cks::ConfigError);
}

}  // namespace
