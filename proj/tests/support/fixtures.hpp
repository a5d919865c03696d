#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "cks/config.hpp"
#include "cks/data.hpp"

namespace fixtures {

/// Small principal used throughout the unit tests (fast on one CPU core).
inline cks::PrincipalConfig tiny_principal(int window = 32) {
  cks::PrincipalConfig c;
  c.backbone_channels = {8, 16, 16, 16};
  c.fpn_channels = 16;
  c.window_size = window;
  c.mlp_dims = {16};
  c.encoding_channels = 4;
  c.seg_feature_channels = 8;
  c.seg_head_channels = {8, 8};
  return c;
}

/// Desk-scale principal used for the accuracy experiments.
inline cks::PrincipalConfig desk_principal() {
  cks::PrincipalConfig c;
  c.backbone_channels = {16, 32, 48, 64};
  c.fpn_channels = 32;
  c.window_size = 32;
  c.mlp_dims = {32};
  c.encoding_channels = 4;
  c.seg_feature_channels = 16;
  c.seg_head_channels = {24, 24};
  return c;
}

inline cks::RunConfig tiny_run(const std::string& output_dir, cks::TrainMode mode = cks::TrainMode::Cks) {
  cks::RunConfig c;
  c.principal = tiny_principal();
  c.collaborator.base_channels = 8;
  c.collaborator.border_channels = 8;
  c.losses.d = 6.0;
  c.train.mode = mode;
  c.train.total_steps = 4;
  c.train.checkpoint_every = 2;
  c.train.augment = false;
  c.data.synthetic.n_images = 2;
  c.data.synthetic.image_size = 32;
  c.data.synthetic.blobs_min = 2;
  c.data.synthetic.blobs_max = 3;
  c.data.synthetic.radius_min = 3.0;
  c.data.synthetic.radius_max = 5.0;
  c.output_dir = output_dir;
  return c;
}

inline cv::Mat disk_mask(int h, int w, int cy, int cx, int r) {
  cv::Mat m(h, w, CV_8UC1, cv::Scalar(0));
  cv::circle(m, {cx, cy}, r, cv::Scalar(1), cv::FILLED);
  return m;
}

inline cv::Mat rect_mask(int h, int w, int y0, int x0, int y1, int x1) {
  cv::Mat m(h, w, CV_8UC1, cv::Scalar(0));
  m(cv::Range(y0, y1), cv::Range(x0, x1)).setTo(1);
  return m;
}

inline cv::Mat random_mask(int h, int w, std::mt19937_64& rng, int max_radius = 4) {
  std::uniform_int_distribution<int> py(0, h - 1), px(0, w - 1), pr(1, max_radius);
  return disk_mask(h, w, py(rng), px(rng), pr(rng));
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cks_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixtures
