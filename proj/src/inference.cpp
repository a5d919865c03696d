#include "cks/inference.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgproc.hpp>

#include "cks/error.hpp"
#include "cks/json_util.hpp"
#include "cks/rle.hpp"

using nlohmann::json;

namespace cks {

void validate(const InferenceConfig& c) {
  if (!(c.score_threshold >= 0.0 && c.score_threshold <= 1.0)) {
    throw ConfigError("inference.score_threshold must be in [0,1]");
  }
  if (!(c.mask_threshold >= 0.0 && c.mask_threshold <= 1.0)) {
    throw ConfigError("inference.mask_threshold must be in [0,1]");
  }
  if (c.max_detections <= 0) throw ConfigError("inference.max_detections must be positive");
}

json to_json(const InferenceConfig& c) {
  return {{"score_threshold", c.score_threshold},
          {"nms_radius", c.nms_radius},
          {"mask_threshold", c.mask_threshold},
          {"max_detections", c.max_detections}};
}

InferenceConfig inference_config_from_json(const json& j, const std::string& where) {
  json_util::StrictObject o(j, where);
  InferenceConfig c;
  o.get("score_threshold", c.score_threshold);
  o.get("nms_radius", c.nms_radius);
  o.get("mask_threshold", c.mask_threshold);
  o.get("max_detections", c.max_detections);
  o.finish();
  validate(c);
  return c;
}

double effective_nms_radius(const InferenceConfig& c, double prior_radius) {
  return c.nms_radius > 0.0 ? c.nms_radius : prior_radius / 2.0;
}

void sort_detections(std::vector<Detection>& d) {
  std::sort(d.begin(), d.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.stride != b.stride) return a.stride < b.stride;
    if (a.cell_y != b.cell_y) return a.cell_y < b.cell_y;
    return a.cell_x < b.cell_x;
  });
}

std::vector<Detection> decode_detections(const DetectionGrids& grids, double score_threshold) {
  std::vector<Detection> out;
  for (const auto& [stride, logits] : grids.logits) {
    const auto prob = torch::sigmoid(logits.detach()).to(torch::kFloat64).contiguous();
    const auto off = grids.offsets.at(stride).detach().to(torch::kFloat64).contiguous();
    const auto p = prob.accessor<double, 2>();
    const auto o = off.accessor<double, 3>();
    const long h = prob.size(0), w = prob.size(1);
    const double max_y = h * stride - 1.0, max_x = w * stride - 1.0;
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        if (p[y][x] < score_threshold) continue;
        Detection d;
        d.score = p[y][x];
        d.stride = stride;
        d.cell_y = static_cast<int>(y);
        d.cell_x = static_cast<int>(x);
        d.location = {std::clamp((y + o[0][y][x]) * stride, 0.0, max_y),
                      std::clamp((x + o[1][y][x]) * stride, 0.0, max_x)};
        out.push_back(d);
      }
    }
  }
  sort_detections(out);
  return out;
}

std::vector<Detection> nms(const std::vector<Detection>& detections, double radius) {
  std::vector<Detection> kept;
  const double r2 = radius * radius;
  for (const auto& d : detections) {
    const bool clear = std::none_of(kept.begin(), kept.end(), [&](const Detection& k) {
      const double dy = k.location.y - d.location.y, dx = k.location.x - d.location.x;
      return dy * dy + dx * dx < r2;
    });
    if (clear) kept.push_back(d);
  }
  return kept;
}

std::vector<cv::Mat> resolve_instance_masks(const torch::Tensor& probabilities, double mask_threshold, int height,
                                            int width) {
  const long n = probabilities.size(0);
  std::vector<cv::Mat> masks;
  if (n == 0) return masks;
  auto probs = probabilities.detach().to(torch::kFloat32).contiguous();
  auto [best, owner] = probs.max(0);
  best = best.contiguous();
  owner = owner.to(torch::kInt64).contiguous();
  const auto b = best.accessor<float, 2>();
  const auto o = owner.accessor<int64_t, 2>();
  for (long i = 0; i < n; ++i) masks.push_back(cv::Mat::zeros(height, width, CV_8UC1));
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (b[y][x] >= mask_threshold && b[y][x] > 0.0f) masks[o[y][x]].at<std::uint8_t>(y, x) = 1;
    }
  }
  return masks;
}

std::vector<InstancePrediction> predict(PrincipalModel& model, const cv::Mat& image, const InferenceConfig& config,
                                        double prior_radius) {
  validate(config);
  torch::NoGradGuard guard;
  model->eval();
  const auto padded = pad_image(image, model->config());
  const auto features = model->forward_features(padded.tensor);
  const auto grids = model->detect(features);
  auto detections = nms(decode_detections(grids, config.score_threshold), effective_nms_radius(config, prior_radius));
  if (detections.size() > static_cast<std::size_t>(config.max_detections)) detections.resize(config.max_detections);

  std::vector<Point> locations;
  for (const auto& d : detections) locations.push_back(d.location);
  const auto windows = model->encode_and_segment(features, padded.tensor, locations);
  const auto probs = render_windows(torch::sigmoid(windows.logits), windows.anchors, padded.padded_height,
                                    padded.padded_width);
  const auto masks = resolve_instance_masks(probs, config.mask_threshold, padded.height, padded.width);

  std::vector<InstancePrediction> out;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    if (cv::countNonZero(masks[i]) == 0) continue;
    InstancePrediction p;
    p.location = detections[i].location;
    p.score = detections[i].score;
    p.stride = detections[i].stride;
    p.mask = masks[i];
    p.window = windows.at(i);
    out.push_back(std::move(p));
  }
  return out;
}

cv::Mat render_label_map(const std::vector<InstancePrediction>& predictions, int height, int width) {
  std::vector<cv::Mat> masks;
  for (const auto& p : predictions) masks.push_back(p.mask);
  return masks_to_label_map(masks, height, width);
}

json prediction_records(const std::string& image_id, const std::vector<InstancePrediction>& predictions) {
  json records = json::array();
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    const auto& p = predictions[k];
    const auto r = rle::encode(p.mask);
    records.push_back({{"id", static_cast<int>(k + 1)},
                       {"image_id", image_id},
                       {"location", {p.location.y, p.location.x}},
                       {"score", p.score},
                       {"stride", p.stride},
                       {"segmentation", {{"size", {r.height, r.width}}, {"counts", rle::compress_counts(r.counts)}}}});
  }
  return records;
}

cv::Mat overlay_contours(const cv::Mat& image, const std::vector<InstancePrediction>& predictions) {
  cv::Mat gray;
  if (image.channels() == 1) {
    gray = image;
  } else {
    cv::Mat tmp;
    image.convertTo(tmp, CV_32F);
    cv::cvtColor(tmp.reshape(image.channels()), gray, image.channels() == 4 ? cv::COLOR_BGRA2GRAY : cv::COLOR_BGR2GRAY);
  }
  cv::Mat u8, bgr;
  gray.convertTo(u8, CV_8U, 255.0);
  cv::cvtColor(u8, bgr, cv::COLOR_GRAY2BGR);
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    std::vector<std::vector<cv::Point>> contours;
    cv::findContours(predictions[k].mask.clone(), contours, cv::RETR_EXTERNAL, cv::CHAIN_APPROX_NONE);
    const double hue = std::fmod(k * 47.0, 180.0);
    cv::Mat hsv(1, 1, CV_8UC3, cv::Scalar(hue, 220, 255)), color;
    cv::cvtColor(hsv, color, cv::COLOR_HSV2BGR);
    const auto c = color.at<cv::Vec3b>(0, 0);
    cv::drawContours(bgr, contours, -1, cv::Scalar(c[0], c[1], c[2]), 1);
  }
  return bgr;
}

}  // namespace cks
