#pragma once

// Test-time path: detections at every scale, location NMS ranked by presence
// score, segmentation of survivors, per-pixel conflict resolution.
// Depends on the principal model only.

#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "cks/data.hpp"
#include "cks/principal.hpp"
#include "json.hpp"

namespace cks {

struct Detection {
  Point location;
  double score = 0.0;
  int stride = 0;
  // Grid cell of origin; part of the deterministic tie-break.
  int cell_y = 0;
  int cell_x = 0;
};

struct InferenceConfig {
  double score_threshold = 0.5;
  /// Pixels; <= 0 means "half the prior radius".
  double nms_radius = 0.0;
  double mask_threshold = 0.5;
  int max_detections = 1000;
};

void validate(const InferenceConfig& config);
nlohmann::json to_json(const InferenceConfig& config);
InferenceConfig inference_config_from_json(const nlohmann::json& j, const std::string& where = "inference");
/// nms_radius if positive, otherwise prior_radius / 2.
double effective_nms_radius(const InferenceConfig& config, double prior_radius);

/// Every cell with D >= threshold becomes a Detection at (cell + offset) * stride,
/// clamped into the padded image. Sorted by score descending, ties by
/// (stride, cell_y, cell_x) ascending.
std::vector<Detection> decode_detections(const DetectionGrids& grids, double score_threshold);

/// Canonical ordering used by decode_detections.
void sort_detections(std::vector<Detection>& detections);

/// Greedy: keep a detection if it is at least `radius` away from every kept one.
std::vector<Detection> nms(const std::vector<Detection>& detections, double radius);

struct InstancePrediction {
  Point location;
  double score = 0.0;
  int stride = 0;
  cv::Mat mask;  // CV_8UC1 0/1 at original image size
  InstanceWindow window;
};

std::vector<InstancePrediction> predict(PrincipalModel& model, const cv::Mat& image, const InferenceConfig& config,
                                        double prior_radius);

/// Assigns each pixel to the instance with the highest probability among those
/// reaching `mask_threshold` there. `probabilities` is n x H x W; returns n
/// binary masks cropped to (height, width).
std::vector<cv::Mat> resolve_instance_masks(const torch::Tensor& probabilities, double mask_threshold, int height,
                                            int width);

/// 0 = background; prediction k (in list order) gets label k + 1. CV_16UC1.
cv::Mat render_label_map(const std::vector<InstancePrediction>& predictions, int height, int width);

/// Per-instance records {id, location, score, stride, rle}.
nlohmann::json prediction_records(const std::string& image_id, const std::vector<InstancePrediction>& predictions);

/// Input image with instance contours drawn in color (8-bit BGR).
cv::Mat overlay_contours(const cv::Mat& image, const std::vector<InstancePrediction>& predictions);

/// Loads the principal part of a training checkpoint. Throws ConfigError if
/// the stored config hash does not match the stored config.
PrincipalModel load_principal(const std::filesystem::path& checkpoint);

}  // namespace cks
