#pragma once

// Principal model: backbone + FPN, a detection head shared across pyramid
// levels, and a location-conditioned segmentation head producing one
// fixed-size window of logits per cell.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "cks/data.hpp"
#include "json.hpp"

namespace cks {

enum class BackboneKind { TinyConvNet, ConvNeXtSmall };

struct PrincipalConfig {
  BackboneKind backbone = BackboneKind::TinyConvNet;
  int in_channels = 1;
  /// Per-stage widths at strides 4/8/16/32.
  std::vector<int> backbone_channels{16, 32, 64, 128};
  /// Blocks per stage (ConvNeXt only).
  std::vector<int> backbone_depths{3, 3, 27, 3};
  int fpn_channels = 128;
  std::vector<int> scales{4, 8, 16, 32};
  int window_size = 96;
  int detection_head_depth = 2;
  std::vector<int> mlp_dims{128};
  /// Channels of the reshaped position encoding.
  int encoding_channels = 8;
  /// Channels of the stride-4 features after projection, before upsampling.
  int seg_feature_channels = 32;
  std::vector<int> seg_head_channels{64, 64};
  /// Initial presence probability of the detection head bias.
  double detection_prior = 0.01;

  /// ConvNeXt-Small stage layout with the default FPN.
  static PrincipalConfig convnext_small();

  int max_stride() const { return 32; }
  /// Side of the coarse grid the position-encoding vector is reshaped to.
  int encoding_grid() const { return std::max(1, window_size / 16); }
};

void validate(const PrincipalConfig& config);
nlohmann::json to_json(const PrincipalConfig& config);
PrincipalConfig principal_config_from_json(const nlohmann::json& j, const std::string& where = "principal");
std::string to_string(BackboneKind kind);

/// Input image as a 1 x C x Hp x Wp tensor, zero-padded on the bottom/right to a
/// multiple of the max stride and to at least the window size.
struct PaddedImage {
  torch::Tensor tensor;
  int height = 0;
  int width = 0;
  int padded_height = 0;
  int padded_width = 0;
};

PaddedImage pad_image(const cv::Mat& image, const PrincipalConfig& config);
int padded_extent(int extent, const PrincipalConfig& config);

/// stride -> 1 x F x (Hp/s) x (Wp/s)
struct FeaturePyramid {
  std::map<int, torch::Tensor> levels;
};

/// Per stride: presence logits (h x w) and offsets (2 x h x w, fractions of a cell).
struct DetectionGrids {
  std::map<int, torch::Tensor> logits;
  std::map<int, torch::Tensor> offsets;

  torch::Tensor presence(int stride) const { return torch::sigmoid(logits.at(stride)); }
};

/// Per stride: d_gt (h x w, 0/1 float), off_gt (2 x h x w), pos_mask (h x w, bool).
struct DetectionTargets {
  std::map<int, torch::Tensor> d_gt;
  std::map<int, torch::Tensor> off_gt;
  std::map<int, torch::Tensor> pos_mask;
};

/// Containing cell is positive with offset p/s - floor(p/s); any cell whose
/// center (c + 0.5) lies within `smoothing_threshold` grid units of p/s is
/// also positive in d_gt. Offsets regress only at containing cells.
DetectionTargets detection_targets(const std::vector<Point>& points, int padded_height, int padded_width,
                                   const std::vector<int>& scales, double smoothing_threshold = 1.0);

struct WindowAnchor {
  int y0 = 0;
  int x0 = 0;

  friend bool operator==(const WindowAnchor&, const WindowAnchor&) = default;
};

/// round(location) - L/2, clamped so the window fits the padded image.
WindowAnchor window_anchor(const Point& location, int window_size, int padded_height, int padded_width);

/// One cell's segmentation logits over an L x L window; probability is
/// sigmoid(logits) inside the window and exactly 0 outside.
struct InstanceWindow {
  WindowAnchor anchor;
  torch::Tensor logits;  // L x L
  Point location;
};

/// All windows of an image, batched: `logits` is n x L x L.
struct InstanceWindows {
  int size = 0;
  std::vector<WindowAnchor> anchors;
  std::vector<Point> locations;
  torch::Tensor logits;

  std::size_t count() const { return anchors.size(); }
  InstanceWindow at(std::size_t i) const { return {anchors[i], logits[static_cast<long>(i)], locations[i]}; }
};

/// Builds an InstanceWindows with anchors computed from `locations`.
InstanceWindows make_windows(const std::vector<Point>& locations, torch::Tensor logits, int window_size,
                             int padded_height, int padded_width);

/// Places each n x L x L window into an n x H x W canvas (zeros elsewhere).
/// Differentiable with respect to `values`.
torch::Tensor render_windows(const torch::Tensor& values, const std::vector<WindowAnchor>& anchors, int height,
                             int width);

/// Crops the same windows out of an H x W map: returns n x L x L.
torch::Tensor crop_windows(const torch::Tensor& map, const std::vector<WindowAnchor>& anchors, int window_size);

/// Backbone interface: returns feature maps at strides 4, 8, 16, 32.
class BackboneImpl : public torch::nn::Module {
 public:
  virtual std::vector<torch::Tensor> forward(const torch::Tensor& image) = 0;
  virtual std::vector<int> stage_channels() const = 0;
};

std::shared_ptr<BackboneImpl> make_backbone(const PrincipalConfig& config);

class PrincipalModelImpl : public torch::nn::Module {
 public:
  explicit PrincipalModelImpl(PrincipalConfig config);

  /// `image` is 1 x C x Hp x Wp with Hp, Wp multiples of the max stride.
  FeaturePyramid forward_features(const torch::Tensor& image);
  DetectionGrids detect(const FeaturePyramid& features);
  /// Runs the segmentation head once per location (batched).
  InstanceWindows encode_and_segment(const FeaturePyramid& features, const torch::Tensor& image,
                                     const std::vector<Point>& locations);

  const PrincipalConfig& config() const { return config_; }
  std::vector<torch::Tensor> backbone_parameters() const;
  std::vector<torch::Tensor> head_parameters() const;

  /// Mutable access for tests that need to pin biases.
  torch::nn::Conv2d& detection_output() { return det_out_; }
  torch::nn::Conv2d& segmentation_output() { return seg_out_; }

 private:
  PrincipalConfig config_;
  std::shared_ptr<BackboneImpl> backbone_;
  torch::nn::ModuleList lateral_{nullptr};
  torch::nn::ModuleList smooth_{nullptr};
  torch::nn::Sequential det_tower_{nullptr};
  torch::nn::Conv2d det_out_{nullptr};
  torch::nn::Conv2d seg_project_{nullptr};
  torch::nn::Sequential mlp_{nullptr};
  torch::nn::Sequential seg_tower_{nullptr};
  torch::nn::Conv2d seg_out_{nullptr};
};
TORCH_MODULE(PrincipalModel);

/// He (fan_out, ReLU) initialization for conv/linear weights, zero biases.
void he_initialize(torch::nn::Module& module);

/// Mean per-pixel binary cross-entropy between sigmoid(window logits) and the
/// assigned ground-truth mask cropped to each window. `assignment[i]` is the
/// mask index for window i. Masks may be at original or padded size.
torch::Tensor supervised_segmentation_loss(const InstanceWindows& windows, const std::vector<cv::Mat>& gt_masks,
                                           const std::vector<int>& assignment, int padded_height, int padded_width);

/// cv::Mat (H x W x C float) -> C x H x W tensor.
torch::Tensor image_to_tensor(const cv::Mat& image);
/// Binary mask zero-padded to (height, width) as a float tensor.
torch::Tensor mask_to_tensor(const cv::Mat& mask, int height, int width);

}  // namespace cks
