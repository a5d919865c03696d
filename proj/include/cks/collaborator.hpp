#pragma once

// Collaborator: two small pixel-classification nets with no shared weights,
// one for the image foreground map and one for the cell-border map. Only used
// during training.
//
// Variants (3x3 convs, ReLU, max-pool down, nearest-upsample + conv up):
//   a1/a2/a3  U-Net with 2/3/4 downscales, base width 16, doubling per level
//   b1        three 3x3 conv layers of width 32, then a 1x1 output
//   b2        U-Net with 2 downscales, base width 32

#include <string>

#include <torch/torch.h>

#include "json.hpp"

namespace cks {

enum class ForegroundVariant { A1, A2, A3 };
enum class BorderVariant { B1, B2 };

struct CollaboratorConfig {
  ForegroundVariant foreground_variant = ForegroundVariant::A1;
  BorderVariant border_variant = BorderVariant::B1;
  int in_channels = 1;
  int base_channels = 16;
  int border_channels = 32;
};

void validate(const CollaboratorConfig& config);
nlohmann::json to_json(const CollaboratorConfig& config);
CollaboratorConfig collaborator_config_from_json(const nlohmann::json& j, const std::string& where = "collaborator");
std::string to_string(ForegroundVariant v);
std::string to_string(BorderVariant v);

/// Downscale factor the padded input must be divisible by.
int required_divisor(const CollaboratorConfig& config);

struct CollaboratorMaps {
  torch::Tensor foreground;  // M_c, H x W in [0,1]
  torch::Tensor border;      // B_c, H x W in [0,1]
};

class UNetImpl : public torch::nn::Module {
 public:
  UNetImpl(int in_channels, int base_channels, int depth);
  torch::Tensor forward(const torch::Tensor& x);  // returns logits N x 1 x H x W
  int depth() const { return depth_; }

 private:
  int depth_;
  torch::nn::ModuleList down_{nullptr};
  torch::nn::ModuleList up_conv_{nullptr};
  torch::nn::ModuleList merge_{nullptr};
  torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(UNet);

class PlainCnnImpl : public torch::nn::Module {
 public:
  PlainCnnImpl(int in_channels, int channels, int layers);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(PlainCnn);

class CollaboratorModelImpl : public torch::nn::Module {
 public:
  explicit CollaboratorModelImpl(CollaboratorConfig config);

  /// `image` is 1 x C x H x W with H, W divisible by required_divisor().
  CollaboratorMaps forward(const torch::Tensor& image);

  const CollaboratorConfig& config() const { return config_; }
  torch::nn::Module& foreground_net() { return *foreground_; }
  torch::nn::Module& border_net() { return *border_; }

 private:
  CollaboratorConfig config_;
  std::shared_ptr<torch::nn::Module> foreground_;
  std::shared_ptr<torch::nn::Module> border_;
  std::function<torch::Tensor(const torch::Tensor&)> run_foreground_;
  std::function<torch::Tensor(const torch::Tensor&)> run_border_;
};
TORCH_MODULE(CollaboratorModel);

/// Exact number of trainable parameters of the collaborator described by `config`.
long long parameter_count(const CollaboratorConfig& config);
long long parameter_count(const torch::nn::Module& module);

}  // namespace cks
