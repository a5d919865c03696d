#include "cks/collaborator.hpp"

#include "cks/error.hpp"
#include "cks/json_util.hpp"

namespace F = torch::nn::functional;
using nlohmann::json;

namespace cks {

namespace {

torch::nn::Conv2d conv3(int in, int out) { return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)); }

torch::nn::Sequential double_conv(int in, int out) {
  return torch::nn::Sequential(conv3(in, out), torch::nn::ReLU(), conv3(out, out), torch::nn::ReLU());
}

int foreground_depth(ForegroundVariant v) {
  switch (v) {
    case ForegroundVariant::A1:
      return 2;
    case ForegroundVariant::A2:
      return 3;
    default:
      return 4;
  }
}

void init_weights(torch::nn::Module& module) {
  torch::NoGradGuard guard;
  for (auto& m : module.modules(false)) {
    if (auto* c = m->as<torch::nn::Conv2d>()) {
      torch::nn::init::kaiming_normal_(c->weight, 0.0, torch::kFanOut, torch::kReLU);
      if (c->bias.defined()) c->bias.zero_();
    }
  }
}

}  // namespace

std::string to_string(ForegroundVariant v) {
  switch (v) {
    case ForegroundVariant::A1:
      return "a1";
    case ForegroundVariant::A2:
      return "a2";
    default:
      return "a3";
  }
}

std::string to_string(BorderVariant v) { return v == BorderVariant::B1 ? "b1" : "b2"; }

void validate(const CollaboratorConfig& c) {
  if (c.in_channels <= 0 || c.base_channels <= 0 || c.border_channels <= 0) {
    throw ConfigError("collaborator: channel counts must be positive");
  }
}

json to_json(const CollaboratorConfig& c) {
  return {{"foreground_variant", to_string(c.foreground_variant)},
          {"border_variant", to_string(c.border_variant)},
          {"in_channels", c.in_channels},
          {"base_channels", c.base_channels},
          {"border_channels", c.border_channels}};
}

CollaboratorConfig collaborator_config_from_json(const json& j, const std::string& where) {
  json_util::StrictObject o(j, where);
  CollaboratorConfig c;
  std::string fg = "a1", bd = "b1";
  o.get("foreground_variant", fg);
  o.get("border_variant", bd);
  if (fg == "a1") {
    c.foreground_variant = ForegroundVariant::A1;
  } else if (fg == "a2") {
    c.foreground_variant = ForegroundVariant::A2;
  } else if (fg == "a3") {
    c.foreground_variant = ForegroundVariant::A3;
  } else {
    throw ConfigError(where + ".foreground_variant: expected a1, a2 or a3, got '" + fg + "'");
  }
  if (bd == "b1") {
    c.border_variant = BorderVariant::B1;
  } else if (bd == "b2") {
    c.border_variant = BorderVariant::B2;
  } else {
    throw ConfigError(where + ".border_variant: expected b1 or b2, got '" + bd + "'");
  }
  o.get("in_channels", c.in_channels);
  o.get("base_channels", c.base_channels);
  o.get("border_channels", c.border_channels);
  o.finish();
  validate(c);
  return c;
}

int required_divisor(const CollaboratorConfig& c) {
  const int fg = 1 << foreground_depth(c.foreground_variant);
  const int bd = c.border_variant == BorderVariant::B2 ? 4 : 1;
  return std::max(fg, bd);
}

// --- U-Net -----------------------------------------------------------------------------

UNetImpl::UNetImpl(int in_channels, int base, int depth) : depth_(depth) {
  down_ = register_module("down", torch::nn::ModuleList());
  up_conv_ = register_module("up", torch::nn::ModuleList());
  merge_ = register_module("merge", torch::nn::ModuleList());
  int in = in_channels;
  for (int level = 0; level <= depth; ++level) {
    const int width = base << level;
    down_->push_back(double_conv(in, width));
    in = width;
  }
  for (int level = depth - 1; level >= 0; --level) {
    const int width = base << level;
    up_conv_->push_back(conv3(width * 2, width));
    merge_->push_back(double_conv(width * 2, width));
  }
  out_ = register_module("out", torch::nn::Conv2d(torch::nn::Conv2dOptions(base, 1, 1)));
}

torch::Tensor UNetImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> skips;
  torch::Tensor h = x;
  for (int level = 0; level <= depth_; ++level) {
    if (level > 0) h = F::max_pool2d(h, F::MaxPool2dFuncOptions(2));
    h = down_[level]->as<torch::nn::Sequential>()->forward(h);
    skips.push_back(h);
  }
  for (int k = 0; k < depth_; ++k) {
    const auto& skip = skips[depth_ - 1 - k];
    h = F::interpolate(h, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{skip.size(2), skip.size(3)})
                              .mode(torch::kNearest));
    h = torch::relu(up_conv_[k]->as<torch::nn::Conv2d>()->forward(h));
    h = merge_[k]->as<torch::nn::Sequential>()->forward(torch::cat({h, skip}, 1));
  }
  return out_->forward(h);
}

PlainCnnImpl::PlainCnnImpl(int in_channels, int channels, int layers) {
  body_ = register_module("body", torch::nn::Sequential());
  int in = in_channels;
  for (int k = 0; k < layers; ++k) {
    body_->push_back(conv3(in, channels));
    body_->push_back(torch::nn::ReLU());
    in = channels;
  }
  body_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 1, 1)));
}

torch::Tensor PlainCnnImpl::forward(const torch::Tensor& x) { return body_->forward(x); }

// --- collaborator ---------------------------------------------------------------------------

CollaboratorModelImpl::CollaboratorModelImpl(CollaboratorConfig config) : config_(config) {
  validate(config_);
  auto fg = UNet(config_.in_channels, config_.base_channels, foreground_depth(config_.foreground_variant));
  foreground_ = register_module("foreground", fg.ptr());
  run_foreground_ = [fg](const torch::Tensor& x) mutable { return fg->forward(x); };
  if (config_.border_variant == BorderVariant::B1) {
    auto b = PlainCnn(config_.in_channels, config_.border_channels, 3);
    border_ = register_module("border", b.ptr());
    run_border_ = [b](const torch::Tensor& x) mutable { return b->forward(x); };
  } else {
    auto b = UNet(config_.in_channels, config_.border_channels, 2);
    border_ = register_module("border", b.ptr());
    run_border_ = [b](const torch::Tensor& x) mutable { return b->forward(x); };
  }
  init_weights(*this);
}

CollaboratorMaps CollaboratorModelImpl::forward(const torch::Tensor& image) {
  const int div = required_divisor(config_);
  if (image.dim() != 4 || image.size(2) % div != 0 || image.size(3) % div != 0) {
    throw InvalidArgument("collaborator input must be 1 x C x H x W with H, W divisible by " + std::to_string(div));
  }
  return {torch::sigmoid(run_foreground_(image))[0][0], torch::sigmoid(run_border_(image))[0][0]};
}

long long parameter_count(const torch::nn::Module& module) {
  long long n = 0;
  for (const auto& p : module.parameters()) {
    if (p.requires_grad()) n += p.numel();
  }
  return n;
}

long long parameter_count(const CollaboratorConfig& config) {
  CollaboratorModel model(config);
  return parameter_count(*model);
}

}  // namespace cks
