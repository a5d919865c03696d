#include "cks/principal.hpp"

#include <cmath>

#include "cks/error.hpp"
#include "cks/json_util.hpp"

namespace F = torch::nn::functional;
using nlohmann::json;

namespace cks {

// --- config ----------------------------------------------------------------------

PrincipalConfig PrincipalConfig::convnext_small() {
  PrincipalConfig c;
  c.backbone = BackboneKind::ConvNeXtSmall;
  c.backbone_channels = {96, 192, 384, 768};
  c.backbone_depths = {3, 3, 27, 3};
  return c;
}

std::string to_string(BackboneKind kind) {
  return kind == BackboneKind::TinyConvNet ? "tiny_convnet" : "convnext_small";
}

void validate(const PrincipalConfig& c) {
  auto positive = [](const std::vector<int>& v) {
    return !v.empty() && std::all_of(v.begin(), v.end(), [](int x) { return x > 0; });
  };
  if (c.in_channels <= 0 || c.fpn_channels <= 0 || c.window_size <= 0 || c.detection_head_depth < 0 ||
      c.encoding_channels <= 0 || c.seg_feature_channels <= 0) {
    throw ConfigError("principal: all dimensions must be positive");
  }
  if (c.backbone_channels.size() != 4 || !positive(c.backbone_channels)) {
    throw ConfigError("principal.backbone_channels: need four positive stage widths");
  }
  if (c.backbone == BackboneKind::ConvNeXtSmall && (c.backbone_depths.size() != 4 || !positive(c.backbone_depths))) {
    throw ConfigError("principal.backbone_depths: need four positive stage depths");
  }
  if (!positive(c.mlp_dims) || !positive(c.seg_head_channels)) {
    throw ConfigError("principal: mlp_dims and seg_head_channels must be non-empty and positive");
  }
  if (c.scales.empty() || !std::is_sorted(c.scales.begin(), c.scales.end()) ||
      std::adjacent_find(c.scales.begin(), c.scales.end()) != c.scales.end()) {
    throw ConfigError("principal.scales: must be strictly ascending");
  }
  for (int s : c.scales) {
    if (s != 4 && s != 8 && s != 16 && s != 32) throw ConfigError("principal.scales: strides must be in {4,8,16,32}");
  }
  if (c.scales.front() != 4) throw ConfigError("principal.scales: stride 4 feeds the segmentation head and is required");
  if (c.window_size % c.scales.front() != 0) {
    throw ConfigError("principal.window_size must be divisible by the smallest stride");
  }
  if (!(c.detection_prior > 0.0 && c.detection_prior < 1.0)) {
    throw ConfigError("principal.detection_prior must be in (0,1)");
  }
}

json to_json(const PrincipalConfig& c) {
  return {{"backbone", to_string(c.backbone)},
          {"in_channels", c.in_channels},
          {"backbone_channels", c.backbone_channels},
          {"backbone_depths", c.backbone_depths},
          {"fpn_channels", c.fpn_channels},
          {"scales", c.scales},
          {"window_size", c.window_size},
          {"detection_head_depth", c.detection_head_depth},
          {"mlp_dims", c.mlp_dims},
          {"encoding_channels", c.encoding_channels},
          {"seg_feature_channels", c.seg_feature_channels},
          {"seg_head_channels", c.seg_head_channels},
          {"detection_prior", c.detection_prior}};
}

PrincipalConfig principal_config_from_json(const json& j, const std::string& where) {
  json_util::StrictObject o(j, where);
  std::string backbone = "tiny_convnet";
  o.get("backbone", backbone);
  PrincipalConfig c;
  if (backbone == "convnext_small") {
    c = PrincipalConfig::convnext_small();
  } else if (backbone != "tiny_convnet") {
    throw ConfigError(where + ".backbone: unknown backbone '" + backbone + "'");
  }
  o.get("in_channels", c.in_channels);
  o.get("backbone_channels", c.backbone_channels);
  o.get("backbone_depths", c.backbone_depths);
  o.get("fpn_channels", c.fpn_channels);
  o.get("scales", c.scales);
  o.get("window_size", c.window_size);
  o.get("detection_head_depth", c.detection_head_depth);
  o.get("mlp_dims", c.mlp_dims);
  o.get("encoding_channels", c.encoding_channels);
  o.get("seg_feature_channels", c.seg_feature_channels);
  o.get("seg_head_channels", c.seg_head_channels);
  o.get("detection_prior", c.detection_prior);
  o.finish();
  validate(c);
  return c;
}

// --- geometry --------------------------------------------------------------------

int padded_extent(int extent, const PrincipalConfig& config) {
  const int s = config.max_stride();
  const int needed = std::max(extent, config.window_size);
  return (needed + s - 1) / s * s;
}

torch::Tensor image_to_tensor(const cv::Mat& image) {
  cv::Mat f;
  image.convertTo(f, CV_32F);
  if (!f.isContinuous()) f = f.clone();
  return torch::from_blob(f.data, {f.rows, f.cols, f.channels()}, torch::kFloat32).permute({2, 0, 1}).clone();
}

torch::Tensor mask_to_tensor(const cv::Mat& mask, int height, int width) {
  if (mask.rows > height || mask.cols > width) {
    throw ShapeError("mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                     " larger than target " + std::to_string(height) + "x" + std::to_string(width));
  }
  cv::Mat f;
  mask.convertTo(f, CV_32F);
  cv::Mat padded;
  cv::copyMakeBorder(f, padded, 0, height - f.rows, 0, width - f.cols, cv::BORDER_CONSTANT, cv::Scalar(0));
  cv::Mat bin = padded > 0;
  cv::Mat out;
  bin.convertTo(out, CV_32F, 1.0 / 255.0);
  return torch::from_blob(out.data, {height, width}, torch::kFloat32).clone();
}

PaddedImage pad_image(const cv::Mat& image, const PrincipalConfig& config) {
  PaddedImage out;
  out.height = image.rows;
  out.width = image.cols;
  out.padded_height = padded_extent(image.rows, config);
  out.padded_width = padded_extent(image.cols, config);
  auto t = image_to_tensor(image);
  t = F::pad(t, F::PadFuncOptions({0, out.padded_width - out.width, 0, out.padded_height - out.height}));
  out.tensor = t.unsqueeze(0);
  return out;
}

DetectionTargets detection_targets(const std::vector<Point>& points, int padded_height, int padded_width,
                                   const std::vector<int>& scales, double smoothing_threshold) {
  DetectionTargets t;
  for (int s : scales) {
    const int h = padded_height / s, w = padded_width / s;
    auto d = torch::zeros({h, w});
    auto off = torch::zeros({2, h, w});
    auto pos = torch::zeros({h, w}, torch::kBool);
    auto best = torch::full({h, w}, std::numeric_limits<double>::infinity(), torch::kFloat64);
    auto d_a = d.accessor<float, 2>();
    auto off_a = off.accessor<float, 3>();
    auto pos_a = pos.accessor<bool, 2>();
    auto best_a = best.accessor<double, 2>();

    for (const auto& p : points) {
      const double gy = p.y / s, gx = p.x / s;
      const int cy = static_cast<int>(std::floor(gy)), cx = static_cast<int>(std::floor(gx));
      const int reach = static_cast<int>(std::ceil(smoothing_threshold)) + 1;
      for (int yy = cy - reach; yy <= cy + reach; ++yy) {
        for (int xx = cx - reach; xx <= cx + reach; ++xx) {
          if (yy < 0 || xx < 0 || yy >= h || xx >= w) continue;
          const bool containing = yy == cy && xx == cx;
          const double dy = gy - (yy + 0.5), dx = gx - (xx + 0.5);
          const double dist = std::sqrt(dy * dy + dx * dx);
          if (!containing && dist > smoothing_threshold) continue;
          d_a[yy][xx] = 1.0f;
          // Each cell regresses toward the nearest point (ties: first point).
          if (dist < best_a[yy][xx]) {
            best_a[yy][xx] = dist;
            off_a[0][yy][xx] = static_cast<float>(gy - yy);
            off_a[1][yy][xx] = static_cast<float>(gx - xx);
          }
          if (containing) pos_a[yy][xx] = true;
        }
      }
    }
    t.d_gt[s] = d;
    t.off_gt[s] = off;
    t.pos_mask[s] = pos;
  }
  return t;
}

WindowAnchor window_anchor(const Point& location, int window_size, int padded_height, int padded_width) {
  const int half = window_size / 2;
  const int y0 = static_cast<int>(std::lround(location.y)) - half;
  const int x0 = static_cast<int>(std::lround(location.x)) - half;
  return {std::clamp(y0, 0, std::max(0, padded_height - window_size)),
          std::clamp(x0, 0, std::max(0, padded_width - window_size))};
}

InstanceWindows make_windows(const std::vector<Point>& locations, torch::Tensor logits, int window_size,
                             int padded_height, int padded_width) {
  InstanceWindows w;
  w.size = window_size;
  w.locations = locations;
  for (const auto& p : locations) w.anchors.push_back(window_anchor(p, window_size, padded_height, padded_width));
  w.logits = std::move(logits);
  return w;
}

torch::Tensor render_windows(const torch::Tensor& values, const std::vector<WindowAnchor>& anchors, int height,
                             int width) {
  const long n = static_cast<long>(anchors.size());
  if (n == 0) return torch::zeros({0, height, width}, values.options());
  const long L = values.size(-1);
  std::vector<torch::Tensor> canvases;
  canvases.reserve(anchors.size());
  for (long i = 0; i < n; ++i) {
    const auto& a = anchors[i];
    canvases.push_back(F::pad(values[i], F::PadFuncOptions({a.x0, width - a.x0 - L, a.y0, height - a.y0 - L})));
  }
  return torch::stack(canvases);
}

torch::Tensor crop_windows(const torch::Tensor& map, const std::vector<WindowAnchor>& anchors, int window_size) {
  if (anchors.empty()) return torch::zeros({0, window_size, window_size}, map.options());
  std::vector<torch::Tensor> crops;
  crops.reserve(anchors.size());
  for (const auto& a : anchors) {
    crops.push_back(map.narrow(-2, a.y0, window_size).narrow(-1, a.x0, window_size));
  }
  return torch::stack(crops);
}

// --- backbones ---------------------------------------------------------------------

namespace {

torch::nn::Conv2d conv(int in, int out, int k, int stride = 1, int groups = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2).groups(groups));
}

class TinyConvNetImpl : public BackboneImpl {
 public:
  explicit TinyConvNetImpl(const PrincipalConfig& c) : channels_(c.backbone_channels) {
    stem_ = register_module("stem", torch::nn::Sequential(conv(c.in_channels, channels_[0], 3, 2), torch::nn::ReLU(),
                                                          conv(channels_[0], channels_[0], 3, 2), torch::nn::ReLU(),
                                                          conv(channels_[0], channels_[0], 3), torch::nn::ReLU()));
    stages_ = register_module("stages", torch::nn::ModuleList());
    for (int k = 1; k < 4; ++k) {
      stages_->push_back(torch::nn::Sequential(conv(channels_[k - 1], channels_[k], 3, 2), torch::nn::ReLU(),
                                               conv(channels_[k], channels_[k], 3), torch::nn::ReLU()));
    }
  }

  std::vector<torch::Tensor> forward(const torch::Tensor& image) override {
    std::vector<torch::Tensor> out{stem_->forward(image)};
    for (const auto& stage : *stages_) out.push_back(stage->as<torch::nn::Sequential>()->forward(out.back()));
    return out;
  }

  std::vector<int> stage_channels() const override { return channels_; }

 private:
  std::vector<int> channels_;
  torch::nn::Sequential stem_{nullptr};
  torch::nn::ModuleList stages_{nullptr};
};

// LayerNorm over the channel dimension of an NCHW tensor.
class ChannelNormImpl : public torch::nn::Module {
 public:
  explicit ChannelNormImpl(int channels) {
    norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels}).eps(1e-6)));
  }
  torch::Tensor forward(const torch::Tensor& x) { return norm_->forward(x.permute({0, 2, 3, 1})).permute({0, 3, 1, 2}); }

 private:
  torch::nn::LayerNorm norm_{nullptr};
};
TORCH_MODULE(ChannelNorm);

class ConvNeXtBlockImpl : public torch::nn::Module {
 public:
  explicit ConvNeXtBlockImpl(int dim) {
    dw_ = register_module("dwconv", conv(dim, dim, 7, 1, dim));
    norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
    pw1_ = register_module("pwconv1", torch::nn::Linear(dim, 4 * dim));
    pw2_ = register_module("pwconv2", torch::nn::Linear(4 * dim, dim));
    gamma_ = register_parameter("gamma", torch::full({dim}, 1e-6));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    auto y = dw_->forward(x).permute({0, 2, 3, 1});
    y = pw2_->forward(torch::gelu(pw1_->forward(norm_->forward(y))));
    return x + (gamma_ * y).permute({0, 3, 1, 2});
  }

 private:
  torch::nn::Conv2d dw_{nullptr};
  torch::nn::LayerNorm norm_{nullptr};
  torch::nn::Linear pw1_{nullptr}, pw2_{nullptr};
  torch::Tensor gamma_;
};
TORCH_MODULE(ConvNeXtBlock);

class ConvNeXtImpl : public BackboneImpl {
 public:
  explicit ConvNeXtImpl(const PrincipalConfig& c) : channels_(c.backbone_channels) {
    stages_ = register_module("stages", torch::nn::ModuleList());
    for (int k = 0; k < 4; ++k) {
      torch::nn::Sequential stage;
      if (k == 0) {
        stage->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(c.in_channels, channels_[0], 4).stride(4)));
        stage->push_back(ChannelNorm(channels_[0]));
      } else {
        stage->push_back(ChannelNorm(channels_[k - 1]));
        stage->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(channels_[k - 1], channels_[k], 2).stride(2)));
      }
      for (int b = 0; b < c.backbone_depths[k]; ++b) stage->push_back(ConvNeXtBlock(channels_[k]));
      stages_->push_back(stage);
    }
  }

  std::vector<torch::Tensor> forward(const torch::Tensor& image) override {
    std::vector<torch::Tensor> out;
    torch::Tensor x = image;
    for (const auto& stage : *stages_) {
      x = stage->as<torch::nn::Sequential>()->forward(x);
      out.push_back(x);
    }
    return out;
  }

  std::vector<int> stage_channels() const override { return channels_; }

 private:
  std::vector<int> channels_;
  torch::nn::ModuleList stages_{nullptr};
};

int stage_index(int stride) {
  switch (stride) {
    case 4:
      return 0;
    case 8:
      return 1;
    case 16:
      return 2;
    default:
      return 3;
  }
}

}  // namespace

std::shared_ptr<BackboneImpl> make_backbone(const PrincipalConfig& config) {
  if (config.backbone == BackboneKind::ConvNeXtSmall) return std::make_shared<ConvNeXtImpl>(config);
  return std::make_shared<TinyConvNetImpl>(config);
}

void he_initialize(torch::nn::Module& module) {
  torch::NoGradGuard guard;
  for (auto& m : module.modules(/*include_self=*/false)) {
    if (auto* c = m->as<torch::nn::Conv2d>()) {
      torch::nn::init::kaiming_normal_(c->weight, 0.0, torch::kFanOut, torch::kReLU);
      if (c->bias.defined()) c->bias.zero_();
    } else if (auto* l = m->as<torch::nn::Linear>()) {
      torch::nn::init::kaiming_normal_(l->weight, 0.0, torch::kFanIn, torch::kReLU);
      if (l->bias.defined()) l->bias.zero_();
    }
  }
}

// --- principal model -------------------------------------------------------------------

PrincipalModelImpl::PrincipalModelImpl(PrincipalConfig config) : config_(std::move(config)) {
  validate(config_);
  backbone_ = register_module("backbone", make_backbone(config_));
  const int F = config_.fpn_channels;
  lateral_ = register_module("fpn_lateral", torch::nn::ModuleList());
  smooth_ = register_module("fpn_output", torch::nn::ModuleList());
  for (int ch : backbone_->stage_channels()) {
    lateral_->push_back(conv(ch, F, 1));
    smooth_->push_back(conv(F, F, 3));
  }

  det_tower_ = register_module("det_tower", torch::nn::Sequential());
  for (int k = 0; k < config_.detection_head_depth; ++k) {
    det_tower_->push_back(conv(F, F, 3));
    det_tower_->push_back(torch::nn::ReLU());
  }
  det_out_ = register_module("det_out", conv(F, 3, 1));

  seg_project_ = register_module("seg_project", conv(F, config_.seg_feature_channels, 1));
  const int g = config_.encoding_grid();
  mlp_ = register_module("position_mlp", torch::nn::Sequential());
  int width = F;
  for (int dim : config_.mlp_dims) {
    mlp_->push_back(torch::nn::Linear(width, dim));
    mlp_->push_back(torch::nn::ReLU());
    width = dim;
  }
  mlp_->push_back(torch::nn::Linear(width, config_.encoding_channels * g * g));

  seg_tower_ = register_module("seg_tower", torch::nn::Sequential());
  int in = config_.seg_feature_channels + config_.in_channels + config_.encoding_channels + 2;
  for (int ch : config_.seg_head_channels) {
    seg_tower_->push_back(conv(in, ch, 3));
    seg_tower_->push_back(torch::nn::ReLU());
    in = ch;
  }
  seg_out_ = register_module("seg_out", conv(in, 1, 1));

  he_initialize(*this);
  torch::NoGradGuard guard;
  det_out_->bias[0].fill_(-std::log((1.0 - config_.detection_prior) / config_.detection_prior));
}

FeaturePyramid PrincipalModelImpl::forward_features(const torch::Tensor& image) {
  const int s = config_.max_stride();
  if (image.dim() != 4 || image.size(2) < s || image.size(3) < s) {
    throw InvalidArgument("forward_features: image must be 1 x C x H x W with H, W >= " + std::to_string(s));
  }
  if (image.size(2) % s != 0 || image.size(3) % s != 0) {
    throw InvalidArgument("forward_features: image must be padded to a multiple of " + std::to_string(s));
  }
  const auto stages = backbone_->forward(image);
  std::vector<torch::Tensor> merged(4);
  merged[3] = lateral_[3]->as<torch::nn::Conv2d>()->forward(stages[3]);
  for (int k = 2; k >= 0; --k) {
    auto lat = lateral_[k]->as<torch::nn::Conv2d>()->forward(stages[k]);
    auto up = F::interpolate(merged[k + 1], F::InterpolateFuncOptions()
                                                .size(std::vector<int64_t>{lat.size(2), lat.size(3)})
                                                .mode(torch::kNearest));
    merged[k] = lat + up;
  }
  FeaturePyramid out;
  for (int stride : config_.scales) {
    const int k = stage_index(stride);
    out.levels[stride] = smooth_[k]->as<torch::nn::Conv2d>()->forward(merged[k]);
  }
  return out;
}

DetectionGrids PrincipalModelImpl::detect(const FeaturePyramid& features) {
  DetectionGrids grids;
  for (const auto& [stride, level] : features.levels) {
    auto out = det_out_->forward(det_tower_->forward(level))[0];
    grids.logits[stride] = out[0];
    grids.offsets[stride] = out.slice(0, 1, 3);
  }
  return grids;
}

InstanceWindows PrincipalModelImpl::encode_and_segment(const FeaturePyramid& features, const torch::Tensor& image,
                                                       const std::vector<Point>& locations) {
  const int L = config_.window_size;
  const int Hp = static_cast<int>(image.size(2)), Wp = static_cast<int>(image.size(3));
  InstanceWindows windows = make_windows(locations, torch::Tensor(), L, Hp, Wp);
  if (locations.empty()) {
    windows.logits = torch::zeros({0, L, L}, image.options());
    return windows;
  }
  const auto& fine = features.levels.at(4);
  const long h4 = fine.size(2), w4 = fine.size(3);

  auto projected = torch::relu(seg_project_->forward(fine));
  auto full = F::interpolate(projected, F::InterpolateFuncOptions()
                                            .size(std::vector<int64_t>{Hp, Wp})
                                            .mode(torch::kBilinear)
                                            .align_corners(false));
  full = torch::cat({full, image}, 1)[0];  // C' x Hp x Wp
  auto patches = crop_windows(full, windows.anchors, L);

  std::vector<torch::Tensor> vectors;
  std::vector<float> rel;
  rel.reserve(locations.size() * 2 * L * L);
  for (std::size_t i = 0; i < locations.size(); ++i) {
    const auto& p = locations[i];
    const long iy = std::clamp<long>(std::lround(p.y) / 4, 0, h4 - 1);
    const long ix = std::clamp<long>(std::lround(p.x) / 4, 0, w4 - 1);
    vectors.push_back(fine[0].select(1, iy).select(1, ix));
    const auto& a = windows.anchors[i];
    const float scale = 2.0f / static_cast<float>(L);
    for (int r = 0; r < L; ++r) {
      for (int c = 0; c < L; ++c) rel.push_back(static_cast<float>((a.y0 + r) - p.y) * scale);
    }
    for (int r = 0; r < L; ++r) {
      for (int c = 0; c < L; ++c) rel.push_back(static_cast<float>((a.x0 + c) - p.x) * scale);
    }
  }
  const long n = static_cast<long>(locations.size());
  const int g = config_.encoding_grid();
  auto encoding = mlp_->forward(torch::stack(vectors)).view({n, config_.encoding_channels, g, g});
  encoding = F::interpolate(encoding, F::InterpolateFuncOptions()
                                          .size(std::vector<int64_t>{L, L})
                                          .mode(torch::kBilinear)
                                          .align_corners(false));
  auto relative = torch::from_blob(rel.data(), {n, 2, L, L}, torch::kFloat32).clone().to(image.options());
  auto x = torch::cat({patches, encoding, relative}, 1);
  windows.logits = seg_out_->forward(seg_tower_->forward(x)).squeeze(1);
  return windows;
}

std::vector<torch::Tensor> PrincipalModelImpl::backbone_parameters() const { return backbone_->parameters(); }

std::vector<torch::Tensor> PrincipalModelImpl::head_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& item : named_children()) {
    if (item.key() == "backbone") continue;
    for (auto& p : item.value()->parameters()) out.push_back(p);
  }
  return out;
}

// --- supervised loss ---------------------------------------------------------------------

torch::Tensor supervised_segmentation_loss(const InstanceWindows& windows, const std::vector<cv::Mat>& gt_masks,
                                           const std::vector<int>& assignment, int padded_height, int padded_width) {
  if (assignment.size() != windows.count()) {
    throw ShapeError("supervised_segmentation_loss: " + std::to_string(windows.count()) + " windows but " +
                     std::to_string(assignment.size()) + " assignments");
  }
  if (windows.count() == 0) return windows.logits.sum();
  if (windows.logits.size(1) != windows.size || windows.logits.size(2) != windows.size) {
    throw ShapeError("supervised_segmentation_loss: logits do not match window size");
  }
  std::vector<torch::Tensor> targets;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    const int m = assignment[i];
    if (m < 0 || static_cast<std::size_t>(m) >= gt_masks.size()) {
      throw ShapeError("supervised_segmentation_loss: window " + std::to_string(i) + " assigned to missing mask " +
                       std::to_string(m));
    }
    const auto& a = windows.anchors[i];
    if (a.y0 + windows.size > padded_height || a.x0 + windows.size > padded_width) {
      throw ShapeError("supervised_segmentation_loss: window " + std::to_string(i) + " exceeds the padded image");
    }
    auto full = mask_to_tensor(gt_masks[m], padded_height, padded_width);
    targets.push_back(full.narrow(0, a.y0, windows.size).narrow(1, a.x0, windows.size));
  }
  auto target = torch::stack(targets).to(windows.logits.options());
  return F::binary_cross_entropy_with_logits(windows.logits, target);
}

}  // namespace cks
