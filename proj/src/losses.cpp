#include "cks/losses.hpp"

#include <cmath>

#include "cks/error.hpp"
#include "cks/json_util.hpp"

namespace F = torch::nn::functional;
using nlohmann::json;

namespace cks {

double LossWeights::d_for(const std::string& group) const {
  const auto it = d_by_group.find(group);
  return it == d_by_group.end() ? d : it->second;
}

void validate(const LossWeights& w) {
  for (double v : {w.lambda_det, w.lambda_s, w.lambda_b, w.lambda_mc, w.lambda_m}) {
    if (!(v >= 0.0)) throw ConfigError("losses: every lambda must be >= 0");
  }
  if (!(w.pi >= 0.0)) throw ConfigError("losses.pi must be >= 0");
  if (!(w.d > 0.0)) throw ConfigError("losses.d must be > 0");
  for (const auto& [g, d] : w.d_by_group) {
    if (!(d > 0.0)) throw ConfigError("losses.d_by_group['" + g + "'] must be > 0");
  }
  if (!(w.delta > 0.0)) throw ConfigError("losses.delta must be > 0");
  if (!(w.collapse_epsilon > 0.0)) throw ConfigError("losses.collapse_epsilon must be > 0");
  if (!(w.focal_gamma >= 0.0)) throw ConfigError("losses.focal_gamma must be >= 0");
  if (!(w.smoothing_threshold >= 0.0)) throw ConfigError("losses.smoothing_threshold must be >= 0");
}

json to_json(const LossWeights& w) {
  return {{"lambda_det", w.lambda_det},
          {"lambda_s", w.lambda_s},
          {"lambda_b", w.lambda_b},
          {"lambda_mc", w.lambda_mc},
          {"lambda_m", w.lambda_m},
          {"pi", w.pi},
          {"d", w.d},
          {"d_by_group", w.d_by_group},
          {"delta", w.delta},
          {"collapse_epsilon", w.collapse_epsilon},
          {"focal_gamma", w.focal_gamma},
          {"k_mode", w.k_mode == KMode::PerInstanceWindow ? "per_instance_window" : "image_area"},
          {"smoothing_threshold", w.smoothing_threshold}};
}

LossWeights loss_weights_from_json(const json& j, const std::string& where) {
  json_util::StrictObject o(j, where);
  LossWeights w;
  o.get("lambda_det", w.lambda_det);
  o.get("lambda_s", w.lambda_s);
  o.get("lambda_b", w.lambda_b);
  o.get("lambda_mc", w.lambda_mc);
  o.get("lambda_m", w.lambda_m);
  o.get("pi", w.pi);
  o.get("d", w.d);
  o.get("d_by_group", w.d_by_group);
  o.get("delta", w.delta);
  o.get("collapse_epsilon", w.collapse_epsilon);
  o.get("focal_gamma", w.focal_gamma);
  std::string k = "per_instance_window";
  o.get("k_mode", k);
  if (k == "per_instance_window") {
    w.k_mode = KMode::PerInstanceWindow;
  } else if (k == "image_area") {
    w.k_mode = KMode::ImageArea;
  } else {
    throw ConfigError(where + ".k_mode: expected per_instance_window or image_area");
  }
  o.get("smoothing_threshold", w.smoothing_threshold);
  o.finish();
  validate(w);
  return w;
}

LossBundle total_losses(const LossComponents& c, const LossWeights& w, long long step) {
  const std::pair<const char*, double> parts[] = {
      {"l_det", c.det}, {"l_s", c.s}, {"l_b", c.b}, {"l_mc", c.mc}, {"l_m", c.m}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) throw NonFiniteError(name, step);
  }
  LossBundle b;
  b.l_det = c.det;
  b.l_s = c.s;
  b.l_b = c.b;
  b.l_mc = c.mc;
  b.l_m = c.m;
  b.l_pr = w.lambda_det * c.det + w.lambda_s * c.s + w.lambda_b * c.b + w.lambda_mc * c.mc;
  b.l_co = w.lambda_m * c.m + w.lambda_b * c.b;
  return b;
}

// --- detection -------------------------------------------------------------------------

torch::Tensor focal_bce_with_logits(const torch::Tensor& logits, const torch::Tensor& targets, double gamma) {
  const auto log_p = F::logsigmoid(logits);
  const auto log_1mp = F::logsigmoid(-logits);
  const auto p = torch::sigmoid(logits);
  const auto pos = targets * torch::pow(1.0 - p, gamma) * (-log_p);
  const auto neg = (1.0 - targets) * torch::pow(p, gamma) * (-log_1mp);
  return pos + neg;
}

torch::Tensor detection_loss(const DetectionGrids& grids, const DetectionTargets& targets, double focal_gamma) {
  torch::Tensor total;
  for (const auto& [stride, logits] : grids.logits) {
    if (!targets.d_gt.contains(stride)) {
      throw ShapeError("detection_loss: no targets for stride " + std::to_string(stride));
    }
    const auto& d_gt = targets.d_gt.at(stride);
    const auto& off_gt = targets.off_gt.at(stride);
    const auto& pos = targets.pos_mask.at(stride);
    const auto& off = grids.offsets.at(stride);
    if (!logits.sizes().equals(d_gt.sizes()) || !off.sizes().equals(off_gt.sizes()) ||
        !pos.sizes().equals(d_gt.sizes())) {
      throw ShapeError("detection_loss: grid/target shape mismatch at stride " + std::to_string(stride));
    }
    const auto target = d_gt.to(logits.options());
    const double n_pos = std::max(1.0, target.sum().item<double>());
    auto focal = focal_bce_with_logits(logits, target, focal_gamma).sum() / n_pos;

    const auto mask = pos.to(logits.options());
    const double n_off = std::max(1.0, mask.sum().item<double>());
    auto offset = ((off - off_gt.to(off.options())).pow(2).sum(0) * mask).sum() / n_off;

    auto scale_loss = focal + offset;
    total = total.defined() ? total + scale_loss : scale_loss;
  }
  if (!total.defined()) throw ShapeError("detection_loss: no scales");
  return total;
}

// --- prior and M_p ---------------------------------------------------------------------

torch::Tensor gaussian_prior(const Point& location, double d, const WindowAnchor& anchor, int window_size) {
  if (!(d > 0.0)) throw InvalidArgument("gaussian_prior: d must be > 0");
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto ys = torch::arange(window_size, opts) + anchor.y0 - location.y;
  auto xs = torch::arange(window_size, opts) + anchor.x0 - location.x;
  auto r2 = ys.pow(2).unsqueeze(1) + xs.pow(2).unsqueeze(0);
  return torch::exp(-r2 / (2.0 * d * d)).to(torch::kFloat32);
}

torch::Tensor gaussian_priors(const InstanceWindows& windows, double d) {
  if (windows.count() == 0) return torch::zeros({0, windows.size, windows.size});
  std::vector<torch::Tensor> priors;
  for (std::size_t i = 0; i < windows.count(); ++i) {
    priors.push_back(gaussian_prior(windows.locations[i], d, windows.anchors[i], windows.size));
  }
  return torch::stack(priors);
}

torch::Tensor aggregate_Mp(const InstanceWindows& windows, double d, double pi, int height, int width) {
  torch::NoGradGuard guard;
  if (windows.count() == 0) return torch::zeros({height, width}, windows.logits.options());
  auto logits = windows.logits.detach();
  if (pi != 0.0) logits = logits + pi * gaussian_priors(windows, d).to(logits.options());
  const auto rendered = render_windows(torch::sigmoid(logits), windows.anchors, height, width);
  return std::get<0>(rendered.max(0));
}

// --- segmentation consistency ---------------------------------------------------------------

torch::Tensor collaborator_seg_loss(const torch::Tensor& Mp, const torch::Tensor& Mc) {
  if (!Mp.sizes().equals(Mc.sizes())) throw ShapeError("collaborator_seg_loss: M_p and M_c shapes differ");
  return ((1.0 - Mp) * Mc + Mp * (1.0 - Mc)).mean();
}

torch::Tensor overlap_term(const torch::Tensor& rendered) {
  if (rendered.size(0) == 0) return rendered.sum();
  const auto total = rendered.sum(0);
  return (total.pow(2) - rendered.pow(2).sum(0)).sum();
}

torch::Tensor principal_seg_loss(const torch::Tensor& Mc, const InstanceWindows& windows, KMode k_mode) {
  const long n = static_cast<long>(windows.count());
  if (n == 0) return windows.logits.sum();
  const int H = static_cast<int>(Mc.size(0)), W = static_cast<int>(Mc.size(1));
  const auto s = torch::sigmoid(windows.logits);
  const auto target = crop_windows(Mc.detach(), windows.anchors, windows.size);
  const auto consistency = ((1.0 - target) * s + target * (1.0 - s)).sum();
  const auto overlap = overlap_term(render_windows(s, windows.anchors, H, W));
  const double L = windows.size;
  const double K = k_mode == KMode::PerInstanceWindow ? static_cast<double>(n) * L * L : static_cast<double>(H) * W;
  return (consistency + overlap) / K;
}

// --- borders ------------------------------------------------------------------------------------

torch::Tensor sobel_magnitude(const torch::Tensor& maps, double eps) {
  const auto opts = maps.options();
  const auto kx = torch::tensor({-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0}, opts).view({1, 1, 3, 3});
  const auto ky = torch::tensor({-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0}, opts).view({1, 1, 3, 3});
  const auto x = maps.unsqueeze(1);
  const auto gx = F::conv2d(x, kx, F::Conv2dFuncOptions().padding(1));
  const auto gy = F::conv2d(x, ky, F::Conv2dFuncOptions().padding(1));
  return (torch::sqrt(gx.pow(2) + gy.pow(2) + eps * eps) - eps).squeeze(1);
}

torch::Tensor boundary_from_probabilities(const torch::Tensor& probabilities, const std::vector<WindowAnchor>& anchors,
                                          int height, int width) {
  if (anchors.empty()) return torch::zeros({height, width}, probabilities.options());
  const auto edges = render_windows(sobel_magnitude(probabilities), anchors, height, width);
  return torch::tanh(edges.sum(0));
}

torch::Tensor boundary_from_instances(const InstanceWindows& windows, int height, int width) {
  return boundary_from_probabilities(torch::sigmoid(windows.logits), windows.anchors, height, width);
}

torch::Tensor boundary_loss(const torch::Tensor& Ba, const torch::Tensor& Bb) {
  if (!Ba.sizes().equals(Bb.sizes())) throw ShapeError("boundary_loss: shapes differ");
  return (Ba - Bb).pow(2).mean();
}

// --- collapse ---------------------------------------------------------------------------------

torch::Tensor mean_instance_probability(const InstanceWindows& windows) {
  if (windows.count() == 0) return torch::zeros({0}, windows.logits.options());
  return torch::sigmoid(windows.logits).mean({1, 2});
}

torch::Tensor collapse_penalty(const InstanceWindows& windows, double delta, double epsilon) {
  const long n = static_cast<long>(windows.count());
  if (n == 0) return windows.logits.sum();
  const auto mean = mean_instance_probability(windows).clamp_min(epsilon);
  return delta * mean.reciprocal().sum() / static_cast<double>(n);
}

}  // namespace cks
