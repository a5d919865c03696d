#pragma once

// Loss terms of collaborative knowledge sharing.
//
// Principal:    L_pr = l_det*L_det + l_s*L_S + l_b*L_B + l_mc*L_MC
// Collaborator: L_co = l_m*L_M + l_b*L_B
//
// Each model's loss treats the other model's outputs as constants; the
// callers pass detached tensors where that matters (see trainer.cpp).

#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cks/principal.hpp"
#include "json.hpp"

namespace cks {

/// Normalizer K of the principal segmentation loss.
enum class KMode {
  PerInstanceWindow,  // K = n * L^2
  ImageArea,          // K = H * W
};

struct LossWeights {
  double lambda_det = 1.0;
  double lambda_s = 1.0;
  double lambda_b = 1.0;
  double lambda_mc = 1.0;
  double lambda_m = 1.0;
  /// Prior confidence; 0 disables the location prior.
  double pi = 2.0;
  /// Prior radius in pixels when a sample's group has no entry in `d_by_group`.
  double d = 20.0;
  std::map<std::string, double> d_by_group;
  double delta = 0.1;
  double collapse_epsilon = 1e-3;
  double focal_gamma = 2.0;
  KMode k_mode = KMode::PerInstanceWindow;
  /// Label-smoothing radius of the detection targets, in grid units.
  double smoothing_threshold = 1.0;

  double d_for(const std::string& group) const;
};

void validate(const LossWeights& w);
nlohmann::json to_json(const LossWeights& w);
LossWeights loss_weights_from_json(const nlohmann::json& j, const std::string& where = "losses");

struct LossComponents {
  double det = 0.0;
  double s = 0.0;
  double b = 0.0;
  double mc = 0.0;
  double m = 0.0;
};

struct LossBundle {
  double l_det = 0.0, l_s = 0.0, l_b = 0.0, l_mc = 0.0, l_m = 0.0;
  double l_pr = 0.0, l_co = 0.0;
};

/// Weighted totals; throws NonFiniteError naming the first non-finite component.
LossBundle total_losses(const LossComponents& components, const LossWeights& weights, long long step = -1);

/// Per-cell focal binary cross-entropy (1 - p_t)^gamma * -log(p_t) computed from logits.
torch::Tensor focal_bce_with_logits(const torch::Tensor& logits, const torch::Tensor& targets, double gamma);

/// Sum over scales of [focal BCE summed over cells + squared offset error summed
/// over pos_mask cells], each normalized by max(1, number of positive cells).
torch::Tensor detection_loss(const DetectionGrids& grids, const DetectionTargets& targets, double focal_gamma);

/// exp(-((y - y_i)^2 + (x - x_i)^2) / (2 d^2)) sampled on the window's pixels (L x L).
torch::Tensor gaussian_prior(const Point& location, double d, const WindowAnchor& anchor, int window_size);

/// n x L x L stack of priors for all windows.
torch::Tensor gaussian_priors(const InstanceWindows& windows, double d);

/// M_p = max_i sigmoid(logit_i + pi * prior_i), 0 where no window covers a pixel.
/// Computed without gradient.
torch::Tensor aggregate_Mp(const InstanceWindows& windows, double d, double pi, int height, int width);

/// L_M = mean[(1 - M_p) M_c + M_p (1 - M_c)].
torch::Tensor collaborator_seg_loss(const torch::Tensor& Mp, const torch::Tensor& Mc);

/// sum_pixels sum_i s_i sum_{j != i} s_j over rendered instance maps (n x H x W).
torch::Tensor overlap_term(const torch::Tensor& rendered_probabilities);

/// L_S: per-window consistency with M_c plus the overlap penalty, over K.
torch::Tensor principal_seg_loss(const torch::Tensor& Mc, const InstanceWindows& windows, KMode k_mode);

/// Sobel gradient magnitude sqrt(gx^2 + gy^2 + eps^2) - eps of each n x L x L
/// map, zero-padded at the window edge.
torch::Tensor sobel_magnitude(const torch::Tensor& maps, double eps = 1e-3);

/// B_p = tanh(sum_i |sobel(s_i)|) rendered at image size, from window probabilities.
torch::Tensor boundary_from_probabilities(const torch::Tensor& probabilities, const std::vector<WindowAnchor>& anchors,
                                          int height, int width);
torch::Tensor boundary_from_instances(const InstanceWindows& windows, int height, int width);

/// mean((B_a - B_b)^2)
torch::Tensor boundary_loss(const torch::Tensor& Ba, const torch::Tensor& Bb);

/// (delta / n) sum_i 1 / max(mean(s_i), epsilon); 0 when n == 0.
torch::Tensor collapse_penalty(const InstanceWindows& windows, double delta, double epsilon = 1e-3);

/// Mean window probability of each instance (n values).
torch::Tensor mean_instance_probability(const InstanceWindows& windows);

}  // namespace cks
