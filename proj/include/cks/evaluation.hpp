#pragma once

// Mask-IoU average precision without precision/recall smoothing:
//   AP = sum_k T_k * P_k / C,  P_k = (sum_{j<=k} T_j) / k
// evaluated over detections in descending score order.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

namespace cks {

/// A scored binary mask (CV_8UC1, 0/1) for evaluation.
struct ScoredMask {
  double score = 0.0;
  cv::Mat mask;
};

/// Predictions and ground truth for one image.
struct EvalImage {
  std::string id;
  std::string group;
  std::vector<ScoredMask> predictions;
  std::vector<cv::Mat> gt_masks;
};

/// The ten thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> iou_ladder();

double mask_iou(const cv::Mat& a, const cv::Mat& b);

/// IoU of every prediction (rows) against every ground truth (cols).
std::vector<std::vector<double>> iou_matrix(const std::vector<cv::Mat>& predictions, const std::vector<cv::Mat>& gts);

/// Greedy one-to-one matching in the given (score-descending) order: each
/// prediction takes its best-IoU still-unmatched ground truth if that IoU
/// reaches `iou_threshold`.
std::vector<int> match_detections(const std::vector<std::vector<double>>& iou, double iou_threshold);

/// Mask overload; `predictions` must already be sorted by score descending.
std::vector<int> match_detections(const std::vector<cv::Mat>& predictions, const std::vector<cv::Mat>& gts,
                                  double iou_threshold);

/// AP from the indicator sequence T and ground-truth count C.
/// C == 0: 1.0 if T is empty, else 0.0.
double average_precision(const std::vector<int>& T, long long C);

struct ApCounts {
  long long gt = 0;
  long long detections = 0;
  long long true_positives = 0;  // at IoU 0.5
};

struct EvalSummary {
  std::map<double, double> ap_by_threshold;
  double map_score = 0.0;
  ApCounts counts;

  double ap50() const;
  double ap75() const;
};

struct EvalResult {
  EvalSummary pooled;                           // detections ranked across all images
  EvalSummary per_image;                        // mean of per-image APs
  std::map<std::string, EvalSummary> by_group;  // pooled within each group
};

/// Pools detections across images (global score ranking, C = total gt count).
/// Throws InvalidArgument on duplicate ids or mismatched mask shapes.
EvalResult evaluate_dataset(const std::vector<EvalImage>& images,
                            const std::vector<double>& thresholds = iou_ladder());

/// Pairs prediction and ground-truth lists by id; throws InvalidArgument
/// listing every id present in only one of them.
std::vector<EvalImage> align_by_id(std::map<std::string, std::vector<ScoredMask>> predictions,
                                   std::map<std::string, std::vector<cv::Mat>> ground_truth,
                                   const std::map<std::string, std::string>& groups = {});

/// Human-readable table with AP50 / AP75 / mAP columns (one row per group
/// plus ALL) followed by the full threshold ladder of the pooled result.
std::string format_metrics_table(const EvalResult& result);

/// Machine-readable form: {"pooled": {...}, "per_image": {...}, "groups": {...}}.
std::string metrics_json(const EvalResult& result);

}  // namespace cks
