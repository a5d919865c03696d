#include "cks/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "cks/error.hpp"
#include "json.hpp"

namespace cks {

namespace {

struct RankedDetection {
  double score;
  std::size_t image;
  std::size_t index;  // within the image's score-sorted list
};

// Score-descending order, stable on original position.
std::vector<std::size_t> score_order(const std::vector<ScoredMask>& preds) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
  return order;
}

double nearest_key(const std::map<double, double>& m, double key) {
  for (const auto& [k, v] : m) {
    if (std::abs(k - key) < 1e-9) return v;
  }
  return 0.0;
}

EvalSummary summarize(const std::vector<const EvalImage*>& images,
                      const std::vector<std::vector<std::vector<double>>>& ious,
                      const std::vector<std::vector<std::size_t>>& orders, const std::vector<double>& thresholds) {
  EvalSummary out;
  std::vector<RankedDetection> ranked;
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.counts.gt += static_cast<long long>(images[i]->gt_masks.size());
    for (std::size_t k = 0; k < orders[i].size(); ++k) {
      ranked.push_back({images[i]->predictions[orders[i][k]].score, i, k});
    }
  }
  out.counts.detections = static_cast<long long>(ranked.size());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const RankedDetection& a, const RankedDetection& b) { return a.score > b.score; });

  for (double t : thresholds) {
    std::vector<std::vector<int>> per_image_T(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) per_image_T[i] = match_detections(ious[i], t);
    std::vector<int> T;
    T.reserve(ranked.size());
    for (const auto& d : ranked) T.push_back(per_image_T[d.image][d.index]);
    out.ap_by_threshold[t] = average_precision(T, out.counts.gt);
    if (std::abs(t - 0.5) < 1e-9) out.counts.true_positives = std::accumulate(T.begin(), T.end(), 0LL);
  }
  double sum = 0.0;
  for (const auto& [t, ap] : out.ap_by_threshold) sum += ap;
  out.map_score = thresholds.empty() ? 0.0 : sum / static_cast<double>(thresholds.size());
  return out;
}

}  // namespace

std::vector<double> iou_ladder() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back(0.5 + 0.05 * k);
  return t;
}

double mask_iou(const cv::Mat& a, const cv::Mat& b) {
  if (a.size() != b.size()) {
    throw ShapeError("mask_iou: shapes differ (" + std::to_string(a.rows) + "x" + std::to_string(a.cols) + " vs " +
                     std::to_string(b.rows) + "x" + std::to_string(b.cols) + ")");
  }
  const cv::Mat ba = a != 0, bb = b != 0;
  const int inter = cv::countNonZero(ba & bb);
  const int uni = cv::countNonZero(ba | bb);
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

std::vector<std::vector<double>> iou_matrix(const std::vector<cv::Mat>& predictions, const std::vector<cv::Mat>& gts) {
  std::vector<std::vector<double>> m(predictions.size(), std::vector<double>(gts.size(), 0.0));
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    for (std::size_t j = 0; j < gts.size(); ++j) m[i][j] = mask_iou(predictions[i], gts[j]);
  }
  return m;
}

std::vector<int> match_detections(const std::vector<std::vector<double>>& iou, double iou_threshold) {
  std::vector<int> T(iou.size(), 0);
  if (iou.empty()) return T;
  std::vector<bool> used(iou.front().size(), false);
  for (std::size_t k = 0; k < iou.size(); ++k) {
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t j = 0; j < iou[k].size(); ++j) {
      if (!used[j] && iou[k][j] > best_iou) {
        best_iou = iou[k][j];
        best = static_cast<int>(j);
      }
    }
    if (best >= 0 && best_iou >= iou_threshold) {
      used[best] = true;
      T[k] = 1;
    }
  }
  return T;
}

std::vector<int> match_detections(const std::vector<cv::Mat>& predictions, const std::vector<cv::Mat>& gts,
                                  double iou_threshold) {
  return match_detections(iou_matrix(predictions, gts), iou_threshold);
}

double average_precision(const std::vector<int>& T, long long C) {
  if (C == 0) return T.empty() ? 1.0 : 0.0;
  double sum = 0.0;
  long long tp = 0;
  for (std::size_t k = 0; k < T.size(); ++k) {
    if (T[k]) {
      ++tp;
      sum += static_cast<double>(tp) / static_cast<double>(k + 1);
    }
  }
  return sum / static_cast<double>(C);
}

double EvalSummary::ap50() const { return nearest_key(ap_by_threshold, 0.5); }
double EvalSummary::ap75() const { return nearest_key(ap_by_threshold, 0.75); }

EvalResult evaluate_dataset(const std::vector<EvalImage>& images, const std::vector<double>& thresholds) {
  std::set<std::string> seen;
  for (const auto& img : images) {
    if (!seen.insert(img.id).second) throw InvalidArgument("evaluate_dataset: duplicate image id '" + img.id + "'");
  }
  std::vector<std::vector<std::size_t>> orders;
  std::vector<std::vector<std::vector<double>>> ious;
  for (const auto& img : images) {
    orders.push_back(score_order(img.predictions));
    std::vector<cv::Mat> sorted;
    for (std::size_t idx : orders.back()) sorted.push_back(img.predictions[idx].mask);
    try {
      ious.push_back(iou_matrix(sorted, img.gt_masks));
    } catch (const ShapeError& e) {
      throw InvalidArgument("image '" + img.id + "': " + e.what());
    }
  }

  EvalResult result;
  std::vector<const EvalImage*> all;
  for (const auto& img : images) all.push_back(&img);
  result.pooled = summarize(all, ious, orders, thresholds);

  // per-image mean
  for (double t : thresholds) result.per_image.ap_by_threshold[t] = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const EvalSummary s = summarize({all[i]}, {ious[i]}, {orders[i]}, thresholds);
    for (const auto& [t, ap] : s.ap_by_threshold) result.per_image.ap_by_threshold[t] += ap / images.size();
    result.per_image.counts.gt += s.counts.gt;
    result.per_image.counts.detections += s.counts.detections;
    result.per_image.counts.true_positives += s.counts.true_positives;
  }
  double sum = 0.0;
  for (const auto& [t, ap] : result.per_image.ap_by_threshold) sum += ap;
  result.per_image.map_score = thresholds.empty() ? 0.0 : sum / thresholds.size();

  std::map<std::string, std::vector<std::size_t>> by_group;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!images[i].group.empty()) by_group[images[i].group].push_back(i);
  }
  for (const auto& [group, idx] : by_group) {
    std::vector<const EvalImage*> imgs;
    std::vector<std::vector<std::vector<double>>> g_ious;
    std::vector<std::vector<std::size_t>> g_orders;
    for (std::size_t i : idx) {
      imgs.push_back(all[i]);
      g_ious.push_back(ious[i]);
      g_orders.push_back(orders[i]);
    }
    result.by_group[group] = summarize(imgs, g_ious, g_orders, thresholds);
  }
  return result;
}

std::vector<EvalImage> align_by_id(std::map<std::string, std::vector<ScoredMask>> predictions,
                                   std::map<std::string, std::vector<cv::Mat>> ground_truth,
                                   const std::map<std::string, std::string>& groups) {
  std::vector<std::string> missing;
  for (const auto& [id, _] : predictions) {
    if (!ground_truth.contains(id)) missing.push_back(id + " (no ground truth)");
  }
  for (const auto& [id, _] : ground_truth) {
    if (!predictions.contains(id)) missing.push_back(id + " (no predictions)");
  }
  if (!missing.empty()) {
    std::string msg = "image ids do not align:";
    for (const auto& m : missing) msg += " " + m;
    throw InvalidArgument(msg);
  }
  std::vector<EvalImage> out;
  for (auto& [id, gts] : ground_truth) {
    EvalImage img;
    img.id = id;
    const auto g = groups.find(id);
    if (g != groups.end()) img.group = g->second;
    img.gt_masks = std::move(gts);
    img.predictions = std::move(predictions[id]);
    out.push_back(std::move(img));
  }
  return out;
}

std::string format_metrics_table(const EvalResult& result) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << std::left << std::setw(16) << "" << std::right << std::setw(8) << "AP50" << std::setw(8) << "AP75"
     << std::setw(8) << "mAP" << '\n';
  for (const auto& [group, s] : result.by_group) {
    os << std::left << std::setw(16) << group << std::right << std::setw(8) << s.ap50() << std::setw(8) << s.ap75()
       << std::setw(8) << s.map_score << '\n';
  }
  const auto& p = result.pooled;
  os << std::left << std::setw(16) << "ALL" << std::right << std::setw(8) << p.ap50() << std::setw(8) << p.ap75()
     << std::setw(8) << p.map_score << '\n';
  os << '\n' << std::left << std::setw(10) << "IoU" << "AP" << '\n';
  for (const auto& [t, ap] : p.ap_by_threshold) {
    os << std::left << std::setw(10) << std::setprecision(2) << t << std::setprecision(3) << ap << '\n';
  }
  os << std::left << std::setw(10) << "mAP" << p.map_score << '\n';
  return os.str();
}

namespace {

nlohmann::json summary_json(const EvalSummary& s) {
  nlohmann::json ladder = nlohmann::json::object();
  for (const auto& [t, ap] : s.ap_by_threshold) {
    std::ostringstream key;
    key << std::fixed << std::setprecision(2) << t;
    ladder[key.str()] = ap;
  }
  return {{"ap", ladder},
          {"AP50", s.ap50()},
          {"AP75", s.ap75()},
          {"mAP", s.map_score},
          {"counts",
           {{"gt", s.counts.gt}, {"detections", s.counts.detections}, {"true_positives_50", s.counts.true_positives}}}};
}

}  // namespace

std::string metrics_json(const EvalResult& result) {
  nlohmann::json j = {{"pooled", summary_json(result.pooled)}, {"per_image", summary_json(result.per_image)}};
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [g, s] : result.by_group) groups[g] = summary_json(s);
  j["groups"] = groups;
  return j.dump(2);
}

}  // namespace cks
