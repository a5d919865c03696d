#include "cks/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "cks/error.hpp"
#include "cks/rle.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cks {

namespace {

std::string id_string(const json& value) {
  if (value.is_string()) return value.get<std::string>();
  if (value.is_number_integer()) return std::to_string(value.get<long long>());
  throw ParseError("image id must be a string or integer, got " + value.dump());
}

std::string group_from_filename(const std::string& file_name) {
  const std::string stem = fs::path(file_name).stem().string();
  const auto underscore = stem.find('_');
  return underscore == std::string::npos ? std::string{} : stem.substr(0, underscore);
}

cv::Mat decode_segmentation(const json& seg, int height, int width) {
  if (seg.is_array()) {
    std::vector<std::vector<double>> polygons;
    for (const auto& poly : seg) polygons.push_back(poly.get<std::vector<double>>());
    return rle::rasterize_polygons(polygons, height, width);
  }
  if (seg.is_object()) {
    rle::Rle r;
    const auto& size = seg.at("size");
    r.height = size.at(0).get<int>();
    r.width = size.at(1).get<int>();
    if (r.height != height || r.width != width) {
      throw ParseError("RLE size " + size.dump() + " does not match image " + std::to_string(height) + "x" +
                       std::to_string(width));
    }
    const auto& counts = seg.at("counts");
    if (counts.is_string()) {
      r.counts = rle::decompress_counts(counts.get<std::string>());
    } else {
      r.counts = counts.get<std::vector<std::uint32_t>>();
    }
    return rle::decode(r);
  }
  throw ParseError("segmentation must be a polygon list or an RLE object");
}

bool masks_equal(const cv::Mat& a, const cv::Mat& b) {
  return a.size() == b.size() && cv::countNonZero(a != b) == 0;
}

void clamp_point(Point& p, int height, int width) {
  p.y = std::clamp(p.y, 0.0, static_cast<double>(height - 1));
  p.x = std::clamp(p.x, 0.0, static_cast<double>(width - 1));
}

bool in_frame(const Point& p, int height, int width) {
  return p.y >= 0.0 && p.x >= 0.0 && p.y < height && p.x < width;
}

void drop_empty_masks(std::vector<cv::Mat>& masks) {
  std::erase_if(masks, [](const cv::Mat& m) { return cv::countNonZero(m) == 0; });
}

cv::Mat to_u16(const cv::Mat& unit_float) {
  cv::Mat out;
  unit_float.convertTo(out, CV_16U, 65535.0);
  return out;
}

void write_png(const fs::path& path, const cv::Mat& mat) {
  if (!cv::imwrite(path.string(), mat)) throw LoadError("failed to write " + path.string());
}

}  // namespace

void validate_sample(const ImageSample& s) {
  if (s.image.empty() || s.image.depth() != CV_32F) {
    throw InvalidArgument("sample '" + s.id + "': image must be a non-empty float array");
  }
  if (!cv::checkRange(s.image)) throw InvalidArgument("sample '" + s.id + "': image has non-finite values");
  for (std::size_t i = 0; i < s.points.size(); ++i) {
    if (!in_frame(s.points[i], s.height(), s.width())) {
      throw InvalidArgument("sample '" + s.id + "': point " + std::to_string(i) + " out of bounds");
    }
  }
  for (std::size_t i = 0; i < s.gt_masks.size(); ++i) {
    const cv::Mat& m = s.gt_masks[i];
    if (m.rows != s.height() || m.cols != s.width() || m.type() != CV_8UC1) {
      throw InvalidArgument("sample '" + s.id + "': mask " + std::to_string(i) + " has wrong shape/type");
    }
    if (cv::countNonZero(m) == 0) {
      throw InvalidArgument("sample '" + s.id + "': mask " + std::to_string(i) + " is empty");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (masks_equal(m, s.gt_masks[j])) {
        throw InvalidArgument("sample '" + s.id + "': masks " + std::to_string(j) + " and " + std::to_string(i) +
                              " are identical");
      }
    }
  }
  if (s.nuclei && (s.nuclei->rows != s.height() || s.nuclei->cols != s.width())) {
    throw InvalidArgument("sample '" + s.id + "': nuclei channel shape mismatch");
  }
}

AugmentationConfig AugmentationConfig::identity() {
  AugmentationConfig c;
  c.rotate = false;
  c.flip = false;
  c.resize_range = {1.0, 1.0};
  c.brightness_delta = 0.0;
  c.contrast_range = {1.0, 1.0};
  c.arbitrary_rotation_deg = 0.0;
  return c;
}

void validate(const AugmentationConfig& c) {
  if (!(c.resize_range.first > 0.0 && c.resize_range.first <= c.resize_range.second)) {
    throw ConfigError("augmentation resize_range must satisfy 0 < low <= high");
  }
  if (!(c.contrast_range.first > 0.0 && c.contrast_range.first <= c.contrast_range.second)) {
    throw ConfigError("augmentation contrast_range must satisfy 0 < low <= high");
  }
  if (c.brightness_delta < 0.0) throw ConfigError("augmentation brightness_delta must be >= 0");
}

// --- ingestion ------------------------------------------------------------------

cv::Mat load_image(const fs::path& path) {
  if (!fs::exists(path)) throw LoadError("image not found: " + path.string());
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_ANYCOLOR);
  if (raw.empty()) throw LoadError("could not decode image: " + path.string());
  cv::Mat out;
  switch (raw.depth()) {
    case CV_8U:
      raw.convertTo(out, CV_32F, 1.0 / 255.0);
      break;
    case CV_16U:
      raw.convertTo(out, CV_32F, 1.0 / 65535.0);
      break;
    default: {
      cv::Mat f;
      raw.convertTo(f, CV_32F);
      double lo = 0.0, hi = 0.0;
      cv::minMaxLoc(f.reshape(1), &lo, &hi);
      const double span = hi > lo ? hi - lo : 1.0;
      f.convertTo(out, CV_32F, 1.0 / span, -lo / span);
    }
  }
  return out;
}

std::vector<ImageSample> load_coco_dataset(const fs::path& annotation_file, std::optional<fs::path> image_root) {
  if (!fs::exists(annotation_file)) throw LoadError("annotation file not found: " + annotation_file.string());
  std::ifstream in(annotation_file);
  if (!in) throw LoadError("cannot open annotation file: " + annotation_file.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(annotation_file.string() + ": " + e.what());
  }
  const fs::path root = image_root.value_or(annotation_file.parent_path());

  std::vector<ImageSample> samples;
  std::map<std::string, std::size_t> index_of;
  if (!doc.contains("images") || !doc["images"].is_array()) {
    throw ParseError(annotation_file.string() + ": missing 'images' array");
  }
  for (std::size_t i = 0; i < doc["images"].size(); ++i) {
    const json& rec = doc["images"][i];
    ImageSample s;
    std::string file_name;
    int height = 0, width = 0;
    try {
      s.id = id_string(rec.at("id"));
      file_name = rec.at("file_name").get<std::string>();
      height = rec.at("height").get<int>();
      width = rec.at("width").get<int>();
      if (rec.contains("group")) {
        s.group = rec["group"].get<std::string>();
      } else if (rec.contains("cell_line")) {
        s.group = rec["cell_line"].get<std::string>();
      } else {
        s.group = group_from_filename(file_name);
      }
    } catch (const json::exception& e) {
      throw ParseError("image record " + std::to_string(i) + ": " + e.what());
    }
    s.image = load_image(root / file_name);
    if (s.image.rows != height || s.image.cols != width) {
      throw ParseError("image record " + std::to_string(i) + " ('" + s.id + "'): declared size " +
                       std::to_string(height) + "x" + std::to_string(width) + " but file is " +
                       std::to_string(s.image.rows) + "x" + std::to_string(s.image.cols));
    }
    index_of[s.id] = samples.size();
    samples.push_back(std::move(s));
  }

  const json annotations = doc.value("annotations", json::array());
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    const json& ann = annotations[i];
    const std::string where =
        "annotation " + std::to_string(i) + (ann.contains("id") ? " (id " + ann["id"].dump() + ")" : std::string{});
    try {
      const std::string image_id = id_string(ann.at("image_id"));
      const auto it = index_of.find(image_id);
      if (it == index_of.end()) throw ParseError(where + ": unknown image_id " + image_id);
      ImageSample& s = samples[it->second];
      cv::Mat mask = decode_segmentation(ann.at("segmentation"), s.height(), s.width());
      if (cv::countNonZero(mask) > 0) s.gt_masks.push_back(std::move(mask));
    } catch (const ParseError& e) {
      const std::string what = e.what();
      throw ParseError(what.rfind(where, 0) == 0 ? what : where + ": " + what);
    } catch (const json::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  return samples;
}

PointTable read_point_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open point table: " + path.string());
  PointTable table;
  if (path.extension() == ".json") {
    json doc;
    try {
      doc = json::parse(in);
      for (const auto& row : doc) {
        table[id_string(row.at("image_id"))].push_back({row.at("y").get<double>(), row.at("x").get<double>()});
      }
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
    return table;
  }
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("image_id", 0) == 0) continue;
    std::stringstream ss(line);
    std::string id, ys, xs;
    if (!std::getline(ss, id, ',') || !std::getline(ss, ys, ',') || !std::getline(ss, xs, ',')) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected image_id,y,x");
    }
    try {
      table[id].push_back({std::stod(ys), std::stod(xs)});
    } catch (const std::exception&) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad coordinate");
    }
  }
  return table;
}

void write_point_table(const fs::path& path, const PointTable& table) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write point table: " + path.string());
  if (path.extension() == ".json") {
    json rows = json::array();
    for (const auto& [id, pts] : table) {
      for (const auto& p : pts) rows.push_back({{"image_id", id}, {"y", p.y}, {"x", p.x}});
    }
    out << rows.dump(2) << '\n';
    return;
  }
  out << "image_id,y,x\n";
  out.precision(17);
  for (const auto& [id, pts] : table) {
    for (const auto& p : pts) out << id << ',' << p.y << ',' << p.x << '\n';
  }
}

void attach_points(std::vector<ImageSample>& samples, const PointTable& table) {
  for (auto& s : samples) {
    const auto it = table.find(s.id);
    s.points = it == table.end() ? std::vector<Point>{} : it->second;
  }
}

// --- point labels -----------------------------------------------------------------

std::vector<Point> centroids_from_masks(const std::vector<cv::Mat>& gt_masks) {
  std::vector<Point> out;
  out.reserve(gt_masks.size());
  for (std::size_t i = 0; i < gt_masks.size(); ++i) {
    const cv::Mat& m = gt_masks[i];
    CV_Assert(m.type() == CV_8UC1);
    double sy = 0.0, sx = 0.0;
    long long count = 0;
    for (int r = 0; r < m.rows; ++r) {
      const auto* row = m.ptr<std::uint8_t>(r);
      for (int c = 0; c < m.cols; ++c) {
        if (row[c]) {
          sy += r;
          sx += c;
          ++count;
        }
      }
    }
    if (count == 0) throw InvalidArgument("mask " + std::to_string(i) + " is empty");
    out.push_back({sy / count, sx / count});
  }
  return out;
}

std::vector<Point> detect_nuclei_points(const cv::Mat& nuclei, const BlobDetectorParams& p) {
  if (!(p.min_sigma > 0.0 && p.min_sigma <= p.max_sigma) || p.num_sigma < 1) {
    throw InvalidArgument("blob detector needs 0 < min_sigma <= max_sigma and num_sigma >= 1");
  }
  cv::Mat img;
  nuclei.convertTo(img, CV_32F);
  if (img.channels() != 1) throw InvalidArgument("nuclei image must be single-channel");
  if (!cv::checkRange(img)) throw InvalidArgument("nuclei image has non-finite values");

  std::vector<double> sigmas;
  for (int k = 0; k < p.num_sigma; ++k) {
    sigmas.push_back(p.num_sigma == 1 ? p.min_sigma
                                      : p.min_sigma + (p.max_sigma - p.min_sigma) * k / (p.num_sigma - 1));
  }
  std::vector<cv::Mat> responses;
  for (double sigma : sigmas) {
    const int half = static_cast<int>(std::ceil(4.0 * sigma));
    cv::Mat blurred, lap;
    cv::GaussianBlur(img, blurred, cv::Size(2 * half + 1, 2 * half + 1), sigma, sigma, cv::BORDER_REFLECT_101);
    cv::Laplacian(blurred, lap, CV_32F, 1, 1.0, 0.0, cv::BORDER_REFLECT_101);
    responses.push_back(lap * (-sigma * sigma));
  }

  struct Candidate {
    float response;
    int y, x;
  };
  std::vector<Candidate> candidates;
  const int n_scales = static_cast<int>(responses.size());
  for (int k = 0; k < n_scales; ++k) {
    for (int y = 0; y < img.rows; ++y) {
      for (int x = 0; x < img.cols; ++x) {
        const float v = responses[k].at<float>(y, x);
        if (v <= p.threshold) continue;
        bool is_max = true;
        for (int dk = -1; dk <= 1 && is_max; ++dk) {
          const int kk = k + dk;
          if (kk < 0 || kk >= n_scales) continue;
          for (int dy = -1; dy <= 1 && is_max; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if ((dk == 0 && dy == 0 && dx == 0) || yy < 0 || xx < 0 || yy >= img.rows || xx >= img.cols) continue;
              if (responses[kk].at<float>(yy, xx) > v) {
                is_max = false;
                break;
              }
            }
          }
        }
        if (is_max) candidates.push_back({v, y, x});
      }
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.response != b.response) return a.response > b.response;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  std::vector<Point> kept;
  const double min_dist2 = p.min_sigma * p.min_sigma;
  for (const auto& c : candidates) {
    const bool clear = std::none_of(kept.begin(), kept.end(), [&](const Point& q) {
      const double dy = q.y - c.y, dx = q.x - c.x;
      return dy * dy + dx * dx < min_dist2;
    });
    if (clear) kept.push_back({static_cast<double>(c.y), static_cast<double>(c.x)});
  }
  return kept;
}

// --- transforms ------------------------------------------------------------------

ImageSample prescale(const ImageSample& sample, double factor) {
  if (!(factor > 0.0)) throw InvalidArgument("prescale factor must be > 0");
  const int h = static_cast<int>(std::lround(sample.height() * factor));
  const int w = static_cast<int>(std::lround(sample.width() * factor));
  if (h <= 0 || w <= 0) {
    throw InvalidArgument("prescale by " + std::to_string(factor) + " gives an empty image for '" + sample.id + "'");
  }
  ImageSample out;
  out.id = sample.id;
  out.group = sample.group;
  if (h == sample.height() && w == sample.width()) {
    out.image = sample.image.clone();
    for (const auto& m : sample.gt_masks) out.gt_masks.push_back(m.clone());
    if (sample.nuclei) out.nuclei = sample.nuclei->clone();
    out.points = sample.points;
    return out;
  }
  cv::resize(sample.image, out.image, cv::Size(w, h), 0, 0, cv::INTER_LINEAR);
  if (out.image.channels() != sample.image.channels()) out.image = out.image.reshape(sample.image.channels());
  for (const auto& m : sample.gt_masks) {
    cv::Mat r;
    cv::resize(m, r, cv::Size(w, h), 0, 0, cv::INTER_NEAREST);
    out.gt_masks.push_back(std::move(r));
  }
  drop_empty_masks(out.gt_masks);
  if (sample.nuclei) {
    cv::Mat r;
    cv::resize(*sample.nuclei, r, cv::Size(w, h), 0, 0, cv::INTER_LINEAR);
    out.nuclei = std::move(r);
  }
  for (const auto& p : sample.points) {
    Point q{p.y * factor, p.x * factor};
    clamp_point(q, h, w);
    out.points.push_back(q);
  }
  return out;
}

ImageSample prescale_by_group(const ImageSample& sample, const std::map<std::string, double>& factors) {
  const auto it = factors.find(sample.group);
  return prescale(sample, it == factors.end() ? 1.0 : it->second);
}

ImageSample flip_horizontal(const ImageSample& s) {
  ImageSample out;
  out.id = s.id;
  out.group = s.group;
  cv::flip(s.image, out.image, 1);
  for (const auto& m : s.gt_masks) {
    cv::Mat f;
    cv::flip(m, f, 1);
    out.gt_masks.push_back(std::move(f));
  }
  if (s.nuclei) {
    cv::Mat f;
    cv::flip(*s.nuclei, f, 1);
    out.nuclei = std::move(f);
  }
  out.points = s.points;
  for (auto& p : out.points) p.x = s.width() - 1 - p.x;
  return out;
}

ImageSample flip_vertical(const ImageSample& s) {
  ImageSample out;
  out.id = s.id;
  out.group = s.group;
  cv::flip(s.image, out.image, 0);
  for (const auto& m : s.gt_masks) {
    cv::Mat f;
    cv::flip(m, f, 0);
    out.gt_masks.push_back(std::move(f));
  }
  if (s.nuclei) {
    cv::Mat f;
    cv::flip(*s.nuclei, f, 0);
    out.nuclei = std::move(f);
  }
  out.points = s.points;
  for (auto& p : out.points) p.y = s.height() - 1 - p.y;
  return out;
}

ImageSample rotate90(const ImageSample& s, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return s;
  const int code = k == 1 ? cv::ROTATE_90_CLOCKWISE : k == 2 ? cv::ROTATE_180 : cv::ROTATE_90_COUNTERCLOCKWISE;
  ImageSample out;
  out.id = s.id;
  out.group = s.group;
  cv::rotate(s.image, out.image, code);
  for (const auto& m : s.gt_masks) {
    cv::Mat r;
    cv::rotate(m, r, code);
    out.gt_masks.push_back(std::move(r));
  }
  if (s.nuclei) {
    cv::Mat r;
    cv::rotate(*s.nuclei, r, code);
    out.nuclei = std::move(r);
  }
  const double h = s.height(), w = s.width();
  for (const auto& p : s.points) {
    switch (k) {
      case 1:  // clockwise: (y, x) -> (x, H-1-y)
        out.points.push_back({p.x, h - 1 - p.y});
        break;
      case 2:
        out.points.push_back({h - 1 - p.y, w - 1 - p.x});
        break;
      default:  // counter-clockwise: (y, x) -> (W-1-x, y)
        out.points.push_back({w - 1 - p.x, p.y});
    }
  }
  return out;
}

namespace {

ImageSample rotate_arbitrary(const ImageSample& s, double degrees) {
  const cv::Point2f center((s.width() - 1) / 2.0f, (s.height() - 1) / 2.0f);
  // OpenCV angles are counter-clockwise in (x, y).
  const cv::Mat rot = cv::getRotationMatrix2D(center, degrees, 1.0);
  ImageSample out;
  out.id = s.id;
  out.group = s.group;
  const cv::Size size(s.width(), s.height());
  cv::warpAffine(s.image, out.image, rot, size, cv::INTER_LINEAR, cv::BORDER_CONSTANT, cv::Scalar::all(0));
  if (out.image.channels() != s.image.channels()) out.image = out.image.reshape(s.image.channels());
  for (const auto& m : s.gt_masks) {
    cv::Mat r;
    cv::warpAffine(m, r, rot, size, cv::INTER_NEAREST, cv::BORDER_CONSTANT, cv::Scalar(0));
    out.gt_masks.push_back(std::move(r));
  }
  drop_empty_masks(out.gt_masks);
  if (s.nuclei) {
    cv::Mat r;
    cv::warpAffine(*s.nuclei, r, rot, size, cv::INTER_LINEAR, cv::BORDER_CONSTANT, cv::Scalar(0));
    out.nuclei = std::move(r);
  }
  for (const auto& p : s.points) {
    const double x = rot.at<double>(0, 0) * p.x + rot.at<double>(0, 1) * p.y + rot.at<double>(0, 2);
    const double y = rot.at<double>(1, 0) * p.x + rot.at<double>(1, 1) * p.y + rot.at<double>(1, 2);
    const Point q{y, x};
    if (q.y >= 0.0 && q.x >= 0.0 && q.y <= s.height() - 1 && q.x <= s.width() - 1) out.points.push_back(q);
  }
  return out;
}

}  // namespace

ImageSample augment(const ImageSample& sample, const AugmentationConfig& config, std::mt19937_64& rng) {
  validate(config);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ImageSample out = sample;
  out.image = sample.image.clone();

  if (config.flip) {
    if (unit(rng) < 0.5) out = flip_horizontal(out);
    if (unit(rng) < 0.5) out = flip_vertical(out);
  }
  if (config.rotate) {
    out = rotate90(out, std::uniform_int_distribution<int>(0, 3)(rng));
  }
  if (config.arbitrary_rotation_deg > 0.0) {
    const double a = config.arbitrary_rotation_deg;
    out = rotate_arbitrary(out, std::uniform_real_distribution<double>(-a, a)(rng));
  }
  if (config.resize_range.first != 1.0 || config.resize_range.second != 1.0) {
    const double f =
        std::uniform_real_distribution<double>(config.resize_range.first, config.resize_range.second)(rng);
    out = prescale(out, f);
  }

  const bool brightness = config.brightness_delta > 0.0;
  const bool contrast = config.contrast_range.first != 1.0 || config.contrast_range.second != 1.0;
  if (brightness || contrast) {
    const double b =
        brightness ? std::uniform_real_distribution<double>(-config.brightness_delta, config.brightness_delta)(rng)
                   : 0.0;
    const double c =
        contrast ? std::uniform_real_distribution<double>(config.contrast_range.first, config.contrast_range.second)(rng)
                 : 1.0;
    const cv::Scalar mean = cv::mean(out.image);
    cv::Mat adjusted;
    // (v - mean) * c + mean + b, per channel
    out.image.convertTo(adjusted, CV_32F, c);
    adjusted += mean * (1.0 - c) + cv::Scalar::all(b);
    out.image = adjusted;
  }
  cv::min(out.image, 1.0, out.image);
  cv::max(out.image, 0.0, out.image);
  return out;
}

// --- synthetic -----------------------------------------------------------------------

SyntheticSet generate_synthetic(const SyntheticParams& p) {
  if (p.n_images <= 0 || p.image_size <= 0 || p.blobs_min < 0 || p.blobs_max < p.blobs_min ||
      !(p.radius_min > 0.0) || p.radius_max < p.radius_min) {
    throw InvalidArgument("generate_synthetic: sizes and counts must be positive with min <= max");
  }
  if (2.0 * p.radius_max + 4.0 > p.image_size) {
    throw InvalidArgument("generate_synthetic: blob radius too large for image size");
  }
  constexpr int kMaxAttempts = 200;
  SyntheticSet set;
  const int size = p.image_size;
  for (int index = 0; index < p.n_images; ++index) {
    std::seed_seq seq{static_cast<std::uint64_t>(p.seed), static_cast<std::uint64_t>(index)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, p.noise_sigma);

    const int requested = std::uniform_int_distribution<int>(p.blobs_min, p.blobs_max)(rng);
    cv::Mat occupied = cv::Mat::zeros(size, size, CV_8UC1);
    cv::Mat image(size, size, CV_64FC1, cv::Scalar(0.1));
    cv::Mat nuclei = cv::Mat::zeros(size, size, CV_64FC1);
    ImageSample sample;
    sample.id = "synth_" + std::to_string(index);
    sample.group = p.group;

    for (int b = 0; b < requested; ++b) {
      bool placed = false;
      for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
        const double ry = p.radius_min + (p.radius_max - p.radius_min) * unit(rng);
        const double rx = p.radius_min + (p.radius_max - p.radius_min) * unit(rng);
        const double theta = std::numbers::pi * unit(rng);
        const double reach = std::max(ry, rx) + 1.0;
        const double cy = reach + (size - 1 - 2 * reach) * unit(rng);
        const double cx = reach + (size - 1 - 2 * reach) * unit(rng);
        const double ct = std::cos(theta), st = std::sin(theta);

        cv::Mat rho2(size, size, CV_64FC1);
        cv::Mat mask = cv::Mat::zeros(size, size, CV_8UC1);
        for (int y = 0; y < size; ++y) {
          for (int x = 0; x < size; ++x) {
            const double dy = y - cy, dx = x - cx;
            const double u = ct * dy + st * dx;
            const double v = -st * dy + ct * dx;
            const double r2 = (u / ry) * (u / ry) + (v / rx) * (v / rx);
            rho2.at<double>(y, x) = r2;
            if (r2 <= 1.0) mask.at<std::uint8_t>(y, x) = 1;
          }
        }
        if (cv::countNonZero(mask) == 0) continue;
        cv::Mat grown;
        cv::dilate(mask, grown, cv::getStructuringElement(cv::MORPH_RECT, cv::Size(3, 3)));
        if (cv::countNonZero(grown & occupied) > 0) continue;

        const double amplitude = 0.5 + 0.4 * unit(rng);
        const double nucleus_sigma = 0.35 * std::min(ry, rx);
        for (int y = 0; y < size; ++y) {
          for (int x = 0; x < size; ++x) {
            const double rho = std::sqrt(rho2.at<double>(y, x));
            image.at<double>(y, x) += amplitude / (1.0 + std::exp((rho - 1.0) * 8.0));
            const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
            nuclei.at<double>(y, x) += std::exp(-d2 / (2.0 * nucleus_sigma * nucleus_sigma));
          }
        }
        occupied |= mask;
        sample.gt_masks.push_back(mask);
        sample.points.push_back({cy, cx});
        placed = true;
      }
      if (!placed) break;
    }
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) image.at<double>(y, x) += noise(rng);
    }
    cv::min(image, 1.0, image);
    cv::max(image, 0.0, image);
    cv::min(nuclei, 1.0, nuclei);
    image.convertTo(sample.image, CV_32F);
    cv::Mat nuc32;
    nuclei.convertTo(nuc32, CV_32F);
    sample.nuclei = nuc32;

    const int placed = static_cast<int>(sample.points.size());
    if (placed < requested) set.shortfalls.push_back({index, requested, placed});
    set.centers.push_back(sample.points);
    set.samples.push_back(std::move(sample));
  }
  return set;
}

// --- on-disk datasets ------------------------------------------------------------------

cv::Mat masks_to_label_map(const std::vector<cv::Mat>& masks, int height, int width) {
  if (masks.size() > 65535) throw InvalidArgument("too many instances for a 16-bit label map");
  cv::Mat labels = cv::Mat::zeros(height, width, CV_16UC1);
  for (std::size_t k = 0; k < masks.size(); ++k) {
    if (masks[k].rows != height || masks[k].cols != width) throw ShapeError("mask shape differs from label map");
    labels.setTo(cv::Scalar(static_cast<double>(k + 1)), masks[k]);
  }
  return labels;
}

std::vector<cv::Mat> label_map_to_masks(const cv::Mat& label_map) {
  cv::Mat labels;
  label_map.convertTo(labels, CV_32S);
  std::set<int> ids;
  for (int r = 0; r < labels.rows; ++r) {
    for (int c = 0; c < labels.cols; ++c) {
      const int v = labels.at<int>(r, c);
      if (v != 0) ids.insert(v);
    }
  }
  std::vector<cv::Mat> masks;
  for (int id : ids) {
    cv::Mat m = labels == id;
    masks.push_back(m / 255);
  }
  return masks;
}

void write_dataset(const fs::path& dir, const std::vector<ImageSample>& samples) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  fs::create_directories(dir / "nuclei");
  json coco = {{"images", json::array()}, {"annotations", json::array()},
               {"categories", json::array({{{"id", 1}, {"name", "cell"}}})}};
  json manifest = {{"schema_version", 1}, {"images", json::array()}};
  PointTable points;
  long long ann_id = 1;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ImageSample& s = samples[i];
    const std::string image_rel = "images/" + s.id + ".png";
    const std::string label_rel = "labels/" + s.id + ".png";
    write_png(dir / image_rel, to_u16(s.image));
    write_png(dir / label_rel, masks_to_label_map(s.gt_masks, s.height(), s.width()));
    json entry = {{"id", s.id},          {"image", image_rel},         {"labels", label_rel},
                  {"group", s.group},    {"height", s.height()},       {"width", s.width()},
                  {"n_instances", static_cast<int>(s.gt_masks.size())}, {"n_points", static_cast<int>(s.points.size())}};
    if (s.nuclei) {
      const std::string nuclei_rel = "nuclei/" + s.id + ".png";
      write_png(dir / nuclei_rel, to_u16(*s.nuclei));
      entry["nuclei"] = nuclei_rel;
    }
    manifest["images"].push_back(entry);
    coco["images"].push_back({{"id", s.id},
                              {"file_name", image_rel},
                              {"height", s.height()},
                              {"width", s.width()},
                              {"group", s.group}});
    for (const auto& m : s.gt_masks) {
      const rle::Rle r = rle::encode(m);
      coco["annotations"].push_back({{"id", ann_id++},
                                     {"image_id", s.id},
                                     {"category_id", 1},
                                     {"iscrowd", 0},
                                     {"area", cv::countNonZero(m)},
                                     {"segmentation",
                                      {{"size", {r.height, r.width}}, {"counts", rle::compress_counts(r.counts)}}}});
    }
    points[s.id] = s.points;
  }
  std::ofstream(dir / "annotations.json") << coco.dump() << '\n';
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  write_point_table(dir / "points.csv", points);
}

std::vector<ImageSample> read_dataset(const fs::path& dir) {
  auto samples = load_coco_dataset(dir / "annotations.json", dir);
  if (fs::exists(dir / "points.csv")) attach_points(samples, read_point_table(dir / "points.csv"));
  if (fs::exists(dir / "manifest.json")) {
    std::ifstream in(dir / "manifest.json");
    json manifest;
    try {
      manifest = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ParseError((dir / "manifest.json").string() + ": " + e.what());
    }
    std::map<std::string, std::string> nuclei_paths;
    for (const auto& entry : manifest.value("images", json::array())) {
      if (entry.contains("nuclei")) nuclei_paths[entry.at("id").get<std::string>()] = entry["nuclei"];
    }
    for (auto& s : samples) {
      const auto it = nuclei_paths.find(s.id);
      if (it != nuclei_paths.end()) s.nuclei = load_image(dir / it->second);
    }
  }
  return samples;
}

}  // namespace cks
