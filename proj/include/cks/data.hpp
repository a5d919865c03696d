#pragma once

// Dataset ingestion, point-label derivation, resampling, augmentation and
// synthetic fixtures.
//
// Coordinate convention used throughout the library: points are (y, x) in
// pixels, origin at the top-left, pixel centers at integer coordinates.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>

namespace cks {

struct Point {
  double y = 0.0;
  double x = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

/// One training/evaluation image.
///
/// `image` is CV_32FC(C) with values in [0,1]. Masks are CV_8UC1 holding 0/1.
/// `nuclei`, when present, is CV_32FC1 of the same size. `group` names the
/// cell group used for per-group prior radii.
struct ImageSample {
  std::string id;
  cv::Mat image;
  std::vector<Point> points;
  std::vector<cv::Mat> gt_masks;
  std::optional<cv::Mat> nuclei;
  std::string group;

  int height() const { return image.rows; }
  int width() const { return image.cols; }
  int channels() const { return image.channels(); }
};

/// Throws InvalidArgument describing the first violated sample invariant.
void validate_sample(const ImageSample& sample);

struct AugmentationConfig {
  bool rotate = true;    // random multiple of 90 degrees
  bool flip = true;      // random horizontal / vertical flips
  std::pair<double, double> resize_range{0.85, 1.15};
  double brightness_delta = 0.1;
  std::pair<double, double> contrast_range{0.8, 1.2};
  /// Arbitrary-angle rotation in degrees, uniform in [-max, max]; 0 disables.
  double arbitrary_rotation_deg = 0.0;
  std::uint64_t seed = 0;

  /// Everything off: augment() returns its input unchanged.
  static AugmentationConfig identity();
};

void validate(const AugmentationConfig& config);

// --- ingestion ------------------------------------------------------------

/// Loads a COCO-style instance annotation file. Image paths are resolved
/// relative to `image_root` (defaults to the annotation file's directory).
/// Polygon and RLE (list or compressed string) segmentations are supported.
std::vector<ImageSample> load_coco_dataset(const std::filesystem::path& annotation_file,
                                           std::optional<std::filesystem::path> image_root = {});

/// Reads a single image file and normalizes it to [0,1] float.
/// 8/16-bit inputs are divided by the type maximum; float inputs are min-max scaled.
cv::Mat load_image(const std::filesystem::path& path);

/// Point table: rows of (image_id, y, x). CSV (header `image_id,y,x`) or JSON
/// (array of {"image_id","y","x"}) chosen by file extension.
using PointTable = std::map<std::string, std::vector<Point>>;
PointTable read_point_table(const std::filesystem::path& path);
void write_point_table(const std::filesystem::path& path, const PointTable& table);

/// Replaces each sample's points with the table entry for its id (missing → empty).
void attach_points(std::vector<ImageSample>& samples, const PointTable& table);

// --- point labels ----------------------------------------------------------

/// Mean foreground coordinate of each mask, in (y, x).
std::vector<Point> centroids_from_masks(const std::vector<cv::Mat>& gt_masks);

struct BlobDetectorParams {
  double min_sigma = 3.0;
  double max_sigma = 8.0;
  int num_sigma = 6;
  double threshold = 0.05;
};

/// Scale-normalized Laplacian-of-Gaussian blob detection on a nuclei image.
/// Bright blobs only. Returned points are at least min_sigma apart.
std::vector<Point> detect_nuclei_points(const cv::Mat& nuclei, const BlobDetectorParams& params);

// --- geometric/photometric transforms ---------------------------------------

/// Resamples by `factor`: output dims round(H*f) x round(W*f). Image is
/// bilinear, masks nearest-neighbor, points are multiplied by the factor.
/// Masks that become empty are dropped.
ImageSample prescale(const ImageSample& sample, double factor);

/// Looks up `sample.group` in `factors` (missing → 1.0) and prescales.
ImageSample prescale_by_group(const ImageSample& sample, const std::map<std::string, double>& factors);

/// Random geometric + photometric augmentation. Deterministic given `rng`.
ImageSample augment(const ImageSample& sample, const AugmentationConfig& config, std::mt19937_64& rng);

/// Mirror helpers, exposed for tests and CLI use.
ImageSample flip_horizontal(const ImageSample& sample);
ImageSample flip_vertical(const ImageSample& sample);
/// Rotate clockwise by quarter_turns * 90 degrees.
ImageSample rotate90(const ImageSample& sample, int quarter_turns);

// --- synthetic fixtures -----------------------------------------------------

struct SyntheticParams {
  int n_images = 8;
  int image_size = 64;
  int blobs_min = 5;
  int blobs_max = 10;
  double radius_min = 4.0;
  double radius_max = 7.0;
  std::uint64_t seed = 0;
  double noise_sigma = 0.03;
  std::string group = "synthetic";
};

struct SyntheticShortfall {
  int image_index;
  int requested;
  int placed;
};

struct SyntheticSet {
  std::vector<ImageSample> samples;
  /// Generator centers per sample (equal to `points` at creation).
  std::vector<std::vector<Point>> centers;
  std::vector<SyntheticShortfall> shortfalls;
};

/// Non-overlapping soft-edged elliptical blobs on a noisy background. Each
/// sample carries gt_masks, points (blob centers) and a nuclei channel with a
/// small spot at every center.
SyntheticSet generate_synthetic(const SyntheticParams& params);

// --- on-disk datasets --------------------------------------------------------

/// Writes images, per-instance masks (16-bit label PNG), nuclei PNGs, points
/// CSV, a COCO annotation file (`annotations.json`) and `manifest.json`.
void write_dataset(const std::filesystem::path& dir, const std::vector<ImageSample>& samples);

/// Reads a dataset previously written by write_dataset (via its COCO file and
/// points table).
std::vector<ImageSample> read_dataset(const std::filesystem::path& dir);

/// Converts a CV_8U binary mask to a 16-bit label map (instance k → k+1).
cv::Mat masks_to_label_map(const std::vector<cv::Mat>& masks, int height, int width);
std::vector<cv::Mat> label_map_to_masks(const cv::Mat& label_map);

}  // namespace cks
