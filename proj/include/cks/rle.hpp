#pragma once

// COCO run-length encoding. Runs alternate background/foreground starting
// with background, over the mask in column-major (Fortran) order.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>

namespace cks::rle {

struct Rle {
  int height = 0;
  int width = 0;
  std::vector<std::uint32_t> counts;
};

cv::Mat decode(const Rle& rle);
Rle encode(const cv::Mat& mask);

/// COCO's compressed string form of `counts` (LEB128-like, 6 bits per char,
/// delta-coded from the third run on).
std::string compress_counts(const std::vector<std::uint32_t>& counts);
std::vector<std::uint32_t> decompress_counts(std::string_view text);

/// Rasterizes COCO polygons (flat x0,y0,x1,y1,... lists) into a 0/1 mask.
cv::Mat rasterize_polygons(const std::vector<std::vector<double>>& polygons, int height, int width);

}  // namespace cks::rle
