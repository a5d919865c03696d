#include "cks/rle.hpp"

#include <opencv2/imgproc.hpp>

#include "cks/error.hpp"

namespace cks::rle {

cv::Mat decode(const Rle& rle) {
  const std::size_t total = static_cast<std::size_t>(rle.height) * rle.width;
  cv::Mat mask = cv::Mat::zeros(rle.height, rle.width, CV_8UC1);
  std::size_t pos = 0;
  bool value = false;
  for (std::uint32_t run : rle.counts) {
    if (pos + run > total) {
      throw ParseError("RLE counts exceed mask size " + std::to_string(rle.height) + "x" +
                       std::to_string(rle.width));
    }
    if (value) {
      for (std::size_t k = pos; k < pos + run; ++k) {
        const int col = static_cast<int>(k / rle.height);
        const int row = static_cast<int>(k % rle.height);
        mask.at<std::uint8_t>(row, col) = 1;
      }
    }
    pos += run;
    value = !value;
  }
  if (pos != total) {
    throw ParseError("RLE counts sum to " + std::to_string(pos) + ", expected " + std::to_string(total));
  }
  return mask;
}

Rle encode(const cv::Mat& mask) {
  CV_Assert(mask.type() == CV_8UC1);
  Rle out{mask.rows, mask.cols, {}};
  bool value = false;
  std::uint32_t run = 0;
  for (int col = 0; col < mask.cols; ++col) {
    for (int row = 0; row < mask.rows; ++row) {
      const bool v = mask.at<std::uint8_t>(row, col) != 0;
      if (v != value) {
        out.counts.push_back(run);
        run = 0;
        value = v;
      }
      ++run;
    }
  }
  out.counts.push_back(run);
  return out;
}

std::string compress_counts(const std::vector<std::uint32_t>& counts) {
  std::string s;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    long long x = counts[i];
    if (i > 2) x -= static_cast<long long>(counts[i - 2]);
    bool more = true;
    while (more) {
      long long c = x & 0x1f;
      x >>= 5;
      more = (c & 0x10) ? x != -1 : x != 0;
      if (more) c |= 0x20;
      s.push_back(static_cast<char>(c + 48));
    }
  }
  return s;
}

std::vector<std::uint32_t> decompress_counts(std::string_view text) {
  std::vector<long long> counts;
  std::size_t p = 0;
  while (p < text.size()) {
    long long x = 0;
    int k = 0;
    bool more = true;
    while (more) {
      if (p >= text.size()) throw ParseError("truncated compressed RLE string");
      const long long c = static_cast<long long>(text[p]) - 48;
      if (c < 0 || c > 63) throw ParseError("invalid character in compressed RLE string");
      x |= (c & 0x1f) << (5 * k);
      more = (c & 0x20) != 0;
      ++p;
      ++k;
      if (!more && (c & 0x10)) x |= -1LL << (5 * k);
    }
    if (counts.size() > 2) x += counts[counts.size() - 2];
    if (x < 0) throw ParseError("negative run in compressed RLE string");
    counts.push_back(x);
  }
  return {counts.begin(), counts.end()};
}

cv::Mat rasterize_polygons(const std::vector<std::vector<double>>& polygons, int height, int width) {
  cv::Mat mask = cv::Mat::zeros(height, width, CV_8UC1);
  std::vector<std::vector<cv::Point>> contours;
  for (const auto& poly : polygons) {
    if (poly.size() < 6 || poly.size() % 2 != 0) {
      throw ParseError("polygon needs an even number (>= 6) of coordinates, got " + std::to_string(poly.size()));
    }
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < poly.size(); i += 2) {
      pts.emplace_back(static_cast<int>(std::lround(poly[i])), static_cast<int>(std::lround(poly[i + 1])));
    }
    contours.push_back(std::move(pts));
  }
  cv::fillPoly(mask, contours, cv::Scalar(1));
  return mask;
}

}  // namespace cks::rle
