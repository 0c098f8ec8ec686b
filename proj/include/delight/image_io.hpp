#pragma once

/**
 * @file image_io.hpp
 * @brief PNG/JPEG decode and encode. Files are 8-bit; in memory everything is
 *        real-valued H×W×3 in [0,1].
 */

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "delight/errors.hpp"
#include "delight/imaging.hpp"
#include "delight/tensor.hpp"

namespace delight::io {

inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

/// Decode to RGB reals in [0,1]. Returns nullopt for unreadable/corrupt files
/// so callers can build rejects reports instead of aborting.
template <class T = float>
std::optional<img::Image<T>> load_image(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) return std::nullopt;
  const int h = bgr.rows, w = bgr.cols;
  img::Image<T> out({h, w, 3});
  for (int r = 0; r < h; ++r) {
    const uchar* row = bgr.ptr<uchar>(r);
    for (int c = 0; c < w; ++c) {
      out.at3(r, c, 0) = static_cast<T>(row[c * 3 + 2]) / T(255);  // R
      out.at3(r, c, 1) = static_cast<T>(row[c * 3 + 1]) / T(255);  // G
      out.at3(r, c, 2) = static_cast<T>(row[c * 3 + 0]) / T(255);  // B
    }
  }
  return out;
}

/// Quantize [0,1] to 8-bit with round-half-even and write a PNG.
template <class T>
void save_png(const std::string& path, const img::Image<T>& image) {
  img::check_image(image, "save_png");
  const int h = static_cast<int>(image.shape()[0]), w = static_cast<int>(image.shape()[1]);
  cv::Mat bgr(h, w, CV_8UC3);
  for (int r = 0; r < h; ++r) {
    uchar* row = bgr.ptr<uchar>(r);
    for (int c = 0; c < w; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        const double v = std::clamp(static_cast<double>(image.at3(r, c, ch)), 0.0, 1.0);
        // nearbyint under the default FE_TONEAREST mode rounds half to even
        row[c * 3 + (2 - ch)] = static_cast<uchar>(std::nearbyint(v * 255.0));
      }
  }
  if (!cv::imwrite(path, bgr)) throw DataError("failed to write image: " + path);
}

/// Tile same-sized panels into a grid, `cols` per row (for previews).
template <class T>
img::Image<T> compose_panels(const std::vector<img::Image<T>>& panels, int64_t cols) {
  if (panels.empty() || cols < 1) throw std::invalid_argument("compose_panels: bad arguments");
  const auto& s = panels[0].shape();
  for (const auto& p : panels)
    if (p.shape() != s) throw std::invalid_argument("compose_panels: mixed panel sizes");
  const int64_t rows = (static_cast<int64_t>(panels.size()) + cols - 1) / cols;
  const int64_t h = s[0], w = s[1];
  img::Image<T> out({rows * h, cols * w, 3});
  for (size_t i = 0; i < panels.size(); ++i) {
    const int64_t r0 = (static_cast<int64_t>(i) / cols) * h;
    const int64_t c0 = (static_cast<int64_t>(i) % cols) * w;
    for (int64_t r = 0; r < h; ++r)
      std::copy_n(panels[i].data() + r * w * 3, w * 3, out.data() + ((r0 + r) * cols * w + c0) * 3);
  }
  return out;
}

/// Expand a GrayMap to a 3-channel image for visualization.
template <class T>
img::Image<T> gray_to_rgb(const img::GrayMap<T>& g) {
  if (g.rank() != 2) throw std::invalid_argument("gray_to_rgb: H×W expected");
  img::Image<T> out({g.shape()[0], g.shape()[1], 3});
  for (int64_t i = 0; i < g.numel(); ++i)
    out[i * 3] = out[i * 3 + 1] = out[i * 3 + 2] = g[i];
  return out;
}

}  // namespace delight::io
