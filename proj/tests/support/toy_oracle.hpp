#pragma once

#include <algorithm>

#include "casdiff/tensor.hpp"

namespace casdiff::testing {

struct ToyReading {
  int color = -1;  // 0 red, 1 green, 2 blue
  int shape = -1;  // 0 square, 1 circle, 2 triangle
  int pixels = 0;
};

/// Rule-based reading of a toy image (3,H,W) in [-1,1]. Foreground pixels
/// have some channel above the midpoint; color is the channel with the
/// largest foreground sum; shape comes from how much of the bounding box
/// the foreground fills (square ~1, circle ~pi/4, triangle ~1/2).
inline ToyReading read_toy_image(const Tensor<float>& img) {
  const int h = img.dim(1), w = img.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  ToyReading r;
  double sums[3] = {0, 0, 0};
  int x0 = w, x1 = -1, y0 = h, y1 = -1;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const float m = std::max({img[i], img[plane + i], img[2 * plane + i]});
      if (m <= 0.0f) continue;
      ++r.pixels;
      for (int c = 0; c < 3; ++c) sums[c] += img[c * plane + i] + 1.0;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (r.pixels == 0) return r;
  r.color = static_cast<int>(std::max_element(sums, sums + 3) - sums);
  const double fill = r.pixels / static_cast<double>((x1 - x0 + 1) * (y1 - y0 + 1));
  r.shape = fill >= 0.9 ? 0 : fill >= 0.62 ? 1 : 2;
  return r;
}

}  // namespace casdiff::testing
