#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "casdiff/tensor.hpp"

namespace casdiff {

/// Bilinear resize of the trailing (H,W) axes with half-pixel centers.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& src, int out_h, int out_w) {
  if (src.rank() < 2) throw InvalidArgument("resize_bilinear: need at least 2 axes");
  const int h = src.dim(-2), w = src.dim(-1);
  std::vector<int> shape = src.shape();
  shape[shape.size() - 2] = out_h;
  shape[shape.size() - 1] = out_w;
  Tensor<T> out(shape);
  const std::size_t planes = src.size() / (static_cast<std::size_t>(h) * static_cast<std::size_t>(w));
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* in = src.data() + p * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    T* dst = out.data() + p * static_cast<std::size_t>(out_h) * static_cast<std::size_t>(out_w);
    for (int y = 0; y < out_h; ++y) {
      const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
      const int y0 = std::min(static_cast<int>(fy), h - 1), y1 = std::min(y0 + 1, h - 1);
      const double wy = fy - y0;
      for (int x = 0; x < out_w; ++x) {
        const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
        const int x0 = std::min(static_cast<int>(fx), w - 1), x1 = std::min(x0 + 1, w - 1);
        const double wx = fx - x0;
        const double top = in[y0 * w + x0] * (1 - wx) + in[y0 * w + x1] * wx;
        const double bot = in[y1 * w + x0] * (1 - wx) + in[y1 * w + x1] * wx;
        dst[y * out_w + x] = static_cast<T>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

/// Block-mean downsample of the trailing (H,W) axes by an integer factor.
template <typename T>
Tensor<T> downsample_area(const Tensor<T>& src, int factor) {
  const int h = src.dim(-2), w = src.dim(-1);
  if (factor < 1 || h % factor != 0 || w % factor != 0)
    throw InvalidArgument("downsample_area: size not divisible by factor");
  const int oh = h / factor, ow = w / factor;
  std::vector<int> shape = src.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  Tensor<T> out(shape);
  const std::size_t planes = src.size() / (static_cast<std::size_t>(h) * static_cast<std::size_t>(w));
  const double inv = 1.0 / (factor * factor);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* in = src.data() + p * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    T* dst = out.data() + p * static_cast<std::size_t>(oh) * static_cast<std::size_t>(ow);
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        double acc = 0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) acc += in[(y * factor + dy) * w + x * factor + dx];
        dst[y * ow + x] = static_cast<T>(acc * inv);
      }
    }
  }
  return out;
}

/// Peak signal-to-noise ratio for images in [-1,1] (peak-to-peak range 2).
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "psnr");
  double mse = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(4.0 / mse);
}

}  // namespace casdiff
