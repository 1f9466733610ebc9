#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "casdiff/tensor.hpp"

namespace casdiff {

/// 8-bit RGB raster, row-major, interleaved.
struct Image8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;
};

using PngText = std::vector<std::pair<std::string, std::string>>;

std::string encode_png(const Image8& image, const PngText& text = {});
/// Any PNG color type is converted to 8-bit RGB. Throws IoError.
Image8 decode_png(const std::string& bytes, const std::string& source = "png");

void write_png(const std::filesystem::path& path, const Image8& image, const PngText& text = {});
Image8 read_png(const std::filesystem::path& path);

/// (3,H,W) in [-1,1]; byte v maps to v / 127.5 - 1.
Tensor<float> image_to_tensor(const Image8& image);
/// round((v + 1) * 127.5) clamped to [0, 255].
Image8 tensor_to_image(const Tensor<float>& t);

}  // namespace casdiff
