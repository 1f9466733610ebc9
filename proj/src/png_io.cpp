#include "casdiff/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "casdiff/io.hpp"

namespace casdiff {

namespace {

void write_to_string(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), length);
}

void flush_noop(png_structp) {}

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  (void)png;
  throw IoError(std::string("png: ") + msg);
}

void png_warn(png_structp, png_const_charp) {}

}  // namespace

std::string encode_png(const Image8& image, const PngText& text) {
  if (image.width <= 0 || image.height <= 0 ||
      image.rgb.size() != static_cast<std::size_t>(image.width) * static_cast<std::size_t>(image.height) * 3)
    throw InvalidArgument("encode_png: bad image dimensions");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  if (!png) throw IoError("png: cannot create writer");
  png_infop info = png_create_info_struct(png);
  std::string out;
  try {
    if (!info) throw IoError("png: cannot create info");
    png_set_write_fn(png, &out, write_to_string, flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    std::vector<png_text> chunks(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
      std::memset(&chunks[i], 0, sizeof(png_text));
      chunks[i].compression = PNG_TEXT_COMPRESSION_NONE;
      chunks[i].key = const_cast<char*>(text[i].first.c_str());
      chunks[i].text = const_cast<char*>(text[i].second.c_str());
      chunks[i].text_length = text[i].second.size();
    }
    if (!chunks.empty()) png_set_text(png, info, chunks.data(), static_cast<int>(chunks.size()));
    png_write_info(png, info);
    for (int y = 0; y < image.height; ++y) {
      png_write_row(png, image.rgb.data() + static_cast<std::size_t>(y) * image.width * 3);
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

Image8 decode_png(const std::string& bytes, const std::string& source) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw IoError(source + ": cannot decode PNG: " + img.message);
  img.format = PNG_FORMAT_RGB;
  Image8 out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.rgb.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError(source + ": cannot decode PNG: " + msg);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Image8& image, const PngText& text) {
  write_file_atomic(path, encode_png(image, text));
}

Image8 read_png(const std::filesystem::path& path) { return decode_png(read_file(path), path.string()); }

Tensor<float> image_to_tensor(const Image8& image) {
  const int h = image.height, w = image.width;
  Tensor<float> t({3, h, w});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::uint8_t v = image.rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c];
        t[(static_cast<std::size_t>(c) * h + y) * w + x] = static_cast<float>(v / 127.5 - 1.0);
      }
    }
  }
  return t;
}

Image8 tensor_to_image(const Tensor<float>& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw InvalidArgument("tensor_to_image: expected (3,H,W)");
  Image8 img;
  img.height = t.dim(1);
  img.width = t.dim(2);
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        const double v = t[(static_cast<std::size_t>(c) * img.height + y) * img.width + x];
        const double b = std::clamp(std::round((v + 1.0) * 127.5), 0.0, 255.0);
        img.rgb[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] = static_cast<std::uint8_t>(b);
      }
    }
  }
  return img;
}

}  // namespace casdiff
