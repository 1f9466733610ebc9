#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace casdiff {

std::string hex64(std::uint64_t v);

/// Whole-file read; IoError when the file cannot be opened.
std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames it over `path`, so readers
/// never observe a partially written file under the final name.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

/// Little-endian binary encoder.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void bytes(std::string_view b) { buf_.append(b); }
  void floats(std::span<const float> v);
  void string(std::string_view s);
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

/// Bounds-checked counterpart of ByteWriter. Running past the end throws
/// CorruptionError naming `source`.
class ByteReader {
 public:
  ByteReader(std::string_view data, std::string source) : data_(data), source_(std::move(source)) {}
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::string_view bytes(std::size_t n);
  void floats(std::span<float> out);
  std::string string();
  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace casdiff
