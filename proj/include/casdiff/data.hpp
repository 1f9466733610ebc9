#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "casdiff/conditioning.hpp"
#include "casdiff/png_io.hpp"

namespace casdiff {

enum class Split { train, test };

struct CaptionedImageRecord {
  std::string image_path;  // absolute, or relative to the working directory
  std::vector<std::string> captions;
  std::string scene_class;
  Split split = Split::train;
};

struct ManifestLoad {
  std::vector<CaptionedImageRecord> records;
  std::vector<std::string> warnings;
  std::size_t dropped = 0;  // records whose image file is missing
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

/// JSON-lines manifest: {"image", "captions", "class", "split"} per line.
/// Relative image paths resolve against the manifest's directory. Malformed
/// lines throw ParseError naming the line number.
ManifestLoad load_manifest(const std::filesystem::path& path);

std::vector<CaptionedImageRecord> filter_split(const std::vector<CaptionedImageRecord>& records, Split split);

struct TrainingExample {
  Tensor<float> hr_image;  // (3, sr_res, sr_res)
  Tensor<float> lr_image;  // (3, base_res, base_res), area average of hr_image
  TextConditioning cond;
};

enum class CaptionPolicy { uniform, first };

/// Loads an image as (3, res, res) in [-1,1], resizing bilinearly if needed.
Tensor<float> load_image(const std::filesystem::path& path, int resolution);

/// Throws InvalidArgument when a caption has no cache entry.
TrainingExample make_example(const CaptionedImageRecord& record, CaptionPolicy policy, const EmbeddingCache& cache,
                             int base_resolution, int sr_resolution, Rng& rng);

/// A record with its image pair decoded and every caption's embedding
/// fetched, so training loops never touch the disk or the encoder.
struct PreparedRecord {
  Tensor<float> hr_image;
  Tensor<float> lr_image;
  std::vector<std::string> captions;
  std::vector<TextConditioning> conds;
  std::string scene_class;
};

std::vector<PreparedRecord> prepare_records(const std::vector<CaptionedImageRecord>& records,
                                            const EmbeddingCache& cache, int base_resolution, int sr_resolution);

/// A random permutation of [0, n) cut into consecutive batches; the last
/// batch may be short.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, Rng& rng);

// Synthetic captioned-shapes corpus.

inline constexpr std::array<const char*, 3> kToyColors{"red", "green", "blue"};
inline constexpr std::array<const char*, 3> kToyShapes{"square", "circle", "triangle"};
inline constexpr std::array<const char*, 4> kToyPositions{"top", "bottom", "left", "right"};

/// "<color>_<shape>" -> 0..8 (color-major), or -1.
int toy_class_index(const std::string& scene_class);
std::string toy_class_name(int index);
std::string toy_caption(int color, int shape, int position);

/// One shape on a black background. Geometry is defined at 64x64 and scaled.
Image8 render_toy_image(int color, int shape, int position, int resolution = 64);

/// Writes n PNGs plus manifest.jsonl into out_dir and returns the manifest
/// path. Item i uses color/shape combination i % 9, a random position, and
/// lands in the test split when i % 10 == 9.
std::filesystem::path generate_toy_dataset(int n, const std::filesystem::path& out_dir, Rng& rng,
                                           int resolution = 64);

}  // namespace casdiff
