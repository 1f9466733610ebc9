#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "casdiff/diffusion.hpp"
#include "casdiff/rng.hpp"
#include "casdiff/schedule.hpp"
#include "casdiff/text_conditioning.hpp"

namespace casdiff {

/// Frozen caption encoder. Implementations must be deterministic.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::string id() const = 0;
  virtual int max_tokens() const = 0;
  virtual int embed_dim() const = 0;
  virtual TextConditioning encode(std::string_view caption) const = 0;
};

struct EncoderConfig {
  std::string id = "toy-hash";
  int max_tokens = 32;
  int embed_dim = 64;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

/// Lower-cased alphanumeric runs.
std::vector<std::string> tokenize(std::string_view caption);

/// Maps every token to a seeded pseudo-random unit vector. Order-free in the
/// pooled vector; row order follows the caption.
class HashTextEncoder final : public TextEncoder {
 public:
  explicit HashTextEncoder(int max_tokens = 32, int embed_dim = 64, std::uint64_t seed = 0);
  std::string id() const override { return "toy-hash"; }
  int max_tokens() const override { return max_tokens_; }
  int embed_dim() const override { return embed_dim_; }
  TextConditioning encode(std::string_view caption) const override;

 private:
  int max_tokens_;
  int embed_dim_;
  std::uint64_t seed_;
};

/// Throws ConfigError for unknown encoder ids.
std::unique_ptr<TextEncoder> make_encoder(const EncoderConfig& config);

/// Validates the caption, runs the encoder, and checks the result.
TextConditioning encode_text(const TextEncoder& encoder, std::string_view caption);

std::uint64_t caption_hash(std::string_view caption);

/// Directory of per-caption embedding records keyed by caption hash.
///
/// Record layout (little endian): magic "CDEMB\0\0\0", format_version u32,
/// caption_hash u64, token_count u32, embed_dim u32, max_tokens u32,
/// caption_bytes u32, caption, token rows f32[token_count*embed_dim],
/// pooled f32[embed_dim].
class EmbeddingCache {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  explicit EmbeddingCache(std::filesystem::path dir);

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path record_path(std::string_view caption) const;

  /// Empty when no record exists; CorruptionError on a hash collision or a
  /// damaged record.
  std::optional<TextConditioning> get(std::string_view caption) const;

  /// Returns false when an identical entry already exists.
  bool put(std::string_view caption, const TextConditioning& cond) const;

  std::size_t entry_count() const;

 private:
  std::filesystem::path dir_;
};

struct PrecomputeReport {
  std::size_t new_entries = 0;
  std::size_t existing_entries = 0;
  std::size_t distinct_captions = 0;
};

/// Encodes every caption missing from the cache. Idempotent.
PrecomputeReport precompute_embeddings(const TextEncoder& encoder, const std::vector<std::string>& captions,
                                       const EmbeddingCache& cache);

/// Replaces cond with the null conditioning with probability p.
TextConditioning dropout_conditioning(const TextConditioning& cond, double p, Rng& rng);

template <typename T>
struct AugmentedLowRes {
  Tensor<T> image;
  double aug_level = 0;
};

/// Forward-process noise at time s = aug_level applied to the low-res image.
/// Level 0 returns the image unchanged; the noise draw is consumed either way.
template <typename T>
AugmentedLowRes<T> augment_lowres(const Tensor<T>& lr_image, double aug_level, const NoiseSchedule& schedule,
                                  Rng& rng);

double sample_train_aug_level(Rng& rng, double max_train_aug = 0.5);

}  // namespace casdiff
