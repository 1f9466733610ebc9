#include "casdiff/conditioning.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <set>

#include "casdiff/errors.hpp"
#include "casdiff/io.hpp"

namespace casdiff {

namespace fs = std::filesystem;

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"id", c.id}, {"max_tokens", c.max_tokens}, {"embed_dim", c.embed_dim}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  for (const auto& [key, _] : j.items()) {
    if (key != "id" && key != "max_tokens" && key != "embed_dim" && key != "seed")
      throw ConfigError("encoder: unknown key '" + key + "'");
  }
  if (j.contains("id")) c.id = j.at("id").get<std::string>();
  if (j.contains("max_tokens")) c.max_tokens = j.at("max_tokens").get<int>();
  if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
}

std::vector<std::string> tokenize(std::string_view caption) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : caption) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

HashTextEncoder::HashTextEncoder(int max_tokens, int embed_dim, std::uint64_t seed)
    : max_tokens_(max_tokens), embed_dim_(embed_dim), seed_(seed) {
  if (max_tokens < 1 || embed_dim < 1) throw ConfigError("toy-hash encoder: dimensions must be positive");
}

TextConditioning HashTextEncoder::encode(std::string_view caption) const {
  auto tokens = tokenize(caption);
  if (tokens.size() > static_cast<std::size_t>(max_tokens_)) tokens.resize(static_cast<std::size_t>(max_tokens_));
  const int count = static_cast<int>(tokens.size());
  if (count == 0) throw InvalidArgument("encoder: caption has no tokens");
  std::vector<float> rows(static_cast<std::size_t>(count) * static_cast<std::size_t>(embed_dim_));
  std::vector<double> v(static_cast<std::size_t>(embed_dim_));
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed_, fnv1a64(tokens[static_cast<std::size_t>(i)])));
    double norm = 0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (int e = 0; e < embed_dim_; ++e)
      rows[static_cast<std::size_t>(i * embed_dim_ + e)] = static_cast<float>(v[static_cast<std::size_t>(e)] / norm);
  }
  return TextConditioning::from_rows(max_tokens_, embed_dim_, rows, count);
}

std::unique_ptr<TextEncoder> make_encoder(const EncoderConfig& config) {
  if (config.id == "toy-hash") return std::make_unique<HashTextEncoder>(config.max_tokens, config.embed_dim, config.seed);
  throw ConfigError("unknown encoder id '" + config.id + "'");
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

TextConditioning encode_text(const TextEncoder& encoder, std::string_view caption) {
  if (trim(caption).empty()) throw InvalidArgument("encode_text: empty caption");
  TextConditioning cond;
  try {
    cond = encoder.encode(caption);
  } catch (const InvalidArgument&) {
    throw;
  } catch (const std::exception& e) {
    throw EncoderUnavailable(std::string("encoder '") + encoder.id() + "' failed: " + e.what());
  }
  cond.validate();
  return cond;
}

std::uint64_t caption_hash(std::string_view caption) { return fnv1a64(caption); }

EmbeddingCache::EmbeddingCache(fs::path dir) : dir_(std::move(dir)) {}

fs::path EmbeddingCache::record_path(std::string_view caption) const {
  return dir_ / (hex64(caption_hash(caption)) + ".emb");
}

namespace {

constexpr char kMagic[8] = {'C', 'D', 'E', 'M', 'B', 0, 0, 0};

}  // namespace

std::optional<TextConditioning> EmbeddingCache::get(std::string_view caption) const {
  const fs::path path = record_path(caption);
  std::error_code ec;
  if (!fs::exists(path, ec)) return std::nullopt;
  const std::string bytes = read_file(path);
  ByteReader r(bytes, path.string());
  if (r.bytes(8) != std::string_view(kMagic, 8)) throw CorruptionError(path.string() + ": bad embedding record magic");
  const auto version = r.u32();
  if (version != kFormatVersion)
    throw IncompatibleVersion(path.string() + ": embedding format version " + std::to_string(version));
  const auto hash = r.u64();
  const auto count = static_cast<int>(r.u32());
  const auto dim = static_cast<int>(r.u32());
  const auto max_tokens = static_cast<int>(r.u32());
  const auto caption_len = r.u32();
  const std::string stored(r.bytes(caption_len));
  if (hash != caption_hash(caption) || stored != caption)
    throw CorruptionError(path.string() + ": hash collision between '" + stored + "' and '" + std::string(caption) + "'");
  if (count < 1 || count > max_tokens || dim < 1) throw CorruptionError(path.string() + ": bad record header");
  std::vector<float> rows(static_cast<std::size_t>(count) * static_cast<std::size_t>(dim));
  r.floats(rows);
  std::vector<float> pooled(static_cast<std::size_t>(dim));
  r.floats(pooled);
  if (!r.done()) throw CorruptionError(path.string() + ": trailing bytes");
  TextConditioning cond = TextConditioning::from_rows(max_tokens, dim, rows, count);
  cond.pooled = std::move(pooled);
  return cond;
}

bool EmbeddingCache::put(std::string_view caption, const TextConditioning& cond) const {
  if (auto existing = get(caption)) {
    if (*existing == cond) return false;
    throw CorruptionError(record_path(caption).string() + ": cached embedding differs from a fresh encode");
  }
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw IoError("cannot create cache directory " + dir_.string() + ": " + ec.message());
  ByteWriter w;
  w.bytes(std::string_view(kMagic, 8));
  w.u32(kFormatVersion);
  w.u64(caption_hash(caption));
  const int count = cond.token_count();
  w.u32(static_cast<std::uint32_t>(count));
  w.u32(static_cast<std::uint32_t>(cond.embed_dim));
  w.u32(static_cast<std::uint32_t>(cond.max_tokens));
  w.u32(static_cast<std::uint32_t>(caption.size()));
  w.bytes(caption);
  for (int i = 0; i < cond.max_tokens; ++i) {
    if (!cond.mask[static_cast<std::size_t>(i)]) continue;
    w.floats(std::span<const float>(cond.row(i), static_cast<std::size_t>(cond.embed_dim)));
  }
  w.floats(cond.pooled);
  write_file_atomic(record_path(caption), w.str());
  return true;
}

std::size_t EmbeddingCache::entry_count() const {
  std::error_code ec;
  if (!fs::exists(dir_, ec)) return 0;
  std::size_t n = 0;
  for (const auto& entry : fs::directory_iterator(dir_)) n += entry.path().extension() == ".emb" ? 1 : 0;
  return n;
}

PrecomputeReport precompute_embeddings(const TextEncoder& encoder, const std::vector<std::string>& captions,
                                       const EmbeddingCache& cache) {
  PrecomputeReport report;
  std::set<std::string> seen;
  for (const auto& caption : captions) {
    if (!seen.insert(caption).second) continue;
    ++report.distinct_captions;
    if (cache.get(caption)) {
      ++report.existing_entries;
      continue;
    }
    cache.put(caption, encode_text(encoder, caption));
    ++report.new_entries;
  }
  return report;
}

TextConditioning dropout_conditioning(const TextConditioning& cond, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("dropout_conditioning: p must lie in [0,1]");
  if (rng.uniform() < p) return TextConditioning::null(cond.max_tokens, cond.embed_dim);
  return cond;
}

template <typename T>
AugmentedLowRes<T> augment_lowres(const Tensor<T>& lr_image, double aug_level, const NoiseSchedule& schedule,
                                  Rng& rng) {
  if (!(aug_level >= 0.0 && aug_level <= 1.0)) throw InvalidArgument("augment_lowres: aug_level must lie in [0,1]");
  const Tensor<T> eps = standard_normal<T>(lr_image.shape(), rng);
  if (aug_level == 0.0) return {lr_image, 0.0};
  return {forward_noise(lr_image, aug_level, eps, schedule).z, aug_level};
}

template AugmentedLowRes<float> augment_lowres<float>(const Tensor<float>&, double, const NoiseSchedule&, Rng&);
template AugmentedLowRes<double> augment_lowres<double>(const Tensor<double>&, double, const NoiseSchedule&, Rng&);

double sample_train_aug_level(Rng& rng, double max_train_aug) {
  if (!(max_train_aug >= 0.0 && max_train_aug <= 1.0))
    throw InvalidArgument("sample_train_aug_level: max_train_aug must lie in [0,1]");
  return rng.uniform(0.0, max_train_aug);
}

}  // namespace casdiff
