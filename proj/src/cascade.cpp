#include "casdiff/cascade.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "casdiff/image_ops.hpp"

namespace casdiff {

void CascadeConfig::validate() const {
  if (base_resolution < 1 || sr_resolution < base_resolution || sr_resolution % base_resolution != 0)
    throw ConfigError("cascade: sr_resolution must be a positive multiple of base_resolution");
  if (channels < 1) throw ConfigError("cascade: channels must be >= 1");
  if (aug_sweep.empty()) throw ConfigError("cascade: aug_sweep must not be empty");
  for (std::size_t i = 0; i < aug_sweep.size(); ++i) {
    if (!(aug_sweep[i] >= 0.0 && aug_sweep[i] <= 1.0)) throw ConfigError("cascade: aug_sweep levels must lie in [0,1]");
    if (i > 0 && !(aug_sweep[i] > aug_sweep[i - 1]))
      throw ConfigError("cascade: aug_sweep must be strictly increasing");
  }
  if (max_batch < 1) throw ConfigError("cascade: max_batch must be >= 1");
  try {
    base_guidance.validate();
    sr_guidance.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("cascade: ") + e.what());
  }
}

void to_json(nlohmann::json& j, const CascadeConfig& c) {
  j = nlohmann::json{{"base_resolution", c.base_resolution}, {"sr_resolution", c.sr_resolution},
                     {"channels", c.channels},               {"base_guidance", c.base_guidance},
                     {"sr_guidance", c.sr_guidance},         {"aug_sweep", c.aug_sweep},
                     {"sr_enabled", c.sr_enabled},           {"sr_guidance_enabled", c.sr_guidance_enabled},
                     {"max_batch", c.max_batch}};
}

void from_json(const nlohmann::json& j, CascadeConfig& c) {
  static const char* keys[] = {"base_resolution", "sr_resolution", "channels",   "base_guidance",       "sr_guidance",
                               "aug_sweep",       "sr_enabled",    "max_batch", "sr_guidance_enabled"};
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(std::begin(keys), std::end(keys), [&](const char* k) { return key == k; }))
      throw ConfigError("cascade: unknown key '" + key + "'");
  }
  if (j.contains("base_resolution")) c.base_resolution = j["base_resolution"].get<int>();
  if (j.contains("sr_resolution")) c.sr_resolution = j["sr_resolution"].get<int>();
  if (j.contains("channels")) c.channels = j["channels"].get<int>();
  if (j.contains("base_guidance")) c.base_guidance = j["base_guidance"].get<GuidanceConfig>();
  if (j.contains("sr_guidance")) c.sr_guidance = j["sr_guidance"].get<GuidanceConfig>();
  if (j.contains("aug_sweep")) c.aug_sweep = j["aug_sweep"].get<std::vector<double>>();
  if (j.contains("sr_enabled")) c.sr_enabled = j["sr_enabled"].get<bool>();
  if (j.contains("sr_guidance_enabled")) c.sr_guidance_enabled = j["sr_guidance_enabled"].get<bool>();
  if (j.contains("max_batch")) c.max_batch = j["max_batch"].get<int>();
}

void check_cascade(const CascadeModels& models, const CascadeConfig& config) {
  config.validate();
  if (!models.base) throw ConfigError("cascade: base model missing");
  const UNetSpec& b = models.base->spec();
  if (b.lowres_concat) throw ConfigError("cascade: base model must not be a super-resolution model");
  const int div = 1 << (b.stages.size() - 1);
  if (config.base_resolution % div != 0)
    throw ConfigError("cascade: base_resolution " + std::to_string(config.base_resolution) +
                      " not divisible by the base model's " + std::to_string(div));
  if (b.out_channels != config.channels) throw ConfigError("cascade: base model channel count mismatch");
  if (!config.sr_enabled) return;
  if (!models.sr) throw ConfigError("cascade: sr model missing");
  const UNetSpec& s = models.sr->spec();
  if (!s.lowres_concat) throw ConfigError("cascade: sr model is not a super-resolution model");
  if (config.base_resolution * s.scale_factor != config.sr_resolution)
    throw ConfigError("cascade: sr model scale factor " + std::to_string(s.scale_factor) + " does not map " +
                      std::to_string(config.base_resolution) + " to " + std::to_string(config.sr_resolution));
  const int sdiv = 1 << (s.stages.size() - 1);
  if (config.sr_resolution % sdiv != 0) throw ConfigError("cascade: sr_resolution not divisible by the sr model's depth");
  if (s.out_channels != config.channels) throw ConfigError("cascade: sr model channel count mismatch");
}

namespace {

TextConditioning null_for(const TextConditioning& c) { return TextConditioning::null(c.max_tokens, c.embed_dim); }

std::vector<Rng> streams(std::size_t n, std::uint64_t seed, std::uint64_t which) {
  std::vector<Rng> out;
  for (std::size_t i = 0; i < n; ++i) out.emplace_back(derive_seed(seed, i, which));
  return out;
}

}  // namespace

std::vector<Tensor<float>> generate_lowres(const CascadeModels& models, const CascadeConfig& config,
                                           const std::vector<const TextConditioning*>& conds, std::uint64_t seed) {
  check_cascade(models, config);
  if (conds.empty()) return {};
  const TextConditioning null = null_for(*conds.front());
  auto rngs = streams(conds.size(), seed, 0);
  return sample_batch<float>(models.base->denoiser(), conds, null, models.schedule, config.base_guidance,
                             {config.channels, config.base_resolution, config.base_resolution}, rngs, nullptr,
                             config.max_batch);
}

std::vector<Tensor<float>> super_resolve(const CascadeModels& models, const CascadeConfig& config,
                                         const std::vector<const TextConditioning*>& conds,
                                         const std::vector<Tensor<float>>& lowres, double aug_level,
                                         std::uint64_t seed) {
  check_cascade(models, config);
  if (lowres.size() != conds.size()) throw InvalidArgument("super_resolve: need one LR image per conditioning");
  if (conds.empty()) return {};
  if (!config.sr_enabled) {
    std::vector<Tensor<float>> out;
    for (const auto& lr : lowres) out.push_back(resize_bilinear(lr, config.sr_resolution, config.sr_resolution));
    return out;
  }
  std::vector<AugmentedLowRes<float>> aug;
  for (std::size_t i = 0; i < lowres.size(); ++i) {
    Rng rng(derive_seed(seed, i, 1));
    aug.push_back(augment_lowres(lowres[i], aug_level, models.schedule, rng));
  }
  GuidanceConfig g = config.sr_guidance;
  if (!config.sr_guidance_enabled) {
    g.w = 1.0;
    g.evaluate_uncond = false;
  }
  const TextConditioning null = null_for(*conds.front());
  auto rngs = streams(conds.size(), seed, 2);
  return sample_batch<float>(models.sr->denoiser(), conds, null, models.schedule, g,
                             {config.channels, config.sr_resolution, config.sr_resolution}, rngs, &aug,
                             config.max_batch);
}

std::vector<CascadeOutput> generate_batch(const CascadeModels& models, const CascadeConfig& config,
                                          const std::vector<const TextConditioning*>& conds, std::uint64_t seed) {
  const auto lr = generate_lowres(models, config, conds, seed);
  const auto hr = super_resolve(models, config, conds, lr, config.inference_aug_level(), seed);
  std::vector<CascadeOutput> out;
  for (std::size_t i = 0; i < lr.size(); ++i) out.push_back({lr[i], hr[i]});
  return out;
}

CascadeOutput generate(const CascadeModels& models, const std::string& caption, const TextEncoder& encoder,
                       const CascadeConfig& config, std::uint64_t seed) {
  const TextConditioning cond = encode_text(encoder, caption);
  return generate_batch(models, config, {&cond}, seed).front();
}

SweepResult sweep_aug_levels(const CascadeModels& models, const std::vector<const TextConditioning*>& conds,
                             const CascadeConfig& config, const FeatureExtractor& extractor,
                             const FeatureStats& reference, std::uint64_t seed) {
  if (conds.size() < 2) throw InvalidArgument("sweep_aug_levels: need at least 2 captions");
  const auto lr = generate_lowres(models, config, conds, seed);
  SweepResult result;
  std::vector<double> levels = config.aug_sweep;
  std::sort(levels.begin(), levels.end());
  for (double level : levels) {
    const auto hr = super_resolve(models, config, conds, lr, level, seed);
    const FidResult f = fid_detailed(reference, accumulate_features(extractor, hr));
    result.rows.push_back({level, f.fid, static_cast<std::int64_t>(hr.size()), seed, f.warning});
  }
  const auto best = std::min_element(result.rows.begin(), result.rows.end(),
                                     [](const SweepRow& a, const SweepRow& b) { return a.fid < b.fid; });
  result.best_aug_level = best->aug_level;
  return result;
}

std::string format_sweep_csv(const SweepResult& result, const std::string& config_hash) {
  std::ostringstream os;
  os << "aug_level,fid,n_images,seed\n";
  char buf[128];
  for (const auto& r : result.rows) {
    std::snprintf(buf, sizeof buf, "%.6g,%.9g,%lld,%llu\n", r.aug_level, r.fid, static_cast<long long>(r.n_images),
                  static_cast<unsigned long long>(r.seed));
    os << buf;
  }
  os << "# config_hash=" << config_hash << '\n';
  return os.str();
}

EvalResult evaluate_model(const CascadeModels& models, const std::vector<const TextConditioning*>& conds,
                          const CascadeConfig& config, const FeatureExtractor& extractor,
                          const FeatureStats& reference, std::uint64_t seed) {
  if (conds.empty()) throw InvalidArgument("evaluate_model: no captions");
  std::vector<Tensor<float>> hr;
  for (auto& out : generate_batch(models, config, conds, seed)) hr.push_back(std::move(out.hr));
  return evaluate_images(extractor, hr, reference);
}

}  // namespace casdiff
