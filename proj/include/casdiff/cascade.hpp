#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "casdiff/evaluation.hpp"
#include "casdiff/sampler.hpp"
#include "casdiff/unet.hpp"

namespace casdiff {

struct CascadeConfig {
  int base_resolution = 32;
  int sr_resolution = 64;
  int channels = 3;
  GuidanceConfig base_guidance;
  GuidanceConfig sr_guidance;
  std::vector<double> aug_sweep{0.0, 0.1, 0.2, 0.3};
  bool sr_enabled = true;
  bool sr_guidance_enabled = true;  // false: SR stage samples with w = 1
  int max_batch = 64;

  /// Throws ConfigError.
  void validate() const;
  double inference_aug_level() const { return aug_sweep.front(); }
};

void to_json(nlohmann::json& j, const CascadeConfig& c);
void from_json(const nlohmann::json& j, CascadeConfig& c);

struct CascadeModels {
  const UNet<float>* base = nullptr;
  const UNet<float>* sr = nullptr;  // may be null when sr_enabled is false
  NoiseSchedule schedule;
};

struct CascadeOutput {
  Tensor<float> lr;  // (C, base_res, base_res)
  Tensor<float> hr;  // (C, sr_res, sr_res)
};

/// Checks model topology against the configured resolutions; ConfigError.
void check_cascade(const CascadeModels& models, const CascadeConfig& config);

/// Base samples for a batch of conditionings; item i uses seed stream
/// derive_seed(seed, i, 0).
std::vector<Tensor<float>> generate_lowres(const CascadeModels& models, const CascadeConfig& config,
                                           const std::vector<const TextConditioning*>& conds, std::uint64_t seed);

/// Super-resolves given LR images at one augmentation level. Item i draws
/// its augmentation noise from stream (seed, i, 1) and its sampler noise
/// from (seed, i, 2).
std::vector<Tensor<float>> super_resolve(const CascadeModels& models, const CascadeConfig& config,
                                         const std::vector<const TextConditioning*>& conds,
                                         const std::vector<Tensor<float>>& lowres, double aug_level,
                                         std::uint64_t seed);

std::vector<CascadeOutput> generate_batch(const CascadeModels& models, const CascadeConfig& config,
                                          const std::vector<const TextConditioning*>& conds, std::uint64_t seed);

/// Encodes the caption once and runs both stages. With sr_enabled false the
/// HR image is the bilinear upsample of the LR image.
CascadeOutput generate(const CascadeModels& models, const std::string& caption, const TextEncoder& encoder,
                       const CascadeConfig& config, std::uint64_t seed);

struct SweepRow {
  double aug_level = 0;
  double fid = 0;
  std::int64_t n_images = 0;
  std::uint64_t seed = 0;
  std::string warning;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // sorted by aug_level
  double best_aug_level = 0;
};

/// LR images are sampled once and shared by every level.
SweepResult sweep_aug_levels(const CascadeModels& models, const std::vector<const TextConditioning*>& conds,
                             const CascadeConfig& config, const FeatureExtractor& extractor,
                             const FeatureStats& reference, std::uint64_t seed);

/// CSV with header aug_level,fid,n_images,seed and a trailing
/// "# config_hash=<hex>" line.
std::string format_sweep_csv(const SweepResult& result, const std::string& config_hash);

/// One cascade sample per conditioning, scored against the reference.
EvalResult evaluate_model(const CascadeModels& models, const std::vector<const TextConditioning*>& conds,
                          const CascadeConfig& config, const FeatureExtractor& extractor,
                          const FeatureStats& reference, std::uint64_t seed);

}  // namespace casdiff
