#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "casdiff/checkpoint.hpp"
#include "casdiff/data.hpp"
#include "casdiff/unet.hpp"

namespace casdiff {

struct TrainConfig {
  int batch_size = 16;
  int epochs = 1;
  std::int64_t max_steps = 0;  // > 0 overrides epochs
  double lr_max = 1e-4;
  int warmup_steps = 100;
  double cond_dropout_p = 0.1;
  std::uint64_t seed = 0;
  std::optional<OptimizerKind> optimizer_kind;  // empty: Adafactor for base, Adam for SR
  double grad_clip = 1.0;                       // <= 0 disables
  std::int64_t checkpoint_every = 0;            // 0: only at the end
  double max_train_aug = 0.5;
  LossWeightPolicy loss_weighting;

  void validate() const;
  OptimizerKind optimizer_for(ModelKind stage) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// lr_max * min(1, step / warmup_steps)
double lr_at(std::int64_t step, const TrainConfig& config);

struct LossRecord {
  std::int64_t step = 0;
  std::string stage;
  double loss = 0;
  double lr = 0;
  std::uint64_t seed = 0;
};

std::string to_string(ModelKind stage);
ModelKind stage_from_string(const std::string& name);

/// CSV with header step,stage,loss,lr,seed and a trailing
/// "# config_hash=<hex>" line.
std::string format_loss_csv(const std::vector<LossRecord>& records, const std::string& config_hash);
std::vector<LossRecord> parse_loss_csv(const std::string& text);

struct TrainOptions {
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::optional<std::filesystem::path> resume;
  std::filesystem::path loss_log;  // empty: not written
  NoiseSchedule schedule;
  EncoderConfig encoder;
  std::string config_hash;
  std::function<void(const LossRecord&)> on_step;
};

struct TrainReport {
  std::vector<LossRecord> losses;  // including rows carried over from a resumed log
  std::int64_t start_step = 0;
  std::int64_t final_step = 0;
  std::filesystem::path last_checkpoint;
};

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, ModelKind stage, std::int64_t step);
std::filesystem::path final_checkpoint_path(const std::filesystem::path& dir, ModelKind stage);

/// Steps the model over the prepared data. Step k (1-based) uses batch
/// (k-1) mod steps_per_epoch of an epoch-seeded permutation and an
/// independent per-step random stream, so a resumed run repeats an
/// uninterrupted one exactly.
TrainReport train_stage(const ModelConfig& model_config, UNet<float>& model, const std::vector<PreparedRecord>& data,
                        const TrainConfig& config, const TrainOptions& options);

/// Builds the LossItems for one training step; exposed for tests.
struct StepBatch {
  std::vector<TextConditioning> conds;
  std::vector<LossItem<float>> items;
};
StepBatch build_step_batch(ModelKind stage, const std::vector<PreparedRecord>& data,
                           const std::vector<std::size_t>& indices, const TrainConfig& config,
                           const NoiseSchedule& schedule, Rng& rng);

/// Model rebuilt from a checkpoint's config snapshot and parameters.
struct LoadedModel {
  ModelConfig config;
  UNet<float> model;
  NoiseSchedule schedule;
  EncoderConfig encoder;
  nlohmann::json metadata;
};
LoadedModel load_model(const std::filesystem::path& path);

}  // namespace casdiff
