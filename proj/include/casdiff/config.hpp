#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "casdiff/cascade.hpp"
#include "casdiff/trainer.hpp"

namespace casdiff {

struct PathsConfig {
  std::string manifest;
  std::string cache = "cache";
  std::string checkpoint_dir = "checkpoints";
};

/// Everything one run needs. Unknown keys anywhere are rejected.
struct RunConfig {
  NoiseSchedule schedule;
  EncoderConfig encoder;
  CascadeConfig cascade;
  BaseUNetConfig base_model = base_desk_preset();
  SRUNetConfig sr_model = sr_desk_preset();
  TrainConfig train_base;
  TrainConfig train_sr;
  PathsConfig paths;

  ModelConfig model_config(ModelKind stage) const;
  const TrainConfig& train_config(ModelKind stage) const { return stage == ModelKind::base ? train_base : train_sr; }
  /// Throws ConfigError on inconsistent settings.
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Parses and validates; ConfigError on bad JSON, unknown keys or values.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// FNV-1a over the canonical (sorted-key, compact) JSON form.
std::string config_hash(const nlohmann::json& j);
std::string config_hash(const RunConfig& c);

}  // namespace casdiff
