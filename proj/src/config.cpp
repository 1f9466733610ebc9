#include "casdiff/config.hpp"

#include <algorithm>

#include "casdiff/io.hpp"
#include "casdiff/rng.hpp"

namespace casdiff {

ModelConfig RunConfig::model_config(ModelKind stage) const {
  ModelConfig m;
  m.kind = stage;
  m.base = base_model;
  m.sr = sr_model;
  return m;
}

void RunConfig::validate() const {
  try {
    schedule.validate();
    base_model.validate();
    sr_model.validate();
    base_model.spec().validate();
    sr_model.spec().validate();
    train_base.validate();
    train_sr.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  cascade.validate();
  if (base_model.embed_dim != encoder.embed_dim || sr_model.embed_dim != encoder.embed_dim)
    throw ConfigError("model embed_dim must equal the encoder embed_dim");
  if (sr_model.scale_factor * cascade.base_resolution != cascade.sr_resolution)
    throw ConfigError("sr_model.scale_factor does not map base_resolution to sr_resolution");
  if (base_model.in_channels != cascade.channels || sr_model.image_channels() != cascade.channels)
    throw ConfigError("model channel counts do not match cascade.channels");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"schedule", c.schedule},
                     {"encoder", c.encoder},
                     {"cascade", c.cascade},
                     {"base_model", c.base_model},
                     {"sr_model", c.sr_model},
                     {"train_base", c.train_base},
                     {"train_sr", c.train_sr},
                     {"paths",
                      {{"manifest", c.paths.manifest},
                       {"cache", c.paths.cache},
                       {"checkpoint_dir", c.paths.checkpoint_dir}}}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  static const char* keys[] = {"schedule", "encoder", "cascade", "base_model", "sr_model",
                               "train_base", "train_sr", "paths"};
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(std::begin(keys), std::end(keys), [&](const char* k) { return key == k; }))
      throw ConfigError("config: unknown key '" + key + "'");
  }
  if (j.contains("schedule")) c.schedule = j["schedule"].get<NoiseSchedule>();
  if (j.contains("encoder")) c.encoder = j["encoder"].get<EncoderConfig>();
  if (j.contains("cascade")) c.cascade = j["cascade"].get<CascadeConfig>();
  if (j.contains("base_model")) c.base_model = j["base_model"].get<BaseUNetConfig>();
  if (j.contains("sr_model")) c.sr_model = j["sr_model"].get<SRUNetConfig>();
  if (j.contains("train_base")) c.train_base = j["train_base"].get<TrainConfig>();
  if (j.contains("train_sr")) c.train_sr = j["train_sr"].get<TrainConfig>();
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    for (const auto& [key, _] : p.items()) {
      if (key != "manifest" && key != "cache" && key != "checkpoint_dir")
        throw ConfigError("paths: unknown key '" + key + "'");
    }
    if (p.contains("manifest")) c.paths.manifest = p["manifest"].get<std::string>();
    if (p.contains("cache")) c.paths.cache = p["cache"].get<std::string>();
    if (p.contains("checkpoint_dir")) c.paths.checkpoint_dir = p["checkpoint_dir"].get<std::string>();
  }
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig c;
  try {
    c = nlohmann::json::parse(text).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_file(path)); }

std::string config_hash(const nlohmann::json& j) { return hex64(fnv1a64(j.dump())); }

std::string config_hash(const RunConfig& c) { return config_hash(nlohmann::json(c)); }

}  // namespace casdiff
