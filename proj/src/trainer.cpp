#include "casdiff/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "casdiff/io.hpp"

namespace casdiff {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kEpochStream = 0x45504f4348ULL;
constexpr std::uint64_t kStepStream = 0x53544550ULL;

void check(bool ok, const std::string& msg) {
  if (!ok) throw InvalidArgument(msg);
}

}  // namespace

void TrainConfig::validate() const {
  check(batch_size >= 1, "train: batch_size must be >= 1");
  check(epochs >= 1 || max_steps > 0, "train: epochs must be >= 1");
  check(lr_max > 0 && std::isfinite(lr_max), "train: lr_max must be > 0");
  check(warmup_steps >= 1, "train: warmup_steps must be >= 1");
  check(cond_dropout_p >= 0 && cond_dropout_p <= 1, "train: cond_dropout_p must lie in [0,1]");
  check(max_train_aug >= 0 && max_train_aug <= 1, "train: max_train_aug must lie in [0,1]");
  check(checkpoint_every >= 0 && max_steps >= 0, "train: step counts must be >= 0");
}

OptimizerKind TrainConfig::optimizer_for(ModelKind stage) const {
  if (optimizer_kind) return *optimizer_kind;
  return stage == ModelKind::base ? OptimizerKind::adafactor : OptimizerKind::adam;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"max_steps", c.max_steps},
                     {"lr_max", c.lr_max},
                     {"warmup_steps", c.warmup_steps},
                     {"cond_dropout_p", c.cond_dropout_p},
                     {"seed", c.seed},
                     {"optimizer", c.optimizer_kind ? to_string(*c.optimizer_kind) : "auto"},
                     {"grad_clip", c.grad_clip},
                     {"checkpoint_every", c.checkpoint_every},
                     {"max_train_aug", c.max_train_aug},
                     {"loss_weighting", c.loss_weighting.kind == LossWeighting::constant ? "constant" : "snr-clipped"},
                     {"snr_clip", c.loss_weighting.snr_clip}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const char* keys[] = {"batch_size", "epochs",          "max_steps",     "lr_max",         "warmup_steps",
                               "cond_dropout_p", "seed",        "optimizer",     "grad_clip",      "checkpoint_every",
                               "max_train_aug", "loss_weighting", "snr_clip"};
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(std::begin(keys), std::end(keys), [&](const char* k) { return key == k; }))
      throw ConfigError("train: unknown key '" + key + "'");
  }
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
  if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
  if (j.contains("max_steps")) c.max_steps = j["max_steps"].get<std::int64_t>();
  if (j.contains("lr_max")) c.lr_max = j["lr_max"].get<double>();
  if (j.contains("warmup_steps")) c.warmup_steps = j["warmup_steps"].get<int>();
  if (j.contains("cond_dropout_p")) c.cond_dropout_p = j["cond_dropout_p"].get<double>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("optimizer")) {
    const auto name = j["optimizer"].get<std::string>();
    c.optimizer_kind = name == "auto" ? std::nullopt : std::optional(optimizer_kind_from_string(name));
  }
  if (j.contains("grad_clip")) c.grad_clip = j["grad_clip"].get<double>();
  if (j.contains("checkpoint_every")) c.checkpoint_every = j["checkpoint_every"].get<std::int64_t>();
  if (j.contains("max_train_aug")) c.max_train_aug = j["max_train_aug"].get<double>();
  if (j.contains("loss_weighting")) {
    const auto w = j["loss_weighting"].get<std::string>();
    if (w == "constant")
      c.loss_weighting.kind = LossWeighting::constant;
    else if (w == "snr-clipped")
      c.loss_weighting.kind = LossWeighting::snr_clipped;
    else
      throw ConfigError("train: unknown loss_weighting '" + w + "'");
  }
  if (j.contains("snr_clip")) c.loss_weighting.snr_clip = j["snr_clip"].get<double>();
}

double lr_at(std::int64_t step, const TrainConfig& config) {
  if (step <= 0) return 0.0;
  if (step >= config.warmup_steps) return config.lr_max;
  return config.lr_max * (static_cast<double>(step) / static_cast<double>(config.warmup_steps));
}

std::string to_string(ModelKind stage) { return stage == ModelKind::base ? "base" : "sr"; }

ModelKind stage_from_string(const std::string& name) {
  if (name == "base") return ModelKind::base;
  if (name == "sr") return ModelKind::sr;
  throw ConfigError("unknown stage '" + name + "' (expected base or sr)");
}

std::string format_loss_csv(const std::vector<LossRecord>& records, const std::string& config_hash) {
  std::ostringstream os;
  os << "step,stage,loss,lr,seed\n";
  char buf[160];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%lld,%s,%.17g,%.17g,%llu\n", static_cast<long long>(r.step), r.stage.c_str(), r.loss,
                  r.lr, static_cast<unsigned long long>(r.seed));
    os << buf;
  }
  os << "# config_hash=" << config_hash << '\n';
  return os.str();
}

std::vector<LossRecord> parse_loss_csv(const std::string& text) {
  std::vector<LossRecord> out;
  std::istringstream in(text);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    LossRecord r;
    std::istringstream ls(line);
    std::string field;
    std::getline(ls, field, ',');
    r.step = std::stoll(field);
    std::getline(ls, r.stage, ',');
    std::getline(ls, field, ',');
    r.loss = std::stod(field);
    std::getline(ls, field, ',');
    r.lr = std::stod(field);
    std::getline(ls, field, ',');
    r.seed = std::stoull(field);
    out.push_back(r);
  }
  return out;
}

fs::path checkpoint_path(const fs::path& dir, ModelKind stage, std::int64_t step) {
  return dir / (to_string(stage) + "_step" + std::to_string(step) + ".ckpt");
}

fs::path final_checkpoint_path(const fs::path& dir, ModelKind stage) { return dir / (to_string(stage) + "_final.ckpt"); }

StepBatch build_step_batch(ModelKind stage, const std::vector<PreparedRecord>& data,
                           const std::vector<std::size_t>& indices, const TrainConfig& config,
                           const NoiseSchedule& schedule, Rng& rng) {
  StepBatch b;
  b.conds.reserve(indices.size());
  for (std::size_t idx : indices) {
    const auto& rec = data.at(idx);
    const auto& cond = rec.conds.at(rng.below(rec.conds.size()));
    b.conds.push_back(dropout_conditioning(cond, config.cond_dropout_p, rng));
  }
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& rec = data[indices[i]];
    LossItem<float> item;
    item.cond = &b.conds[i];
    if (stage == ModelKind::base) {
      item.x = rec.lr_image;
    } else {
      item.x = rec.hr_image;
      const double level = sample_train_aug_level(rng, config.max_train_aug);
      auto aug = augment_lowres(rec.lr_image, level, schedule, rng);
      item.lowres = std::move(aug.image);
      item.aug_level = level;
    }
    b.items.push_back(std::move(item));
  }
  return b;
}

namespace {

nlohmann::json make_metadata(const ModelConfig& model_config, const UNet<float>& model, const TrainConfig& config,
                             const TrainOptions& options, std::int64_t step) {
  return nlohmann::json{{"stage", to_string(model_config.kind)},
                        {"model", model_config},
                        {"schedule", options.schedule},
                        {"train", config},
                        {"encoder", options.encoder},
                        {"step", step},
                        {"parameter_count", model.parameter_count()},
                        {"config_hash", options.config_hash}};
}

}  // namespace

TrainReport train_stage(const ModelConfig& model_config, UNet<float>& model, const std::vector<PreparedRecord>& data,
                        const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  options.schedule.validate();
  if (data.empty()) throw InvalidArgument("train: dataset is empty");
  const ModelKind stage = model_config.kind;
  const std::string stage_name = to_string(stage);

  OptimizerConfig oc;
  oc.kind = config.optimizer_for(stage);
  Optimizer optimizer(oc);
  TrainReport report;

  if (options.resume) {
    const Checkpoint ckpt = load_checkpoint(*options.resume);
    if (ckpt.metadata.value("stage", "") != stage_name)
      throw ConfigError("resume: checkpoint is for stage '" + ckpt.metadata.value("stage", "") + "'");
    if (ckpt.metadata.value("parameter_count", std::size_t{0}) != model.parameter_count())
      throw ConfigError("resume: checkpoint parameter count does not match the model");
    restore_parameters(ckpt, model.params());
    restore_optimizer(ckpt, optimizer);
    report.start_step = ckpt.metadata.at("step").get<std::int64_t>();
    if (!options.loss_log.empty() && fs::exists(options.loss_log)) {
      for (const auto& r : parse_loss_csv(read_file(options.loss_log)))
        if (r.step <= report.start_step) report.losses.push_back(r);
    }
  }

  const auto steps_per_epoch =
      static_cast<std::int64_t>((data.size() + static_cast<std::size_t>(config.batch_size) - 1) /
                                static_cast<std::size_t>(config.batch_size));
  const std::int64_t total = config.max_steps > 0 ? config.max_steps : steps_per_epoch * config.epochs;
  if (!options.checkpoint_dir.empty()) fs::create_directories(options.checkpoint_dir);

  auto save = [&](std::int64_t step, const fs::path& path) {
    save_checkpoint(path, make_checkpoint(model.params(), &optimizer,
                                          make_metadata(model_config, model, config, options, step)));
    report.last_checkpoint = path;
    if (!options.loss_log.empty())
      write_file_atomic(options.loss_log, format_loss_csv(report.losses, options.config_hash));
  };

  const DenoiserModel<float> denoiser = model.denoiser();
  std::int64_t cached_epoch = -1;
  std::vector<std::vector<std::size_t>> batches;
  for (std::int64_t k = report.start_step + 1; k <= total; ++k) {
    const std::int64_t epoch = (k - 1) / steps_per_epoch;
    if (epoch != cached_epoch) {
      Rng perm(derive_seed(config.seed, kEpochStream, static_cast<std::uint64_t>(epoch)));
      batches = epoch_batches(data.size(), config.batch_size, perm);
      cached_epoch = epoch;
    }
    Rng rng(derive_seed(config.seed, kStepStream, static_cast<std::uint64_t>(k)));
    const StepBatch batch =
        build_step_batch(stage, data, batches[static_cast<std::size_t>((k - 1) % steps_per_epoch)], config,
                         options.schedule, rng);
    Var<float> loss = denoising_loss<float>(denoiser, batch.items, options.schedule, rng, config.loss_weighting);
    const double value = loss->value[0];
    if (!std::isfinite(value)) {
      throw NumericFailure("train: non-finite loss at step " + std::to_string(k) +
                           (report.last_checkpoint.empty() ? std::string()
                                                           : "; last good checkpoint " + report.last_checkpoint.string()));
    }
    model.params().zero_grad();
    backward(loss);
    loss.reset();
    if (config.grad_clip > 0) clip_grad_norm(model.params(), config.grad_clip);
    const double lr = lr_at(k, config);
    optimizer.step(model.params(), lr);
    model.params().zero_grad();

    LossRecord rec{k, stage_name, value, lr, config.seed};
    report.losses.push_back(rec);
    if (options.on_step) options.on_step(rec);
    if (!options.checkpoint_dir.empty() && config.checkpoint_every > 0 && k % config.checkpoint_every == 0)
      save(k, checkpoint_path(options.checkpoint_dir, stage, k));
  }
  report.final_step = std::max(total, report.start_step);
  if (!options.checkpoint_dir.empty()) save(report.final_step, final_checkpoint_path(options.checkpoint_dir, stage));
  else if (!options.loss_log.empty())
    write_file_atomic(options.loss_log, format_loss_csv(report.losses, options.config_hash));
  return report;
}

LoadedModel load_model(const fs::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  const auto& meta = ckpt.metadata;
  ModelConfig config;
  NoiseSchedule schedule;
  EncoderConfig encoder;
  try {
    config = meta.at("model").get<ModelConfig>();
    schedule = meta.at("schedule").get<NoiseSchedule>();
    encoder = meta.at("encoder").get<EncoderConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(path.string() + ": bad checkpoint metadata: " + e.what());
  }
  UNet<float> model(config.spec(), 0);
  if (meta.value("parameter_count", std::size_t{0}) != model.parameter_count())
    throw CorruptionError(path.string() + ": parameter_count does not match the stored config");
  restore_parameters(ckpt, model.params());
  return {config, std::move(model), schedule, encoder, meta};
}

}  // namespace casdiff
