#include "casdiff/cli.hpp"

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "casdiff/config.hpp"
#include "casdiff/io.hpp"

namespace casdiff {

namespace fs = std::filesystem;

namespace {

struct CascadeFlags {
  std::string checkpoint_base;
  std::string checkpoint_sr;
  std::string config;
  std::uint64_t seed = 0;
  std::optional<double> w;
  std::optional<int> steps;
};

void add_cascade_flags(CLI::App* cmd, CascadeFlags& f, bool require_sr) {
  cmd->add_option("--checkpoint-base", f.checkpoint_base, "Base model checkpoint")->required();
  auto* sr = cmd->add_option("--checkpoint-sr", f.checkpoint_sr, "Super-resolution checkpoint");
  if (require_sr) sr->required();
  cmd->add_option("--config", f.config, "Run config (JSON); its cascade section is used");
  cmd->add_option("--seed", f.seed, "Random seed");
  cmd->add_option("--w", f.w, "Guidance weight for both stages");
  cmd->add_option("--steps", f.steps, "Sampling steps for both stages");
}

struct LoadedCascade {
  LoadedModel base;
  std::optional<LoadedModel> sr;
  CascadeConfig config;
  std::unique_ptr<TextEncoder> encoder;
  std::string hash;

  CascadeModels models() const { return {&base.model, sr ? &sr->model : nullptr, base.schedule}; }
};

LoadedCascade load_cascade(const CascadeFlags& f) {
  LoadedCascade c{load_model(f.checkpoint_base), std::nullopt, {}, nullptr, {}};
  if (c.base.config.kind != ModelKind::base) throw ConfigError(f.checkpoint_base + " is not a base-stage checkpoint");
  if (!f.config.empty()) c.config = load_run_config(f.config).cascade;
  if (!f.checkpoint_sr.empty()) {
    c.sr = load_model(f.checkpoint_sr);
    if (c.sr->config.kind != ModelKind::sr) throw ConfigError(f.checkpoint_sr + " is not an sr-stage checkpoint");
  } else {
    c.config.sr_enabled = false;
  }
  if (f.w) c.config.base_guidance.w = c.config.sr_guidance.w = *f.w;
  if (f.steps) c.config.base_guidance.num_steps = c.config.sr_guidance.num_steps = *f.steps;
  c.config.validate();
  check_cascade(c.models(), c.config);
  c.encoder = make_encoder(c.base.encoder);
  nlohmann::json h{{"cascade", c.config},
                   {"base", c.base.metadata.value("config_hash", "")},
                   {"sr", c.sr ? c.sr->metadata.value("config_hash", "") : ""}};
  c.hash = config_hash(h);
  return c;
}

std::vector<TextConditioning> encode_all(const TextEncoder& encoder, const std::vector<std::string>& captions) {
  std::vector<TextConditioning> out;
  for (const auto& c : captions) out.push_back(encode_text(encoder, c));
  return out;
}

std::vector<const TextConditioning*> pointers(const std::vector<TextConditioning>& conds) {
  std::vector<const TextConditioning*> out;
  for (const auto& c : conds) out.push_back(&c);
  return out;
}

// Toy extractor trained on the manifest's train split, plus reference
// statistics of the test split at the HR resolution.
struct Reference {
  ToyClassifier extractor;
  FeatureStats stats;
  std::vector<std::string> captions;
};

Reference build_reference(const std::string& manifest, int resolution, int n, std::uint64_t seed) {
  const ManifestLoad load = load_manifest(manifest);
  for (const auto& w : load.warnings) std::cerr << "warning: " << w << '\n';
  std::vector<Tensor<float>> train_images, test_images;
  std::vector<int> labels;
  Reference ref{ToyClassifier(seed), {}, {}};
  for (const auto& r : load.records) {
    const int label = toy_class_index(r.scene_class);
    if (label < 0) throw ConfigError("the built-in extractor needs toy classes; got '" + r.scene_class + "'");
    if (r.split == Split::train) {
      train_images.push_back(load_image(r.image_path, resolution));
      labels.push_back(label);
    } else {
      test_images.push_back(load_image(r.image_path, resolution));
      ref.captions.push_back(r.captions.front());
    }
  }
  if (train_images.empty() || test_images.size() < 2)
    throw InvalidArgument("manifest needs train images and at least 2 test images");
  ref.extractor.train(train_images, labels, 400, 32, 3e-3, seed);
  ref.stats = accumulate_features(ref.extractor, test_images);
  std::vector<std::string> caps;
  for (int i = 0; i < n; ++i) caps.push_back(ref.captions[static_cast<std::size_t>(i) % ref.captions.size()]);
  ref.captions = std::move(caps);
  return ref;
}

int cmd_make_toy_data(int n, const std::string& out, std::uint64_t seed, int resolution) {
  Rng rng(seed);
  const fs::path manifest = generate_toy_dataset(n, out, rng, resolution);
  std::cout << "wrote " << n << " images and " << manifest.string() << '\n';
  return 0;
}

int cmd_embed(const std::string& manifest, const std::string& cache_dir, const std::string& encoder_id,
              const std::string& config_path) {
  EncoderConfig ec;
  if (!config_path.empty()) ec = load_run_config(config_path).encoder;
  if (!encoder_id.empty()) ec.id = encoder_id;
  const auto encoder = make_encoder(ec);
  const ManifestLoad load = load_manifest(manifest);
  for (const auto& w : load.warnings) std::cerr << "warning: " << w << '\n';
  std::vector<std::string> captions;
  for (const auto& r : load.records) captions.insert(captions.end(), r.captions.begin(), r.captions.end());
  const EmbeddingCache cache(cache_dir);
  const PrecomputeReport rep = precompute_embeddings(*encoder, captions, cache);
  std::cout << rep.new_entries << " new entries, " << rep.existing_entries << " existing, " << rep.distinct_captions
            << " distinct captions\n";
  return 0;
}

struct TrainFlags {
  std::string stage;
  std::string config;
  std::string resume;
  std::string manifest;
  std::string cache;
  std::string checkpoint_dir;
  std::optional<std::int64_t> steps;
};

int cmd_train(const TrainFlags& f) {
  RunConfig rc = load_run_config(f.config);
  const ModelKind stage = stage_from_string(f.stage);
  if (!f.manifest.empty()) rc.paths.manifest = f.manifest;
  if (!f.cache.empty()) rc.paths.cache = f.cache;
  if (!f.checkpoint_dir.empty()) rc.paths.checkpoint_dir = f.checkpoint_dir;
  TrainConfig tc = rc.train_config(stage);
  if (f.steps) tc.max_steps = *f.steps;
  if (rc.paths.manifest.empty()) throw ConfigError("no manifest given (paths.manifest or --manifest)");

  const ManifestLoad load = load_manifest(rc.paths.manifest);
  for (const auto& w : load.warnings) std::cerr << "warning: " << w << '\n';
  const auto data = prepare_records(filter_split(load.records, Split::train), EmbeddingCache(rc.paths.cache),
                                    rc.cascade.base_resolution, rc.cascade.sr_resolution);
  const ModelConfig mc = rc.model_config(stage);
  UNet<float> model(mc.spec(), tc.seed);
  std::cout << to_string(stage) << " model: " << model.parameter_count() << " parameters\n";

  TrainOptions opts;
  opts.checkpoint_dir = rc.paths.checkpoint_dir;
  if (!f.resume.empty()) opts.resume = f.resume;
  opts.loss_log = fs::path(rc.paths.checkpoint_dir) / (to_string(stage) + "_loss.csv");
  opts.schedule = rc.schedule;
  opts.encoder = rc.encoder;
  opts.config_hash = config_hash(rc);
  opts.on_step = [](const LossRecord& r) {
    if (r.step % 50 == 0) std::cout << "step " << r.step << " loss " << r.loss << " lr " << r.lr << std::endl;
  };
  const TrainReport rep = train_stage(mc, model, data, tc, opts);
  std::cout << "finished at step " << rep.final_step << "; checkpoint " << rep.last_checkpoint.string() << '\n';
  return 0;
}

int cmd_sample(const CascadeFlags& f, const std::string& prompt, const std::string& out) {
  const LoadedCascade c = load_cascade(f);
  const CascadeOutput res = generate(c.models(), prompt, *c.encoder, c.config, f.seed);
  fs::create_directories(out);
  const PngText text{{"config_hash", c.hash}, {"prompt", prompt}, {"seed", std::to_string(f.seed)}};
  write_png(fs::path(out) / "lr.png", tensor_to_image(res.lr), text);
  write_png(fs::path(out) / "hr.png", tensor_to_image(res.hr), text);
  std::cout << "wrote " << (fs::path(out) / "lr.png").string() << " and " << (fs::path(out) / "hr.png").string()
            << '\n';
  return 0;
}

int cmd_eval(const CascadeFlags& f, const std::string& manifest, const std::string& out, int n) {
  const LoadedCascade c = load_cascade(f);
  const Reference ref = build_reference(manifest, c.config.sr_resolution, n, f.seed);
  const auto conds = encode_all(*c.encoder, ref.captions);
  const EvalResult r = evaluate_model(c.models(), pointers(conds), c.config, ref.extractor, ref.stats, f.seed);
  if (!r.warning.empty()) std::cerr << "warning: " << r.warning << '\n';
  const nlohmann::json j{{"is", r.is},
                         {"fid", r.fid},
                         {"n", r.n},
                         {"seed", f.seed},
                         {"extractor_id", ref.extractor.id()},
                         {"config_hash", c.hash}};
  write_file_atomic(out, j.dump(2) + "\n");
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_sweep(const CascadeFlags& f, const std::string& manifest, std::vector<double> levels, const std::string& out,
              int n) {
  LoadedCascade c = load_cascade(f);
  if (!levels.empty()) c.config.aug_sweep = levels;
  c.config.validate();
  const Reference ref = build_reference(manifest, c.config.sr_resolution, n, f.seed);
  const auto conds = encode_all(*c.encoder, ref.captions);
  const SweepResult r = sweep_aug_levels(c.models(), pointers(conds), c.config, ref.extractor, ref.stats, f.seed);
  for (const auto& row : r.rows)
    if (!row.warning.empty()) std::cerr << "warning (aug_level " << row.aug_level << "): " << row.warning << '\n';
  write_file_atomic(out, format_sweep_csv(r, c.hash));
  std::cout << "best aug_level " << r.best_aug_level << '\n';
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Cascaded text-to-image diffusion toolkit"};
  app.require_subcommand(1);

  int toy_n = 2000;
  std::string toy_out;
  std::uint64_t toy_seed = 0;
  int toy_res = 64;
  auto* make = app.add_subcommand("make-toy-data", "Generate the synthetic captioned-shapes dataset");
  make->add_option("--n", toy_n, "Number of images")->check(CLI::PositiveNumber);
  make->add_option("--out", toy_out, "Output directory")->required();
  make->add_option("--seed", toy_seed, "Random seed");
  make->add_option("--resolution", toy_res, "Image size in pixels");

  std::string emb_manifest, emb_cache, emb_encoder, emb_config;
  auto* embed = app.add_subcommand("embed", "Precompute caption embeddings");
  embed->add_option("--manifest", emb_manifest, "JSON-lines manifest")->required();
  embed->add_option("--cache", emb_cache, "Embedding cache directory")->required();
  embed->add_option("--encoder", emb_encoder, "Encoder id");
  embed->add_option("--config", emb_config, "Run config (JSON); its encoder section is used");

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "Train one stage");
  train->add_option("--stage", tf.stage, "base or sr")->required()->check(CLI::IsMember({"base", "sr"}));
  train->add_option("--config", tf.config, "Run config (JSON)")->required();
  train->add_option("--resume", tf.resume, "Checkpoint to resume from");
  train->add_option("--manifest", tf.manifest, "Override paths.manifest");
  train->add_option("--cache", tf.cache, "Override paths.cache");
  train->add_option("--checkpoint-dir", tf.checkpoint_dir, "Override paths.checkpoint_dir");
  train->add_option("--steps", tf.steps, "Override max_steps");

  CascadeFlags sample_flags;
  std::string prompt, sample_out;
  auto* sample_cmd = app.add_subcommand("sample", "Generate an LR/HR image pair for a prompt");
  add_cascade_flags(sample_cmd, sample_flags, false);
  sample_cmd->add_option("--prompt", prompt, "Caption")->required();
  sample_cmd->add_option("--out", sample_out, "Output directory")->required();

  CascadeFlags eval_flags;
  std::string eval_manifest, eval_out;
  int eval_n = 100;
  auto* eval = app.add_subcommand("eval", "Inception score and FID against a reference manifest");
  add_cascade_flags(eval, eval_flags, false);
  eval->add_option("--manifest", eval_manifest, "Reference manifest")->required();
  eval->add_option("--out", eval_out, "Metrics JSON path")->required();
  eval->add_option("--n", eval_n, "Number of generated images")->check(CLI::PositiveNumber);

  CascadeFlags sweep_flags;
  std::string sweep_manifest, sweep_out;
  std::vector<double> levels;
  int sweep_n = 64;
  auto* sweep = app.add_subcommand("sweep-aug", "FID across inference-time augmentation levels");
  add_cascade_flags(sweep, sweep_flags, true);
  sweep->add_option("--manifest", sweep_manifest, "Reference manifest")->required();
  sweep->add_option("--levels", levels, "Comma-separated augmentation levels")->delimiter(',');
  sweep->add_option("--out", sweep_out, "CSV path")->required();
  sweep->add_option("--n", sweep_n, "Images per level")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*make) return cmd_make_toy_data(toy_n, toy_out, toy_seed, toy_res);
    if (*embed) return cmd_embed(emb_manifest, emb_cache, emb_encoder, emb_config);
    if (*train) return cmd_train(tf);
    if (*sample_cmd) return cmd_sample(sample_flags, prompt, sample_out);
    if (*eval) return cmd_eval(eval_flags, eval_manifest, eval_out, eval_n);
    if (*sweep) return cmd_sweep(sweep_flags, sweep_manifest, levels, sweep_out, sweep_n);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace casdiff
