#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "casdiff/cli.hpp"
#include "casdiff/io.hpp"
#include "casdiff/trainer.hpp"

using namespace casdiff;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "casdiff");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  const int code = run_cli(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  return {code, out.str()};
}

std::string tree_digest(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, dir).string() + '\0' + read_file(f);
  return hex64(fnv1a64(all));
}

// Tiny models at 16 -> 32 so the whole command surface runs in seconds.
const char* kTinyConfig = R"({
  "encoder": {"id": "toy-hash", "max_tokens": 8, "embed_dim": 16},
  "cascade": {"base_resolution": 16, "sr_resolution": 32,
              "base_guidance": {"w": 3.0, "num_steps": 3},
              "sr_guidance": {"w": 1.0, "num_steps": 3},
              "aug_sweep": [0.1, 0.5], "max_batch": 8},
  "base_model": {"base_width": 4, "channel_mult": [1, 1, 1, 1], "res_blocks_per_stage": 1,
                 "embed_dim": 16, "norm_groups": 2},
  "sr_model": {"base_width": 4, "channel_mult": [1, 1, 1], "res_blocks": [1, 1, 1],
               "embed_dim": 16, "norm_groups": 2},
  "train_base": {"batch_size": 4, "max_steps": 4, "lr_max": 0.001, "warmup_steps": 2},
  "train_sr": {"batch_size": 4, "max_steps": 4, "lr_max": 0.001, "warmup_steps": 2}
})";

}  // namespace

TEST_CASE("command line surface") {
  const fs::path root = fs::temp_directory_path() / "casdiff_test_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string data = (root / "data").string(), cache = (root / "cache").string(),
                    ckpt = (root / "ckpt").string(), cfg = (root / "run.json").string();
  std::ofstream(cfg) << kTinyConfig;

  SUBCASE("usage errors exit with 2") {
    CHECK(cli({"make-toy-data", "--n", "9"}).code == 2);
    CHECK(cli({"no-such-command"}).code == 2);
    CHECK(cli({}).code == 2);
    CHECK(cli({"--help"}).code == 0);
  }

  SUBCASE("make-toy-data is deterministic and loads cleanly") {
    const auto a = (root / "a").string(), b = (root / "b").string();
    CHECK(cli({"make-toy-data", "--n", "9", "--seed", "1", "--out", a}).code == 0);
    CHECK(cli({"make-toy-data", "--n", "9", "--seed", "1", "--out", b}).code == 0);
    CHECK(tree_digest(a) == tree_digest(b));
    const auto m = load_manifest(fs::path(a) / "manifest.jsonl");
    CHECK(m.warnings.empty());
    CHECK(m.records.size() == 9);
  }

  SUBCASE("full pipeline") {
    REQUIRE(cli({"make-toy-data", "--n", "30", "--seed", "2", "--resolution", "32", "--out", data}).code == 0);
    const auto manifest = (fs::path(data) / "manifest.jsonl").string();

    const auto e1 = cli({"embed", "--manifest", manifest, "--cache", cache, "--config", cfg});
    CHECK(e1.code == 0);
    CHECK(e1.out.find("0 new entries") == std::string::npos);
    const auto e2 = cli({"embed", "--manifest", manifest, "--cache", cache, "--config", cfg});
    CHECK(e2.out.find("0 new entries") == 0);
    std::set<std::string> distinct;
    for (const auto& r : load_manifest(manifest).records) distinct.insert(r.captions.begin(), r.captions.end());
    CHECK(EmbeddingCache(cache).entry_count() == distinct.size());
    CHECK(cli({"embed", "--manifest", manifest, "--cache", cache, "--encoder", "nope"}).code == 2);

    for (const char* stage : {"base", "sr"}) {
      const auto t = cli({"train", "--stage", stage, "--config", cfg, "--manifest", manifest, "--cache", cache,
                          "--checkpoint-dir", ckpt});
      CHECK(t.code == 0);
      const auto log = read_file(fs::path(ckpt) / (std::string(stage) + "_loss.csv"));
      CHECK(parse_loss_csv(log).size() == 4);
      CHECK(log.find("# config_hash=") != std::string::npos);
    }
    const auto base = (fs::path(ckpt) / "base_final.ckpt").string();
    const auto sr = (fs::path(ckpt) / "sr_final.ckpt").string();

    const auto s1 = (root / "s1").string(), s2 = (root / "s2").string();
    for (const auto& out : {s1, s2}) {
      CHECK(cli({"sample", "--checkpoint-base", base, "--checkpoint-sr", sr, "--config", cfg, "--prompt",
                 "a red square at the top", "--seed", "7", "--out", out})
                .code == 0);
    }
    CHECK(read_file(fs::path(s1) / "lr.png") == read_file(fs::path(s2) / "lr.png"));
    CHECK(read_file(fs::path(s1) / "hr.png") == read_file(fs::path(s2) / "hr.png"));
    CHECK(read_file(fs::path(s1) / "hr.png").find("config_hash") != std::string::npos);

    const auto metrics = (root / "metrics.json").string();
    CHECK(cli({"eval", "--checkpoint-base", base, "--checkpoint-sr", sr, "--config", cfg, "--manifest", manifest,
               "--n", "6", "--out", metrics})
              .code == 0);
    const auto j = nlohmann::json::parse(read_file(metrics));
    CHECK(j.contains("is"));
    CHECK(j.contains("fid"));
    CHECK(j.at("n") == 6);
    CHECK(j.contains("config_hash"));

    const auto csv = (root / "sweep.csv").string();
    CHECK(cli({"sweep-aug", "--checkpoint-base", base, "--checkpoint-sr", sr, "--config", cfg, "--manifest",
               manifest, "--levels", "0.1,0.9", "--n", "4", "--out", csv})
              .code == 0);
    CHECK(read_file(csv).find("0.9,") != std::string::npos);
    CHECK(cli({"sweep-aug", "--checkpoint-base", base, "--checkpoint-sr", sr, "--manifest", manifest, "--levels",
               "0.3,0.3", "--out", csv})
              .code == 2);

    CHECK(cli({"sample", "--checkpoint-base", (root / "missing.ckpt").string(), "--prompt", "x", "--out", s1})
              .code == 1);
    CHECK(cli({"sample", "--checkpoint-base", sr, "--prompt", "x", "--out", s1}).code == 2);
  }
  fs::remove_all(root);
}
