#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "casdiff/image_ops.hpp"
#include "casdiff/io.hpp"
#include "casdiff/trainer.hpp"

using namespace casdiff;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("casdiff_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<PreparedRecord> toy_records(int n, int base_res, int embed_dim,
                                        const std::string& caption_override = "") {
  const HashTextEncoder enc(8, embed_dim);
  std::vector<PreparedRecord> out;
  for (int i = 0; i < n; ++i) {
    PreparedRecord r;
    const int c = i % 3, s = (i / 3) % 3, p = i % 4;
    r.hr_image = image_to_tensor(render_toy_image(c, s, p, 2 * base_res));
    r.lr_image = downsample_area(r.hr_image, 2);
    r.captions = {caption_override.empty() ? toy_caption(c, s, p) : caption_override};
    r.conds = {encode_text(enc, r.captions[0])};
    r.scene_class = toy_class_name(c * 3 + s);
    out.push_back(std::move(r));
  }
  return out;
}

ModelConfig tiny(ModelKind kind) {
  ModelConfig mc;
  mc.kind = kind;
  mc.base = base_tiny_preset();
  mc.sr = sr_tiny_preset();
  return mc;
}

TrainConfig quick(std::int64_t steps) {
  TrainConfig tc;
  tc.batch_size = 2;
  tc.max_steps = steps;
  tc.lr_max = 1e-3;
  tc.warmup_steps = 1;
  tc.seed = 11;
  return tc;
}

bool same_params(const UNet<float>& a, const UNet<float>& b) {
  const auto& ea = a.params().entries();
  const auto& eb = b.params().entries();
  if (ea.size() != eb.size()) return false;
  for (std::size_t i = 0; i < ea.size(); ++i)
    if (ea[i].first != eb[i].first || !(ea[i].second->value == eb[i].second->value)) return false;
  return true;
}

}  // namespace

TEST_CASE("warmup schedule") {
  TrainConfig c;
  c.warmup_steps = 10000;
  c.lr_max = 1e-4;
  CHECK(lr_at(0, c) == 0.0);
  CHECK(lr_at(2500, c) == 2.5e-5);
  CHECK(lr_at(10000, c) == 1e-4);
  CHECK(lr_at(20000, c) == 1e-4);
  double prev = -1;
  for (int k = 0; k <= 12000; k += 7) {
    const double lr = lr_at(k, c);
    CHECK(lr >= prev);
    prev = lr;
  }
}

TEST_CASE("train config validation and json") {
  TrainConfig c;
  c.cond_dropout_p = 1.5;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = TrainConfig{};
  c.warmup_steps = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = TrainConfig{};
  c.lr_max = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);

  c = TrainConfig{};
  CHECK(c.optimizer_for(ModelKind::base) == OptimizerKind::adafactor);
  CHECK(c.optimizer_for(ModelKind::sr) == OptimizerKind::adam);
  c.optimizer_kind = OptimizerKind::adam;
  nlohmann::json j = c;
  CHECK(j.get<TrainConfig>().optimizer_for(ModelKind::base) == OptimizerKind::adam);
  j["typo"] = 1;
  CHECK_THROWS_AS(j.get<TrainConfig>(), ConfigError);
}

TEST_CASE("loss csv round trip") {
  const std::vector<LossRecord> recs{{1, "base", 0.5, 1e-4, 3}, {2, "base", 0.25, 2e-4, 3}};
  const auto text = format_loss_csv(recs, "00ff");
  CHECK(text.rfind("step,stage,loss,lr,seed\n", 0) == 0);
  CHECK(text.find("# config_hash=00ff") != std::string::npos);
  const auto back = parse_loss_csv(text);
  REQUIRE(back.size() == 2);
  CHECK(back[1].loss == 0.25);
  CHECK(back[1].lr == 2e-4);
}

TEST_CASE("gradient clipping") {
  ParameterStore<float> p;
  auto a = p.create("a", {2}, ParamInit::zeros);
  a->grad = Tensor<float>({2}, std::vector<float>{3, 4});
  CHECK(global_grad_norm(p) == doctest::Approx(5.0));
  CHECK(clip_grad_norm(p, 1.0) == doctest::Approx(5.0));
  CHECK(global_grad_norm(p) == doctest::Approx(1.0));
}

TEST_CASE("both optimizers overfit a single image") {
  for (auto kind : {OptimizerKind::adam, OptimizerKind::adafactor}) {
    const auto data = toy_records(1, 32, 16);
    const auto mc = tiny(ModelKind::base);
    UNet<float> model(mc.spec(), 1);
    const NoiseSchedule sched;

    std::vector<LossItem<float>> eval{{data[0].lr_image, &data[0].conds[0], std::nullopt, 0}};
    eval.insert(eval.end(), 7, eval[0]);
    Rng draw_rng(5);
    const auto draws = draw_loss_noise<float>(eval, sched, draw_rng);
    auto fixed_loss = [&] {
      NoGradGuard g;
      return denoising_loss<float>(model.denoiser(), eval, sched, draws)->value[0];
    };
    const double before = fixed_loss();

    TrainConfig tc = quick(200);
    tc.batch_size = 1;
    tc.lr_max = kind == OptimizerKind::adam ? 3e-3 : 1e-2;
    tc.warmup_steps = 10;
    tc.cond_dropout_p = 0;
    tc.optimizer_kind = kind;
    TrainOptions opts;
    const auto report = train_stage(mc, model, data, tc, opts);
    for (const auto& r : report.losses) CHECK(std::isfinite(r.loss));
    const double after = fixed_loss();
    INFO(to_string(kind), " before ", before, " after ", after);
    CHECK(after < 0.1 * before);
  }
}

TEST_CASE("full dropout makes training caption-independent") {
  const auto mc = tiny(ModelKind::base);
  auto run = [&](const std::string& caption) {
    UNet<float> model(mc.spec(), 1);
    TrainConfig tc = quick(5);
    tc.cond_dropout_p = 1.0;
    train_stage(mc, model, toy_records(4, 32, 16, caption), tc, TrainOptions{});
    return model;
  };
  const auto a = run("a red square at the top");
  const auto b = run("a blue circle on the left");
  const HashTextEncoder enc(8, 16);
  const auto probe = encode_text(enc, "a green triangle at the bottom");
  Rng rng(1);
  const auto z = standard_normal<float>({3, 32, 32}, rng);
  const auto oa = base_denoise(a, z, 0.5, probe), ob = base_denoise(b, z, 0.5, probe);
  double l2 = 0;
  for (std::size_t i = 0; i < oa.size(); ++i) l2 += double(oa[i] - ob[i]) * (oa[i] - ob[i]);
  CHECK(std::sqrt(l2) < 1e-5);
}

TEST_CASE("training runs are reproducible and resumable") {
  const auto dir = fresh_dir("resume");
  for (auto kind : {ModelKind::base, ModelKind::sr}) {
    const auto mc = tiny(kind);
    const auto data = toy_records(5, 16, 16);

    UNet<float> straight(mc.spec(), 1);
    const auto full = train_stage(mc, straight, data, quick(6), TrainOptions{});

    UNet<float> again(mc.spec(), 1);
    const auto repeat = train_stage(mc, again, data, quick(6), TrainOptions{});
    CHECK(same_params(straight, again));
    REQUIRE(repeat.losses.size() == full.losses.size());
    for (std::size_t i = 0; i < full.losses.size(); ++i) CHECK(repeat.losses[i].loss == full.losses[i].loss);

    TrainOptions first;
    first.checkpoint_dir = dir / to_string(kind);
    first.loss_log = dir / (to_string(kind) + "_loss.csv");
    UNet<float> part(mc.spec(), 1);
    const auto half = train_stage(mc, part, data, quick(3), first);
    CHECK(half.last_checkpoint == final_checkpoint_path(first.checkpoint_dir, kind));

    TrainOptions second = first;
    second.resume = half.last_checkpoint;
    UNet<float> resumed(mc.spec(), 99);
    const auto rest = train_stage(mc, resumed, data, quick(6), second);
    CHECK(rest.start_step == 3);
    CHECK(same_params(straight, resumed));
    REQUIRE(rest.losses.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) CHECK(rest.losses[i].loss == full.losses[i].loss);
    CHECK(parse_loss_csv(read_file(first.loss_log)).size() == 6);

    const auto loaded = load_model(rest.last_checkpoint);
    CHECK(same_params(loaded.model, straight));
    CHECK(loaded.metadata.at("parameter_count").get<std::size_t>() == straight.parameter_count());
  }
  fs::remove_all(dir);
}

TEST_CASE("resume rejects a checkpoint from the other stage") {
  const auto dir = fresh_dir("resume_stage");
  const auto data = toy_records(2, 16, 16);
  TrainOptions o;
  o.checkpoint_dir = dir;
  UNet<float> base(tiny(ModelKind::base).spec(), 1);
  const auto r = train_stage(tiny(ModelKind::base), base, data, quick(1), o);
  TrainOptions o2;
  o2.resume = r.last_checkpoint;
  UNet<float> sr(tiny(ModelKind::sr).spec(), 1);
  CHECK_THROWS_AS(train_stage(tiny(ModelKind::sr), sr, data, quick(2), o2), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round trip then one step equals one step") {
  const auto mc = tiny(ModelKind::sr);
  UNet<float> model(mc.spec(), 3);
  Optimizer opt({OptimizerKind::adam});
  Rng rng(2);
  auto fill_grads = [&](UNet<float>& m, std::uint64_t seed) {
    Rng g(seed);
    for (auto& [_, v] : m.params().entries()) {
      v->grad = Tensor<float>(v->value.shape());
      for (auto& x : v->grad.values()) x = static_cast<float>(g.normal());
    }
  };
  fill_grads(model, 1);
  opt.step(model.params(), 1e-3);

  const auto bytes = serialize_checkpoint(make_checkpoint(model.params(), &opt, {{"note", "x"}}));
  const auto ckpt = parse_checkpoint(bytes);
  UNet<float> copy(mc.spec(), 77);
  Optimizer opt2({OptimizerKind::adam});
  restore_parameters(ckpt, copy.params());
  restore_optimizer(ckpt, opt2);
  CHECK(ckpt.metadata.at("note") == "x");

  fill_grads(model, 2);
  fill_grads(copy, 2);
  opt.step(model.params(), 1e-3);
  opt2.step(copy.params(), 1e-3);
  CHECK(same_params(model, copy));
}

TEST_CASE("checkpoint damage is detected before anything loads") {
  const auto mc = tiny(ModelKind::base);
  UNet<float> model(mc.spec(), 3);
  const auto bytes = serialize_checkpoint(make_checkpoint(model.params(), nullptr, nlohmann::json::object()));

  SUBCASE("header") {
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(parse_checkpoint(bad), CorruptionError);
  }
  SUBCASE("truncated") { CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() / 2)), CorruptionError); }
  SUBCASE("flipped payload byte") {
    auto bad = bytes;
    bad[bytes.size() / 2] ^= 0x40;
    CHECK_THROWS_AS(parse_checkpoint(bad), CorruptionError);
  }
  SUBCASE("version") {
    auto bad = bytes;
    bad[8] = 7;
    CHECK_THROWS_AS(parse_checkpoint(bad), IncompatibleVersion);
  }
  SUBCASE("shape mismatch leaves the target untouched") {
    UNet<float> other(sr_tiny_preset().spec(), 5);
    const auto before = other.params().entries().front().second->value;
    CHECK_THROWS_AS(restore_parameters(parse_checkpoint(bytes), other.params()), Error);
    CHECK(other.params().entries().front().second->value == before);
  }
}
