#include <doctest.h>

#include <cmath>

#include "casdiff/conditioning.hpp"
#include "casdiff/unet.hpp"
#include "gradcheck.hpp"

using namespace casdiff;

namespace {

template <typename T>
Tensor<T> uniform_tensor(std::vector<int> shape, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-1, 1));
  return t;
}

double l2_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Loss over a small fixed batch with fixed noise draws.
struct TinySetup {
  TextConditioning c1, c2;
  std::vector<LossItem<double>> batch;
  LossDraws<double> draws;
  NoiseSchedule schedule;

  TinySetup(int channels, int size, int lr_size, int embed_dim) {
    const HashTextEncoder enc(6, embed_dim, 1);
    c1 = encode_text(enc, "a red square at the top");
    c2 = TextConditioning::null(6, embed_dim);
    Rng rng(12);
    for (int i = 0; i < 2; ++i) {
      LossItem<double> item;
      item.x = uniform_tensor<double>({channels, size, size}, rng);
      item.cond = i == 0 ? &c1 : &c2;
      if (lr_size > 0) {
        item.lowres = uniform_tensor<double>({channels, lr_size, lr_size}, rng);
        item.aug_level = 0.2 + 0.3 * i;
      }
      batch.push_back(std::move(item));
    }
    draws = draw_loss_noise<double>(batch, schedule, rng);
  }

  Var<double> loss(const UNet<double>& net) const {
    return denoising_loss<double>(net.denoiser(), batch, schedule, draws);
  }
};

}  // namespace

TEST_CASE("parameter count oracles") {
  ParameterStore<float> p(0, false);
  Conv2d<float> conv(p, "c", 3, 8, 3);
  CHECK(p.count() == 224);

  const auto base = base_desk_preset();
  auto wide = base;
  wide.base_width *= 2;
  const double ratio = static_cast<double>(parameter_count(wide.spec())) / parameter_count(base.spec());
  CHECK(ratio > 2.0);
  CHECK(ratio < 4.0);

  CHECK(parameter_count(base.spec()) == parameter_count(base.spec()));
  CHECK(parameter_count(base.spec()) == UNet<float>(base.spec(), 1).parameter_count());
  CHECK(parameter_count(sr_desk_preset().spec()) == UNet<float>(sr_desk_preset().spec(), 1).parameter_count());

  for (const auto& spec : {base.spec(), sr_desk_preset().spec()}) {
    const auto n = parameter_count(spec);
    CHECK(n >= 500'000);
    CHECK(n <= 2'000'000);
  }
  CHECK(parameter_count(sr_full_scale_preset().spec()) > 10 * parameter_count(sr_desk_preset().spec()));
}

TEST_CASE("topology invariants") {
  const auto b = BaseUNetConfig{};
  CHECK(b.reference_topology());
  const auto bs = b.spec();
  REQUIRE(bs.stages.size() == 4);
  CHECK_FALSE(bs.stages[0].cross_attn);
  for (int s = 1; s < 4; ++s) CHECK(bs.stages[static_cast<std::size_t>(s)].cross_attn);
  for (const auto& st : bs.stages) CHECK(st.res_blocks == 3);

  const auto ss = sr_desk_preset().spec();
  for (std::size_t s = 0; s < ss.stages.size(); ++s) {
    const bool last = s + 1 == ss.stages.size();
    CHECK(ss.stages[s].self_attn == last);
    CHECK(ss.stages[s].cross_attn == last);
  }
  auto bad = sr_desk_preset();
  bad.self_attn_stages = {0};
  CHECK_THROWS_AS(bad.spec(), InvalidArgument);
}

TEST_CASE("base U-Net shapes, determinism and mask invariance") {
  const auto cfg = base_tiny_preset();
  const UNet<double> net(cfg.spec(), 3);
  Rng rng(1);
  const HashTextEncoder enc(8, cfg.embed_dim, 1);
  const auto cond = encode_text(enc, "a green circle on the left");
  const auto z = uniform_tensor<double>({3, 32, 32}, rng);

  const auto out = base_denoise(net, z, 0.4, cond);
  CHECK(out.shape() == z.shape());
  CHECK(base_denoise(net, z, 0.4, cond) == out);

  CHECK_THROWS_AS(base_denoise(net, uniform_tensor<double>({3, 12, 12}, rng), 0.4, cond), InvalidArgument);

  UNet<double> live(cfg.spec(), 3);
  testing::randomize_parameters(live.params(), 5);
  const auto ref = base_denoise(live, z, 0.4, cond);
  auto poked = cond;
  for (int r = cond.token_count(); r < cond.max_tokens; ++r)
    for (int e = 0; e < cond.embed_dim; ++e)
      poked.tokens[static_cast<std::size_t>(r * cond.embed_dim + e)] = static_cast<float>(rng.uniform(-50, 50));
  const auto moved = base_denoise(live, z, 0.4, poked);
  double worst = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(ref[i] - moved[i]));
  CHECK(worst < 1e-6);
}

TEST_CASE("batched forward matches item-wise forward") {
  const auto cfg = base_tiny_preset();
  UNet<double> net(cfg.spec(), 3);
  testing::randomize_parameters(net.params(), 2);
  Rng rng(4);
  const HashTextEncoder enc(8, cfg.embed_dim, 1);
  const auto c1 = encode_text(enc, "a red square");
  const auto c2 = encode_text(enc, "a blue triangle at the bottom");
  const auto z1 = uniform_tensor<double>({3, 8, 8}, rng);
  const auto z2 = uniform_tensor<double>({3, 8, 8}, rng);
  ModelInput<double> in;
  in.z = stack<double>(std::vector{z1, z2});
  in.t = {0.2, 0.7};
  in.cond = {&c1, &c2};
  const auto both = net.forward(in)->value;
  const auto a = base_denoise(net, z1, 0.2, c1);
  const auto b = base_denoise(net, z2, 0.7, c2);
  CHECK(l2_diff(slice0(both, 0), a) < 1e-10);
  CHECK(l2_diff(slice0(both, 1), b) < 1e-10);
}

TEST_CASE("SR U-Net shapes and low-resolution sensitivity") {
  const auto cfg = sr_tiny_preset();
  UNet<double> net(cfg.spec(), 7);
  testing::randomize_parameters(net.params(), 8);
  Rng rng(2);
  const auto cond = TextConditioning::null(6, cfg.embed_dim);
  const auto z = uniform_tensor<double>({3, 64, 64}, rng);
  const AugmentedLowRes<double> lr1{uniform_tensor<double>({3, 32, 32}, rng), 0.1};
  const AugmentedLowRes<double> lr2{uniform_tensor<double>({3, 32, 32}, rng), 0.1};
  const auto o1 = sr_denoise(net, z, 0.5, cond, lr1);
  CHECK(o1.shape() == z.shape());
  CHECK(l2_diff(o1, sr_denoise(net, z, 0.5, cond, lr2)) > 0.0);

  const AugmentedLowRes<double> wrong{uniform_tensor<double>({3, 16, 16}, rng), 0.1};
  try {
    sr_denoise(net, z, 0.5, cond, wrong);
    FAIL("expected a scale mismatch");
  } catch (const InvalidArgument& e) {
    CHECK(std::string(e.what()).find("does not match scale factor") != std::string::npos);
  }
}

TEST_CASE("no dead subgraph in the tiny presets") {
  SUBCASE("base") {
    UNet<double> net(base_tiny_preset().spec(), 1);
    testing::randomize_parameters(net.params(), 3);
    const TinySetup setup(3, 8, 0, base_tiny_preset().embed_dim);
    backward(setup.loss(net));
    for (const auto& [name, var] : net.params().entries()) {
      double mag = 0;
      for (double g : var->grad.values()) mag += std::abs(g);
      INFO(name);
      CHECK(mag > 0.0);
    }
  }
  SUBCASE("sr") {
    UNet<double> net(sr_tiny_preset().spec(), 1);
    testing::randomize_parameters(net.params(), 3);
    const TinySetup setup(3, 8, 4, sr_tiny_preset().embed_dim);
    backward(setup.loss(net));
    for (const auto& [name, var] : net.params().entries()) {
      double mag = 0;
      for (double g : var->grad.values()) mag += std::abs(g);
      INFO(name);
      CHECK(mag > 0.0);
    }
  }
}

TEST_CASE("finite-difference gradient check, tiny base U-Net") {
  UNet<double> net(base_tiny_preset().spec(), 1);
  CHECK(net.parameter_count() <= 10'000);
  testing::randomize_parameters(net.params(), 3);
  const TinySetup setup(3, 8, 0, base_tiny_preset().embed_dim);
  const auto res = testing::check_gradients(net.params(), [&] { return setup.loss(net); });
  INFO(res.worst);
  CHECK(res.checked == net.parameter_count());
  CHECK(res.max_rel_error < 1e-3);
}

TEST_CASE("finite-difference gradient check, tiny SR U-Net") {
  UNet<double> net(sr_tiny_preset().spec(), 1);
  CHECK(net.parameter_count() <= 10'000);
  testing::randomize_parameters(net.params(), 3);
  const TinySetup setup(3, 8, 4, sr_tiny_preset().embed_dim);
  const auto res = testing::check_gradients(net.params(), [&] { return setup.loss(net); });
  INFO(res.worst);
  CHECK(res.checked == net.parameter_count());
  CHECK(res.max_rel_error < 1e-3);
}

TEST_CASE("model config json rejects unknown keys") {
  ModelConfig c;
  c.kind = ModelKind::sr;
  c.sr = sr_tiny_preset();
  nlohmann::json j = c;
  const auto back = j.get<ModelConfig>();
  CHECK(parameter_count(back.spec()) == parameter_count(c.spec()));
  j["sr"]["bogus"] = 1;
  CHECK_THROWS_AS(j.get<ModelConfig>(), ConfigError);
}
