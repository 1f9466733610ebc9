#include <doctest.h>

#include <cmath>
#include <limits>

#include "casdiff/sampler.hpp"
#include "casdiff/unet.hpp"
#include "gradcheck.hpp"

using namespace casdiff;

namespace {

// Exact posterior mean E[x | z_t] for scalar data x ~ N(mu, s^2).
DenoiserModel<double> gaussian_oracle(const NoiseSchedule& sched, double mu, double s) {
  return {[=](const ModelInput<double>& in) {
            Tensor<double> out(in.z.shape());
            for (std::size_t i = 0; i < out.size(); ++i) {
              const auto [a, sg] = alpha_sigma(sched, in.t[i]);
              const double gain = a * s * s / (a * a * s * s + sg * sg);
              out[i] = mu + gain * (in.z[i] - a * mu);
            }
            return constant(out);
          },
          false};
}

std::vector<Rng> rngs_for(int n, std::uint64_t seed) {
  std::vector<Rng> r;
  for (int i = 0; i < n; ++i) r.emplace_back(derive_seed(seed, static_cast<std::uint64_t>(i)));
  return r;
}

}  // namespace

TEST_CASE("guided_eps identities") {
  Rng rng(1);
  const auto c = standard_normal<double>({2, 3, 3}, rng);
  const auto u = standard_normal<double>({2, 3, 3}, rng);
  CHECK(guided_eps(c, u, 1.0) == c);
  CHECK(guided_eps(c, u, 0.0) == u);
  const auto g = guided_eps(c, u, 3.0);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(3 * c[i] - 2 * u[i]));
  CHECK_THROWS_AS(guided_eps(c, standard_normal<double>({2, 3, 4}, rng), 2.0), InvalidArgument);
}

TEST_CASE("guidance config validation") {
  GuidanceConfig g;
  g.w = -1;
  CHECK_THROWS_AS(g.validate(), InvalidArgument);
  g.w = 2;
  g.evaluate_uncond = false;
  CHECK_THROWS_AS(g.validate(), InvalidArgument);
  g.w = 1;
  CHECK_NOTHROW(g.validate());
  g.num_steps = 0;
  CHECK_THROWS_AS(g.validate(), InvalidArgument);
}

TEST_CASE("ancestral sampler reproduces a 1-D Gaussian") {
  const NoiseSchedule sched;
  const double mu = 0.2, s = 0.3;
  const auto model = gaussian_oracle(sched, mu, s);
  const auto null = TextConditioning::null(2, 4);
  GuidanceConfig g;
  g.w = 1;
  // Ancestral steps with the posterior mean lose a little variance per step;
  // the deficit vanishes as the grid is refined.
  g.num_steps = 1000;
  g.clip_xhat = false;
  const int n = 20000;
  std::vector<const TextConditioning*> conds(n, &null);
  auto rngs = rngs_for(n, 3);
  const auto xs = sample_batch<double>(model, conds, null, sched, g, {1, 1, 1}, rngs, nullptr, n);
  double mean = 0, var = 0;
  for (const auto& x : xs) mean += x[0];
  mean /= n;
  for (const auto& x : xs) var += (x[0] - mean) * (x[0] - mean);
  var /= n - 1;
  CHECK(std::abs(mean - mu) < 4 * s / std::sqrt(n));
  CHECK(std::abs(var - s * s) < 0.05 * s * s);
}

TEST_CASE("w = 1 trajectory is bitwise equal to the conditional-only sampler") {
  const auto cfg = base_tiny_preset();
  UNet<float> net(cfg.spec(), 2);
  testing::randomize_parameters(net.params(), 4, 0.2);
  int calls = 0;
  const DenoiserModel<float> counted{[&](const ModelInput<float>& in) {
                                       ++calls;
                                       return net.forward(in);
                                     },
                                     false};
  const HashTextEncoder enc(8, cfg.embed_dim);
  const auto cond = encode_text(enc, "a blue square on the right");
  const auto null = TextConditioning::null(8, cfg.embed_dim);
  const NoiseSchedule sched;
  GuidanceConfig g;
  g.w = 1;
  g.num_steps = 6;

  Rng r1(9), r2(9);
  const auto guided = sample(counted, cond, null, sched, g, {3, 8, 8}, r1);
  CHECK(calls == 12);
  calls = 0;
  g.evaluate_uncond = false;
  const auto plain = sample(counted, cond, null, sched, g, {3, 8, 8}, r2);
  CHECK(calls == 6);
  CHECK(guided == plain);
  for (float v : guided.values()) CHECK((v >= -1.0f && v <= 1.0f));
}

TEST_CASE("sampling is deterministic and independent of batch grouping") {
  const auto cfg = base_tiny_preset();
  UNet<float> net(cfg.spec(), 2);
  testing::randomize_parameters(net.params(), 4, 0.2);
  const HashTextEncoder enc(8, cfg.embed_dim);
  const auto c1 = encode_text(enc, "a red circle");
  const auto c2 = encode_text(enc, "a green triangle");
  const auto null = TextConditioning::null(8, cfg.embed_dim);
  GuidanceConfig g;
  g.num_steps = 4;
  const std::vector<const TextConditioning*> conds{&c1, &c2, &c1};
  auto ra = rngs_for(3, 5), rb = rngs_for(3, 5), rc = rngs_for(3, 6);
  const auto a = sample_batch<float>(net.denoiser(), conds, null, NoiseSchedule{}, g, {3, 8, 8}, ra, nullptr, 64);
  const auto b = sample_batch<float>(net.denoiser(), conds, null, NoiseSchedule{}, g, {3, 8, 8}, rb, nullptr, 1);
  const auto c = sample_batch<float>(net.denoiser(), conds, null, NoiseSchedule{}, g, {3, 8, 8}, rc, nullptr, 64);
  for (int i = 0; i < 3; ++i) {
    double diff = 0;
    for (std::size_t k = 0; k < a[i].size(); ++k) diff = std::max(diff, double(std::abs(a[i][k] - b[i][k])));
    CHECK(diff < 1e-5);
  }
  CHECK(a[0] != c[0]);
}

TEST_CASE("sampler errors") {
  const NoiseSchedule sched;
  const auto null = TextConditioning::null(2, 4);
  GuidanceConfig g;
  g.num_steps = 3;
  Rng rng(1);
  SUBCASE("non-finite prediction names the step") {
    const DenoiserModel<double> nan_model{[](const ModelInput<double>& in) {
                                            Tensor<double> out(in.z.shape(), std::numeric_limits<double>::quiet_NaN());
                                            return constant(out);
                                          },
                                          false};
    try {
      sample(nan_model, null, null, sched, g, {1, 2, 2}, rng);
      FAIL("expected NumericFailure");
    } catch (const NumericFailure& e) {
      CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
  }
  SUBCASE("super-resolution model without a low-resolution image") {
    const DenoiserModel<double> sr{[](const ModelInput<double>& in) { return constant(in.z); }, true};
    CHECK_THROWS_AS(sample(sr, null, null, sched, g, {1, 2, 2}, rng), InvalidArgument);
  }
}
