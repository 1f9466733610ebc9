#include <doctest.h>

#include <cmath>

#include "casdiff/layers.hpp"
#include "casdiff/ops.hpp"
#include "gradcheck.hpp"

using namespace casdiff;

namespace {

Var<double> param(ParameterStore<double>& p, const std::string& name, std::vector<int> shape) {
  return p.create(name, std::move(shape), ParamInit::zeros);
}

Tensor<double> probe(const std::vector<int>& shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t(shape);
  for (auto& v : t.values()) v = rng.uniform(-1, 1);
  return t;
}

void expect_grads(ParameterStore<double>& p, const std::function<Var<double>()>& f, double tol = 1e-5) {
  testing::randomize_parameters(p, 99, 1.0);
  const auto res = testing::check_gradients(p, f);
  INFO(res.worst);
  CHECK(res.checked == p.count());
  CHECK(res.max_rel_error < tol);
}

}  // namespace

TEST_CASE("elementwise op gradients") {
  ParameterStore<double> p;
  auto a = param(p, "a", {2, 3, 2, 2});
  auto b = param(p, "b", {2, 3, 2, 2});
  auto e = param(p, "e", {2, 3});
  const auto c = probe({2, 3, 2, 2}, 1);
  expect_grads(p, [&] {
    auto h = ops::add(ops::silu(a), ops::scale(b, 0.7));
    return ops::dot_constant(ops::add_channel(h, e), c);
  });
}

TEST_CASE("conv2d gradients, stride 1 and 2") {
  for (int stride : {1, 2}) {
    ParameterStore<double> p;
    auto x = param(p, "x", {2, 2, 5, 5});
    auto w = param(p, "w", {3, 2, 3, 3});
    auto bias = param(p, "b", {3});
    const int out = stride == 1 ? 5 : 3;
    const auto c = probe({2, 3, out, out}, 2);
    expect_grads(p, [&] { return ops::dot_constant(ops::conv2d(x, w, bias, stride, 1), c); });
  }
}

TEST_CASE("linear, layer norm and group norm gradients") {
  ParameterStore<double> p;
  auto x = param(p, "x", {2, 3, 4});
  auto w = param(p, "w", {5, 4});
  auto bias = param(p, "b", {5});
  auto g = param(p, "g", {5});
  auto be = param(p, "be", {5});
  auto img = param(p, "img", {2, 4, 3, 3});
  auto gg = param(p, "gg", {4});
  auto gb = param(p, "gb", {4});
  const auto c1 = probe({2, 3, 5}, 3);
  const auto c2 = probe({2, 4, 3, 3}, 4);
  expect_grads(p, [&] {
    auto l = ops::dot_constant(ops::layer_norm(ops::linear(x, w, bias), g, be), c1);
    auto n = ops::dot_constant(ops::group_norm(img, gg, gb, 2), c2);
    return ops::add(l, n);
  });
}

TEST_CASE("reshaping op gradients") {
  ParameterStore<double> p;
  auto a = param(p, "a", {1, 2, 2, 3});
  auto b = param(p, "b", {1, 1, 2, 3});
  const auto c = probe({1, 3, 4, 6}, 5);
  const auto c2 = probe({1, 3}, 6);
  expect_grads(p, [&] {
    auto cat = ops::concat_channels(a, b);
    auto up = ops::upsample_nearest2x(cat);
    auto round = ops::from_tokens(ops::to_tokens(up), 4, 6);
    return ops::add(ops::dot_constant(round, c), ops::dot_constant(ops::global_avg_pool(cat), c2));
  });
}

TEST_CASE("attention gradients with and without a key mask") {
  ParameterStore<double> p;
  auto q = param(p, "q", {2, 3, 4});
  auto k = param(p, "k", {2, 5, 4});
  auto v = param(p, "v", {2, 5, 4});
  const auto c = probe({2, 3, 4}, 7);
  expect_grads(p, [&] { return ops::dot_constant(ops::attention(q, k, v, 2), c); });
  expect_grads(p, [&] { return ops::dot_constant(ops::attention(q, k, v, 2, {{0, 1}, {0, 2, 4}}), c); });
}

TEST_CASE("masked keys never influence attention") {
  Rng rng(3);
  Tensor<double> q({1, 2, 4}), k({1, 3, 4}), v({1, 3, 4});
  for (auto* t : {&q, &k, &v})
    for (auto& x : t->values()) x = rng.normal();
  const auto base = ops::attention(constant(q), constant(k), constant(v), 2, {{0, 1}})->value;
  for (int j = 0; j < 4; ++j) {
    k[2 * 4 + j] = 1e6;
    v[2 * 4 + j] = -1e6;
  }
  const auto moved = ops::attention(constant(q), constant(k), constant(v), 2, {{0, 1}})->value;
  CHECK(base == moved);
}

TEST_CASE("loss op gradients") {
  ParameterStore<double> p;
  auto pred = param(p, "pred", {3, 1, 2, 2});
  auto logits = param(p, "logits", {4, 5});
  const auto target = probe({3, 1, 2, 2}, 8);
  expect_grads(p, [&] {
    return ops::add(ops::weighted_mse(pred, target, {0.5, 1.0, 2.0}), ops::softmax_cross_entropy(logits, {0, 4, 2, 2}));
  });
}

TEST_CASE("weighted_mse oracle") {
  Tensor<double> pred({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor<double> target({2, 1, 1, 2}, std::vector<double>{0, 0, 3, 2});
  // item 0: (1 + 4) / 2 = 2.5, item 1: (0 + 4) / 2 = 2
  CHECK(ops::weighted_mse(constant(pred), target, {1.0, 3.0})->value[0] == doctest::Approx((2.5 + 6.0) / 2));
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  Tensor<double> l({2, 3}, std::vector<double>{1000, 1001, 1002, -5, 0, 5});
  const auto s = ops::softmax_rows(l);
  for (int r = 0; r < 2; ++r) CHECK(s[r * 3] + s[r * 3 + 1] + s[r * 3 + 2] == doctest::Approx(1.0));
  CHECK(std::isfinite(s[0]));
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  ParameterStore<double> p;
  auto a = param(p, "a", {2, 2});
  NoGradGuard g;
  auto r = ops::silu(a);
  CHECK_FALSE(r->requires_grad);
  CHECK(r->parents.empty());
}

TEST_CASE("parameter initialization depends only on seed and name") {
  ParameterStore<float> a(5), b(5);
  a.create("x", {4}, ParamInit::fan_in_uniform, 4);
  a.create("y", {4}, ParamInit::fan_in_uniform, 4);
  b.create("y", {4}, ParamInit::fan_in_uniform, 4);
  b.create("x", {4}, ParamInit::fan_in_uniform, 4);
  CHECK(a.find("x")->value == b.find("x")->value);
  CHECK(a.find("y")->value == b.find("y")->value);
  CHECK(a.count() == 8);
}

TEST_CASE("tensor storage is 64-byte aligned however it is built") {
  auto aligned = [](const auto& t) { return reinterpret_cast<std::uintptr_t>(t.data()) % 64 == 0; };
  for (int n : {1, 3, 17, 100, 4099}) {
    const Tensor<float> a({n}, 1.0f);
    CHECK(aligned(a));
    CHECK(aligned(Tensor<float>({n}, std::vector<float>(static_cast<std::size_t>(n), 2.0f))));
    CHECK(aligned(a.reshaped({1, n})));
    CHECK(aligned(a.cast<double>()));
    const std::vector<Tensor<float>> parts{a, a};
    const auto s = stack<float>(parts);
    CHECK(aligned(s));
    CHECK(aligned(slice0(s, 1)));
    Tensor<float> copy = a;
    CHECK(aligned(copy));
  }
}
