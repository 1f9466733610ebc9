#include "casdiff/layers.hpp"

#include <cmath>
#include <numeric>

#include "casdiff/rng.hpp"

namespace casdiff {

template <typename T>
Var<T> ParameterStore<T>::create(const std::string& name, std::vector<int> shape, ParamInit init, int fan_in) {
  for (const auto& [existing, _] : shapes_) {
    if (existing == name) throw InvalidArgument("duplicate parameter name " + name);
  }
  shapes_.emplace_back(name, shape);
  if (!allocate_) {
    entries_.emplace_back(name, nullptr);
    return nullptr;
  }
  Tensor<T> value(shape);
  switch (init) {
    case ParamInit::zeros:
      break;
    case ParamInit::ones:
      value.fill(T(1));
      break;
    case ParamInit::fan_in_uniform: {
      Rng rng(derive_seed(seed_, fnv1a64(name)));
      const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
      for (auto& v : value.values()) v = static_cast<T>(rng.uniform(-bound, bound));
      break;
    }
  }
  auto var = parameter(std::move(value));
  entries_.emplace_back(name, var);
  return var;
}

template <typename T>
std::size_t ParameterStore<T>::count() const {
  std::size_t n = 0;
  for (const auto& [_, shape] : shapes_) n += Tensor<T>::count(shape);
  return n;
}

template <typename T>
Var<T> ParameterStore<T>::find(const std::string& name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return v;
  return nullptr;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& [_, v] : entries_)
    if (v) v->grad = Tensor<T>();
}

template <typename T>
Conv2d<T>::Conv2d(ParameterStore<T>& store, const std::string& name, int cin, int cout, int kernel, int stride_,
                  bool zero_init)
    : stride(stride_), pad(kernel / 2) {
  const int fan_in = cin * kernel * kernel;
  const auto init = zero_init ? ParamInit::zeros : ParamInit::fan_in_uniform;
  weight = store.create(name + ".weight", {cout, cin, kernel, kernel}, init, fan_in);
  bias = store.create(name + ".bias", {cout}, init, fan_in);
}

template <typename T>
Linear<T>::Linear(ParameterStore<T>& store, const std::string& name, int din, int dout, bool zero_init) {
  const auto init = zero_init ? ParamInit::zeros : ParamInit::fan_in_uniform;
  weight = store.create(name + ".weight", {dout, din}, init, din);
  bias = store.create(name + ".bias", {dout}, init, din);
}

template <typename T>
GroupNorm<T>::GroupNorm(ParameterStore<T>& store, const std::string& name, int channels, int max_groups)
    : groups(std::gcd(channels, max_groups)) {
  gamma = store.create(name + ".gamma", {channels}, ParamInit::ones);
  beta = store.create(name + ".beta", {channels}, ParamInit::zeros);
}

template <typename T>
LayerNorm<T>::LayerNorm(ParameterStore<T>& store, const std::string& name, int dim) {
  gamma = store.create(name + ".gamma", {dim}, ParamInit::ones);
  beta = store.create(name + ".beta", {dim}, ParamInit::zeros);
}

template <typename T>
Tensor<T> sinusoidal_embedding(const std::vector<double>& values, int dim) {
  if (dim < 2 || dim % 2 != 0) throw InvalidArgument("sinusoidal_embedding: dim must be even and >= 2");
  const int half = dim / 2;
  Tensor<T> out({static_cast<int>(values.size()), dim});
  for (std::size_t n = 0; n < values.size(); ++n) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double arg = values[n] * freq;
      out[n * static_cast<std::size_t>(dim) + static_cast<std::size_t>(i)] = static_cast<T>(std::sin(arg));
      out[n * static_cast<std::size_t>(dim) + static_cast<std::size_t>(half + i)] = static_cast<T>(std::cos(arg));
    }
  }
  return out;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template struct Conv2d<float>;
template struct Conv2d<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct GroupNorm<float>;
template struct GroupNorm<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template Tensor<float> sinusoidal_embedding<float>(const std::vector<double>&, int);
template Tensor<double> sinusoidal_embedding<double>(const std::vector<double>&, int);

}  // namespace casdiff
