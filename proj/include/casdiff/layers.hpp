#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "casdiff/autograd.hpp"
#include "casdiff/ops.hpp"

namespace casdiff {

enum class ParamInit { fan_in_uniform, zeros, ones };

/// Named, ordered collection of trainable tensors.
///
/// Initial values depend only on (seed, name), never on creation order. A
/// store built with allocate = false only records shapes, for counting.
template <typename T>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0, bool allocate = true) : seed_(seed), allocate_(allocate) {}

  Var<T> create(const std::string& name, std::vector<int> shape, ParamInit init, int fan_in = 1);

  const std::vector<std::pair<std::string, Var<T>>>& entries() const { return entries_; }
  const std::vector<std::pair<std::string, std::vector<int>>>& shapes() const { return shapes_; }

  /// Number of trainable scalars.
  std::size_t count() const;
  Var<T> find(const std::string& name) const;
  void zero_grad();

 private:
  std::uint64_t seed_;
  bool allocate_;
  std::vector<std::pair<std::string, Var<T>>> entries_;
  std::vector<std::pair<std::string, std::vector<int>>> shapes_;
};

template <typename T>
struct Conv2d {
  Var<T> weight, bias;
  int stride = 1, pad = 1;

  Conv2d() = default;
  Conv2d(ParameterStore<T>& store, const std::string& name, int cin, int cout, int kernel, int stride = 1,
         bool zero_init = false);
  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
};

template <typename T>
struct Linear {
  Var<T> weight, bias;

  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, int din, int dout, bool zero_init = false);
  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }
};

template <typename T>
struct GroupNorm {
  Var<T> gamma, beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(ParameterStore<T>& store, const std::string& name, int channels, int max_groups);
  Var<T> operator()(const Var<T>& x) const { return ops::group_norm(x, gamma, beta, groups); }
};

template <typename T>
struct LayerNorm {
  Var<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& name, int dim);
  Var<T> operator()(const Var<T>& x) const { return ops::layer_norm(x, gamma, beta); }
};

/// (N) scalars -> (N, dim) sin/cos features at geometric frequencies.
template <typename T>
Tensor<T> sinusoidal_embedding(const std::vector<double>& values, int dim);

}  // namespace casdiff
