#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "casdiff/layers.hpp"

namespace casdiff {

/// adam = "adaptive-moment"; adafactor = "memory-lean-adaptive" (factored
/// second moments).
enum class OptimizerKind { adam, adafactor };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Adafactor
  double decay_rate = 0.8;  // beta2_t = 1 - t^-decay_rate
  double eps1 = 1e-30;
  double clip_threshold = 1.0;
  double adafactor_beta1 = 0.0;
};

/// Applies one update to every parameter from its accumulated gradient.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

  const OptimizerConfig& config() const { return config_; }
  std::int64_t steps() const { return steps_; }

  void step(ParameterStore<float>& params, double lr);

  /// Named moment tensors, for checkpoints.
  const std::vector<std::pair<std::string, Tensor<float>>>& state() const { return state_; }
  void load_state(std::vector<std::pair<std::string, Tensor<float>>> state, std::int64_t steps);

 private:
  Tensor<float>& slot(const std::string& name, const std::vector<int>& shape);
  void adam_update(const std::string& name, Tensor<float>& p, const Tensor<float>& g, double lr);
  void adafactor_update(const std::string& name, Tensor<float>& p, const Tensor<float>& g, double lr);

  OptimizerConfig config_;
  std::int64_t steps_ = 0;
  std::vector<std::pair<std::string, Tensor<float>>> state_;
};

/// Global L2 norm of all gradients (missing gradients count as zero).
double global_grad_norm(const ParameterStore<float>& params);

/// Scales every gradient so the global norm is at most max_norm; returns the
/// norm before clipping.
double clip_grad_norm(ParameterStore<float>& params, double max_norm);

}  // namespace casdiff
