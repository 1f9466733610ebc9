#pragma once

#include <cstdint>
#include <vector>

#include "casdiff/conditioning.hpp"
#include "casdiff/diffusion.hpp"

namespace casdiff {

struct GuidanceConfig {
  double w = 3.0;
  bool clip_xhat = true;
  int num_steps = 256;
  /// When false the null conditioning is never evaluated; only valid at w = 1.
  bool evaluate_uncond = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const GuidanceConfig& g);
void from_json(const nlohmann::json& j, GuidanceConfig& g);

/// w * eps_cond + (1 - w) * eps_uncond
template <typename T>
Tensor<T> guided_eps(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double w);

/// Ancestral sampling for a batch. Item i draws all of its noise from
/// rngs[i], so results do not depend on how items are grouped.
template <typename T>
std::vector<Tensor<T>> sample_batch(const DenoiserModel<T>& model, const std::vector<const TextConditioning*>& conds,
                                    const TextConditioning& null_cond, const NoiseSchedule& schedule,
                                    const GuidanceConfig& guidance, const std::vector<int>& shape,
                                    std::vector<Rng>& rngs, const std::vector<AugmentedLowRes<T>>* lowres = nullptr,
                                    int max_batch = 64);

/// One image of the given (C,H,W) shape, in [-1,1].
template <typename T>
Tensor<T> sample(const DenoiserModel<T>& model, const TextConditioning& cond, const TextConditioning& null_cond,
                 const NoiseSchedule& schedule, const GuidanceConfig& guidance, const std::vector<int>& shape,
                 Rng& rng, const AugmentedLowRes<T>* lowres = nullptr);

}  // namespace casdiff
