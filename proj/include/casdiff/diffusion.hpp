#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "casdiff/autograd.hpp"
#include "casdiff/rng.hpp"
#include "casdiff/schedule.hpp"
#include "casdiff/text_conditioning.hpp"

namespace casdiff {

/// z_t = alpha_t x + sigma_t epsilon, with the ingredients kept alongside.
template <typename T>
struct NoisySample {
  Tensor<T> z;
  double t = 0;
  Tensor<T> epsilon;
  Tensor<T> x;
};

template <typename T>
struct ModelPrediction {
  Tensor<T> x_hat;
  Tensor<T> eps_hat;
  double t = 0;
};

template <typename T>
NoisySample<T> forward_noise(const Tensor<T>& x, double t, const Tensor<T>& epsilon, const NoiseSchedule& schedule);

/// eps = (z - alpha x_hat) / sigma
template <typename T>
Tensor<T> x_to_eps(const Tensor<T>& z, const Tensor<T>& x_hat, double t, const NoiseSchedule& schedule);

/// x = (z - sigma eps) / alpha, optionally clipped to [-1, 1].
template <typename T>
Tensor<T> eps_to_x(const Tensor<T>& z, const Tensor<T>& eps_hat, double t, const NoiseSchedule& schedule,
                   bool clip = false);

template <typename T>
Tensor<T> standard_normal(const std::vector<int>& shape, Rng& rng);

/// One batched call into a denoiser.
template <typename T>
struct ModelInput {
  Tensor<T> z;                                // (N,C,H,W)
  std::vector<double> t;                      // N
  std::vector<const TextConditioning*> cond;  // N
  std::optional<Tensor<T>> lowres;            // (N,C,h,w) augmented low-resolution image
  std::vector<double> aug_level;              // N, with lowres
};

/// Anything that maps noisy inputs to a clean-image estimate x_hat.
template <typename T>
struct DenoiserModel {
  std::function<Var<T>(const ModelInput<T>&)> predict;
  bool needs_lowres = false;
};

/// One training pair for the denoising objective.
template <typename T>
struct LossItem {
  Tensor<T> x;  // (C,H,W), in [-1,1]
  const TextConditioning* cond = nullptr;
  std::optional<Tensor<T>> lowres;
  double aug_level = 0;
};

/// The random draws that fully determine one loss evaluation.
template <typename T>
struct LossDraws {
  std::vector<double> t;
  std::vector<Tensor<T>> epsilon;
};

template <typename T>
LossDraws<T> draw_loss_noise(std::span<const LossItem<T>> batch, const NoiseSchedule& schedule, Rng& rng);

/// mean_n w_t ||x_hat(alpha x + sigma eps, c) - x||^2 with a mean over pixels
/// inside the norm, so the value does not depend on resolution.
template <typename T>
Var<T> denoising_loss(const DenoiserModel<T>& model, std::span<const LossItem<T>> batch,
                      const NoiseSchedule& schedule, const LossDraws<T>& draws, const LossWeightPolicy& policy = {});

/// Samples t ~ U[t_min, t_max] and eps ~ N(0, I) per item, then evaluates.
template <typename T>
Var<T> denoising_loss(const DenoiserModel<T>& model, std::span<const LossItem<T>> batch,
                      const NoiseSchedule& schedule, Rng& rng, const LossWeightPolicy& policy = {});

}  // namespace casdiff
