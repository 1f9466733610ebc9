#include "casdiff/diffusion.hpp"

#include <algorithm>

#include "casdiff/ops.hpp"

namespace casdiff {

template <typename T>
NoisySample<T> forward_noise(const Tensor<T>& x, double t, const Tensor<T>& epsilon, const NoiseSchedule& schedule) {
  require_same_shape(x, epsilon, "forward_noise");
  const auto [alpha, sigma] = alpha_sigma(schedule, t);
  Tensor<T> z(x.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = static_cast<T>(alpha * static_cast<double>(x[i]) + sigma * static_cast<double>(epsilon[i]));
  }
  return {std::move(z), t, epsilon, x};
}

template <typename T>
Tensor<T> x_to_eps(const Tensor<T>& z, const Tensor<T>& x_hat, double t, const NoiseSchedule& schedule) {
  require_same_shape(z, x_hat, "x_to_eps");
  const auto [alpha, sigma] = alpha_sigma(schedule, t);
  Tensor<T> eps(z.shape());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    eps[i] = static_cast<T>((static_cast<double>(z[i]) - alpha * static_cast<double>(x_hat[i])) / sigma);
  }
  return eps;
}

template <typename T>
Tensor<T> eps_to_x(const Tensor<T>& z, const Tensor<T>& eps_hat, double t, const NoiseSchedule& schedule, bool clip) {
  require_same_shape(z, eps_hat, "eps_to_x");
  const auto [alpha, sigma] = alpha_sigma(schedule, t);
  Tensor<T> x(z.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = (static_cast<double>(z[i]) - sigma * static_cast<double>(eps_hat[i])) / alpha;
    x[i] = static_cast<T>(clip ? std::clamp(v, -1.0, 1.0) : v);
  }
  return x;
}

template <typename T>
Tensor<T> standard_normal(const std::vector<int>& shape, Rng& rng) {
  Tensor<T> out(shape);
  for (auto& v : out.values()) v = static_cast<T>(rng.normal());
  return out;
}

template <typename T>
LossDraws<T> draw_loss_noise(std::span<const LossItem<T>> batch, const NoiseSchedule& schedule, Rng& rng) {
  LossDraws<T> draws;
  for (const auto& item : batch) {
    draws.t.push_back(rng.uniform(schedule.t_min, schedule.t_max));
    draws.epsilon.push_back(standard_normal<T>(item.x.shape(), rng));
  }
  return draws;
}

template <typename T>
Var<T> denoising_loss(const DenoiserModel<T>& model, std::span<const LossItem<T>> batch,
                      const NoiseSchedule& schedule, const LossDraws<T>& draws, const LossWeightPolicy& policy) {
  if (batch.empty()) throw InvalidArgument("denoising_loss: empty batch");
  if (draws.t.size() != batch.size() || draws.epsilon.size() != batch.size())
    throw InvalidArgument("denoising_loss: draws do not match batch");

  ModelInput<T> input;
  std::vector<Tensor<T>> noisy, clean, lowres;
  std::vector<double> weights;
  const bool with_lowres = batch.front().lowres.has_value();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& item = batch[i];
    if (!item.cond) throw InvalidArgument("denoising_loss: missing conditioning");
    if (item.lowres.has_value() != with_lowres)
      throw InvalidArgument("denoising_loss: mixed low-resolution conditioning in one batch");
    noisy.push_back(forward_noise(item.x, draws.t[i], draws.epsilon[i], schedule).z);
    clean.push_back(item.x);
    input.t.push_back(draws.t[i]);
    input.cond.push_back(item.cond);
    weights.push_back(loss_weight(schedule, draws.t[i], policy));
    if (with_lowres) {
      lowres.push_back(*item.lowres);
      input.aug_level.push_back(item.aug_level);
    }
  }
  if (model.needs_lowres && !with_lowres) throw InvalidArgument("denoising_loss: model needs low-resolution input");
  input.z = stack<T>(noisy);
  if (with_lowres) input.lowres = stack<T>(lowres);
  Var<T> x_hat = model.predict(input);
  return ops::weighted_mse<T>(x_hat, stack<T>(clean), weights);
}

template <typename T>
Var<T> denoising_loss(const DenoiserModel<T>& model, std::span<const LossItem<T>> batch,
                      const NoiseSchedule& schedule, Rng& rng, const LossWeightPolicy& policy) {
  if (batch.empty()) throw InvalidArgument("denoising_loss: empty batch");
  const auto draws = draw_loss_noise(batch, schedule, rng);
  return denoising_loss(model, batch, schedule, draws, policy);
}

#define CASDIFF_INSTANTIATE_DIFFUSION(T)                                                                       \
  template NoisySample<T> forward_noise<T>(const Tensor<T>&, double, const Tensor<T>&, const NoiseSchedule&);  \
  template Tensor<T> x_to_eps<T>(const Tensor<T>&, const Tensor<T>&, double, const NoiseSchedule&);            \
  template Tensor<T> eps_to_x<T>(const Tensor<T>&, const Tensor<T>&, double, const NoiseSchedule&, bool);      \
  template Tensor<T> standard_normal<T>(const std::vector<int>&, Rng&);                                        \
  template LossDraws<T> draw_loss_noise<T>(std::span<const LossItem<T>>, const NoiseSchedule&, Rng&);          \
  template Var<T> denoising_loss<T>(const DenoiserModel<T>&, std::span<const LossItem<T>>,                     \
                                    const NoiseSchedule&, const LossDraws<T>&, const LossWeightPolicy&);       \
  template Var<T> denoising_loss<T>(const DenoiserModel<T>&, std::span<const LossItem<T>>,                     \
                                    const NoiseSchedule&, Rng&, const LossWeightPolicy&);

CASDIFF_INSTANTIATE_DIFFUSION(float)
CASDIFF_INSTANTIATE_DIFFUSION(double)

}  // namespace casdiff
