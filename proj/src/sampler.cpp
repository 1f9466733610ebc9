#include "casdiff/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace casdiff {

void GuidanceConfig::validate() const {
  if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("guidance: w must be a finite value >= 0");
  if (num_steps < 1) throw InvalidArgument("guidance: num_steps must be >= 1");
  if (!evaluate_uncond && w != 1.0) throw InvalidArgument("guidance: skipping the null branch requires w = 1");
}

void to_json(nlohmann::json& j, const GuidanceConfig& g) {
  j = nlohmann::json{{"w", g.w}, {"clip_xhat", g.clip_xhat}, {"num_steps", g.num_steps}};
}

void from_json(const nlohmann::json& j, GuidanceConfig& g) {
  for (const auto& [key, _] : j.items()) {
    if (key != "w" && key != "clip_xhat" && key != "num_steps")
      throw ConfigError("guidance: unknown key '" + key + "'");
  }
  if (j.contains("w")) g.w = j.at("w").get<double>();
  if (j.contains("clip_xhat")) g.clip_xhat = j.at("clip_xhat").get<bool>();
  if (j.contains("num_steps")) g.num_steps = j.at("num_steps").get<int>();
}

template <typename T>
Tensor<T> guided_eps(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double w) {
  require_same_shape(eps_cond, eps_uncond, "guided_eps");
  if (w == 1.0) return eps_cond;
  if (w == 0.0) return eps_uncond;
  Tensor<T> out(eps_cond.shape());
  const T wc = static_cast<T>(w), wu = static_cast<T>(1.0 - w);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = wc * eps_cond[i] + wu * eps_uncond[i];
  return out;
}

namespace {

template <typename T>
Tensor<double> predict(const DenoiserModel<T>& model, const Tensor<double>& z, double t,
                       const std::vector<const TextConditioning*>& conds, const std::vector<AugmentedLowRes<T>>* lowres,
                       std::size_t first) {
  ModelInput<T> in;
  in.z = z.template cast<T>();
  in.t.assign(conds.size(), t);
  in.cond = conds;
  if (lowres) {
    std::vector<Tensor<T>> images;
    for (std::size_t i = 0; i < conds.size(); ++i) {
      images.push_back((*lowres)[first + i].image);
      in.aug_level.push_back((*lowres)[first + i].aug_level);
    }
    in.lowres = stack<T>(images);
  }
  Tensor<T> out = model.predict(in)->value;
  require_same_shape(out, in.z, "sampler: model output");
  return out.template cast<double>();
}

void check_finite(const Tensor<double>& v, std::size_t step, const char* what) {
  for (double x : v.values()) {
    if (!std::isfinite(x))
      throw NumericFailure("sampler: non-finite " + std::string(what) + " at step " + std::to_string(step));
  }
}

template <typename T>
std::vector<Tensor<T>> sample_chunk(const DenoiserModel<T>& model, const std::vector<const TextConditioning*>& conds,
                                    const TextConditioning& null_cond, const NoiseSchedule& schedule,
                                    const GuidanceConfig& guidance, const std::vector<int>& shape, Rng* rngs,
                                    const std::vector<AugmentedLowRes<T>>* lowres, std::size_t first) {
  NoiseSchedule grid_schedule = schedule;
  grid_schedule.num_sample_steps = guidance.num_steps;
  const std::vector<double> grid = discretize(grid_schedule);
  const int n = static_cast<int>(conds.size());
  const std::size_t item = Tensor<double>::count(shape);

  std::vector<int> batch_shape = shape;
  batch_shape.insert(batch_shape.begin(), n);
  Tensor<double> z(batch_shape);
  for (int i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < item; ++k) z[static_cast<std::size_t>(i) * item + k] = rngs[i].normal();
  }

  const std::vector<const TextConditioning*> nulls(conds.size(), &null_cond);
  const bool guided = guidance.evaluate_uncond;
  for (std::size_t step = 0; step + 1 < grid.size(); ++step) {
    const double t = grid[step], s = grid[step + 1];
    const Tensor<double> x_cond = predict(model, z, t, conds, lowres, first);
    Tensor<double> eps = x_to_eps(z, x_cond, t, schedule);
    if (guided) {
      const Tensor<double> x_uncond = predict(model, z, t, nulls, lowres, first);
      eps = guided_eps(eps, x_to_eps(z, x_uncond, t, schedule), guidance.w);
    }
    const bool last = step + 2 == grid.size();
    Tensor<double> x_hat = eps_to_x(z, eps, t, schedule, guidance.clip_xhat || last);
    check_finite(x_hat, step, "prediction");
    if (last) {
      std::vector<Tensor<T>> out;
      for (int i = 0; i < n; ++i) out.push_back(slice0(x_hat, i).template cast<T>().reshaped(shape));
      return out;
    }

    const auto [at, st] = alpha_sigma(schedule, t);
    const auto [as, ss] = alpha_sigma(schedule, s);
    const double a_ts = at / as;
    const double var_ts = std::max(st * st - a_ts * a_ts * ss * ss, 0.0);
    const double c_z = a_ts * ss * ss / (st * st);
    const double c_x = as * var_ts / (st * st);
    const double std_post = std::sqrt(var_ts * ss * ss / (st * st));
    for (int i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < item; ++k) {
        const std::size_t idx = static_cast<std::size_t>(i) * item + k;
        z[idx] = c_z * z[idx] + c_x * x_hat[idx] + std_post * rngs[i].normal();
      }
    }
    check_finite(z, step, "latent");
  }
  throw NumericFailure("sampler: empty timestep grid");
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> sample_batch(const DenoiserModel<T>& model, const std::vector<const TextConditioning*>& conds,
                                    const TextConditioning& null_cond, const NoiseSchedule& schedule,
                                    const GuidanceConfig& guidance, const std::vector<int>& shape,
                                    std::vector<Rng>& rngs, const std::vector<AugmentedLowRes<T>>* lowres,
                                    int max_batch) {
  guidance.validate();
  schedule.validate();
  if (shape.size() != 3) throw InvalidArgument("sampler: shape must be (C,H,W)");
  if (rngs.size() != conds.size()) throw InvalidArgument("sampler: need one rng per item");
  if (model.needs_lowres && !lowres) throw InvalidArgument("sampler: super-resolution model needs a low-resolution image");
  if (lowres && lowres->size() != conds.size()) throw InvalidArgument("sampler: need one low-resolution image per item");
  for (const auto* c : conds)
    if (!c) throw InvalidArgument("sampler: missing conditioning");

  NoGradGuard no_grad;
  std::vector<Tensor<T>> out;
  const std::size_t chunk = static_cast<std::size_t>(std::max(max_batch, 1));
  for (std::size_t first = 0; first < conds.size(); first += chunk) {
    const std::size_t last = std::min(conds.size(), first + chunk);
    const std::vector<const TextConditioning*> part(conds.begin() + static_cast<long>(first),
                                                    conds.begin() + static_cast<long>(last));
    auto images = sample_chunk(model, part, null_cond, schedule, guidance, shape, rngs.data() + first, lowres, first);
    for (auto& im : images) out.push_back(std::move(im));
  }
  return out;
}

template <typename T>
Tensor<T> sample(const DenoiserModel<T>& model, const TextConditioning& cond, const TextConditioning& null_cond,
                 const NoiseSchedule& schedule, const GuidanceConfig& guidance, const std::vector<int>& shape,
                 Rng& rng, const AugmentedLowRes<T>* lowres) {
  std::vector<Rng> rngs{rng};
  std::vector<AugmentedLowRes<T>> lr;
  if (lowres) lr.push_back(*lowres);
  auto out = sample_batch(model, {&cond}, null_cond, schedule, guidance, shape, rngs, lowres ? &lr : nullptr);
  rng = rngs.front();
  return std::move(out.front());
}

#define CASDIFF_INSTANTIATE_SAMPLER(T)                                                                            \
  template Tensor<T> guided_eps<T>(const Tensor<T>&, const Tensor<T>&, double);                                   \
  template std::vector<Tensor<T>> sample_batch<T>(const DenoiserModel<T>&, const std::vector<const TextConditioning*>&, \
                                                  const TextConditioning&, const NoiseSchedule&, const GuidanceConfig&, \
                                                  const std::vector<int>&, std::vector<Rng>&,                      \
                                                  const std::vector<AugmentedLowRes<T>>*, int);                    \
  template Tensor<T> sample<T>(const DenoiserModel<T>&, const TextConditioning&, const TextConditioning&,          \
                               const NoiseSchedule&, const GuidanceConfig&, const std::vector<int>&, Rng&,         \
                               const AugmentedLowRes<T>*);

CASDIFF_INSTANTIATE_SAMPLER(float)
CASDIFF_INSTANTIATE_SAMPLER(double)

}  // namespace casdiff
