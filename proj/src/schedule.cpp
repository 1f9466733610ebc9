#include "casdiff/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "casdiff/errors.hpp"

namespace casdiff {

namespace {

// log-SNR endpoints for the linear-SNR schedule.
constexpr double kLogSnrMax = 10.0;
constexpr double kLogSnrMin = -10.0;

double clamp_time(const NoiseSchedule& s, double t) {
  if (!std::isfinite(t)) throw InvalidArgument("schedule: non-finite time");
  return std::clamp(t, s.t_min, s.t_max);
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

void NoiseSchedule::validate() const {
  if (!(t_min > 0.0 && t_min < 1.0)) throw InvalidArgument("schedule: t_min must lie in (0,1)");
  if (!(t_max > 0.0 && t_max <= 1.0)) throw InvalidArgument("schedule: t_max must lie in (0,1]");
  if (!(t_min < t_max)) throw InvalidArgument("schedule: t_min must be below t_max");
  if (num_sample_steps < 1) throw InvalidArgument("schedule: num_sample_steps must be >= 1");
}

AlphaSigma alpha_sigma(const NoiseSchedule& schedule, double t) {
  t = clamp_time(schedule, t);
  switch (schedule.kind) {
    case ScheduleKind::cosine: {
      const double angle = 0.5 * std::numbers::pi * t;
      return {std::cos(angle), std::sin(angle)};
    }
    case ScheduleKind::linear_snr: {
      const double lambda = kLogSnrMax + (kLogSnrMin - kLogSnrMax) * t;
      return {std::sqrt(sigmoid(lambda)), std::sqrt(sigmoid(-lambda))};
    }
  }
  throw InvalidArgument("schedule: unknown kind");
}

double log_snr(const NoiseSchedule& schedule, double t) {
  const auto [a, s] = alpha_sigma(schedule, t);
  return 2.0 * (std::log(a) - std::log(s));
}

double loss_weight(const NoiseSchedule& schedule, double t, const LossWeightPolicy& policy) {
  const auto [a, s] = alpha_sigma(schedule, t);
  switch (policy.kind) {
    case LossWeighting::constant:
      return 1.0;
    case LossWeighting::snr_clipped:
      return std::min((a * a) / (s * s), policy.snr_clip);
  }
  return 1.0;
}

std::vector<double> discretize(const NoiseSchedule& schedule) {
  if (schedule.num_sample_steps < 1) throw InvalidArgument("discretize: num_sample_steps must be >= 1");
  const int n = schedule.num_sample_steps;
  const double span = schedule.t_max - schedule.t_min;
  std::vector<double> grid(static_cast<std::size_t>(n) + 1);
  for (int i = 0; i <= n; ++i) grid[static_cast<std::size_t>(i)] = schedule.t_max - span * i / n;
  grid.back() = schedule.t_min;
  return grid;
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::cosine ? "cosine" : "linear-snr"; }

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "cosine") return ScheduleKind::cosine;
  if (name == "linear-snr") return ScheduleKind::linear_snr;
  throw ConfigError("unknown schedule kind '" + name + "'");
}

void to_json(nlohmann::json& j, const NoiseSchedule& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)},
                     {"t_min", s.t_min},
                     {"t_max", s.t_max},
                     {"num_sample_steps", s.num_sample_steps}};
}

void from_json(const nlohmann::json& j, NoiseSchedule& s) {
  for (const auto& [key, _] : j.items()) {
    if (key != "kind" && key != "t_min" && key != "t_max" && key != "num_sample_steps")
      throw ConfigError("schedule: unknown key '" + key + "'");
  }
  if (j.contains("kind")) s.kind = schedule_kind_from_string(j.at("kind").get<std::string>());
  if (j.contains("t_min")) s.t_min = j.at("t_min").get<double>();
  if (j.contains("t_max")) s.t_max = j.at("t_max").get<double>();
  if (j.contains("num_sample_steps")) s.num_sample_steps = j.at("num_sample_steps").get<int>();
}

}  // namespace casdiff
