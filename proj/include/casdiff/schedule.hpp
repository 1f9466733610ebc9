#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace casdiff {

enum class ScheduleKind { cosine, linear_snr };

/// Continuous-time variance-preserving noise schedule on t in [0,1].
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::cosine;
  double t_min = 1e-3;
  double t_max = 0.999;
  int num_sample_steps = 256;

  /// Throws InvalidArgument when the fields are out of range.
  void validate() const;
};

struct AlphaSigma {
  double alpha;
  double sigma;
};

/// (alpha_t, sigma_t) with t clamped into [t_min, t_max]; non-finite t throws.
AlphaSigma alpha_sigma(const NoiseSchedule& schedule, double t);

/// log(alpha_t^2 / sigma_t^2)
double log_snr(const NoiseSchedule& schedule, double t);

enum class LossWeighting { snr_clipped, constant };

/// How w_t in the denoising objective is chosen. Both options are
/// interpretations; the default clips the signal-to-noise ratio at 5.
struct LossWeightPolicy {
  LossWeighting kind = LossWeighting::snr_clipped;
  double snr_clip = 5.0;
};

double loss_weight(const NoiseSchedule& schedule, double t, const LossWeightPolicy& policy = {});

/// num_sample_steps + 1 uniformly spaced times from t_max down to t_min.
std::vector<double> discretize(const NoiseSchedule& schedule);

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& name);

void to_json(nlohmann::json& j, const NoiseSchedule& s);
void from_json(const nlohmann::json& j, NoiseSchedule& s);

}  // namespace casdiff
