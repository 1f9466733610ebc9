#include "casdiff/optim.hpp"

#include <algorithm>
#include <cmath>

namespace casdiff {

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::adam ? "adaptive-moment" : "memory-lean-adaptive";
}

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "adaptive-moment" || name == "adam") return OptimizerKind::adam;
  if (name == "memory-lean-adaptive" || name == "adafactor") return OptimizerKind::adafactor;
  throw ConfigError("unknown optimizer kind '" + name + "'");
}

Tensor<float>& Optimizer::slot(const std::string& name, const std::vector<int>& shape) {
  for (auto& [n, t] : state_)
    if (n == name) return t;
  state_.emplace_back(name, Tensor<float>(shape));
  return state_.back().second;
}

void Optimizer::load_state(std::vector<std::pair<std::string, Tensor<float>>> state, std::int64_t steps) {
  state_ = std::move(state);
  steps_ = steps;
}

void Optimizer::step(ParameterStore<float>& params, double lr) {
  ++steps_;
  for (auto& [name, var] : params.entries()) {
    if (!var || var->grad.size() != var->value.size()) continue;
    if (config_.kind == OptimizerKind::adam)
      adam_update(name, var->value, var->grad, lr);
    else
      adafactor_update(name, var->value, var->grad, lr);
  }
}

void Optimizer::adam_update(const std::string& name, Tensor<float>& p, const Tensor<float>& g, double lr) {
  Tensor<float>& m = slot(name + "/m", p.shape());
  Tensor<float>& v = slot(name + "/v", p.shape());
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i];
    const double mi = b1 * m[i] + (1.0 - b1) * gi;
    const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    p[i] = static_cast<float>(p[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + config_.eps));
  }
}

void Optimizer::adafactor_update(const std::string& name, Tensor<float>& p, const Tensor<float>& g, double lr) {
  const double b2 = 1.0 - std::pow(static_cast<double>(steps_), -config_.decay_rate);
  const double e1 = config_.eps1;
  std::vector<double> u(p.size());
  if (p.rank() >= 2) {
    // Weights are viewed as (rows, cols) with rows = leading axis.
    const int rows = p.dim(0);
    const std::size_t cols = p.size() / static_cast<std::size_t>(rows);
    Tensor<float>& vr = slot(name + "/vr", {rows});
    Tensor<float>& vc = slot(name + "/vc", {static_cast<int>(cols)});
    std::vector<double> rmean(static_cast<std::size_t>(rows), 0.0), cmean(cols, 0.0);
    for (int r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const double gi = g[static_cast<std::size_t>(r) * cols + c];
        const double sq = gi * gi + e1;
        rmean[static_cast<std::size_t>(r)] += sq / static_cast<double>(cols);
        cmean[c] += sq / rows;
      }
    }
    double rsum = 0;
    for (int r = 0; r < rows; ++r) {
      vr[static_cast<std::size_t>(r)] =
          static_cast<float>(b2 * vr[static_cast<std::size_t>(r)] + (1.0 - b2) * rmean[static_cast<std::size_t>(r)]);
      rsum += vr[static_cast<std::size_t>(r)];
    }
    for (std::size_t c = 0; c < cols; ++c) vc[c] = static_cast<float>(b2 * vc[c] + (1.0 - b2) * cmean[c]);
    const double rmean_all = std::max(rsum / rows, 1e-300);
    for (int r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * cols + c;
        const double v = static_cast<double>(vr[static_cast<std::size_t>(r)]) * vc[c] / rmean_all;
        u[i] = g[i] / std::sqrt(std::max(v, 1e-300));
      }
    }
  } else {
    Tensor<float>& v = slot(name + "/v", p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * (gi * gi + e1));
      u[i] = gi / std::sqrt(std::max(static_cast<double>(v[i]), 1e-300));
    }
  }

  double ss = 0;
  for (double x : u) ss += x * x;
  const double rms = std::sqrt(ss / static_cast<double>(u.size()));
  const double scale = 1.0 / std::max(1.0, rms / config_.clip_threshold);
  if (config_.adafactor_beta1 > 0.0) {
    Tensor<float>& m = slot(name + "/m", p.shape());
    const double b1 = config_.adafactor_beta1;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * u[i] * scale);
      p[i] = static_cast<float>(p[i] - lr * m[i]);
    }
  } else {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(p[i] - lr * u[i] * scale);
  }
}

double global_grad_norm(const ParameterStore<float>& params) {
  double ss = 0;
  for (const auto& [_, var] : params.entries()) {
    if (!var) continue;
    for (float g : var->grad.values()) ss += static_cast<double>(g) * g;
  }
  return std::sqrt(ss);
}

double clip_grad_norm(ParameterStore<float>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto& [_, var] : params.entries()) {
      if (!var) continue;
      for (auto& g : var->grad.values()) g *= s;
    }
  }
  return norm;
}

}  // namespace casdiff
