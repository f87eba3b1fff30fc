#pragma once

#include <cmath>
#include <vector>

#include "tilessl/error.hpp"
#include "tilessl/params.hpp"

namespace tilessl {

struct LarsConfig {
  double base_lr = 0.3;
  double weight_decay = 1.5e-6;
  double trust = 0.001;
  double momentum = 0.0;
};

struct LarsState {
  std::vector<std::vector<double>> velocity;
};

// Layer-wise adaptive step. Bias-like tensors skip both the trust ratio and weight decay.
inline void lars_step(ParamList params, const GradList& grads, const LarsConfig& config, LarsState& state) {
  if (!(config.base_lr > 0.0)) throw ConfigError("LARS base_lr must be positive");
  require_congruent(params, grads);
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (const auto& p : params) state.velocity.emplace_back(p.values.size(), 0.0);
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto w = params[t].values;
    const auto g = grads[t].values;
    auto& v = state.velocity[t];
    if (params[t].bias_like) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = config.momentum * v[i] + config.base_lr * g[i];
        w[i] -= v[i];
      }
      continue;
    }
    double wn = 0.0, gn = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      wn += w[i] * w[i];
      gn += g[i] * g[i];
    }
    wn = std::sqrt(wn);
    gn = std::sqrt(gn);
    const double denom = gn + config.weight_decay * wn;
    const double local_lr = (wn > 0.0 && denom > 0.0) ? config.trust * wn / denom : 0.0;
    const double scale = config.base_lr * local_lr;
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = config.momentum * v[i] + scale * (g[i] + config.weight_decay * w[i]);
      w[i] -= v[i];
    }
  }
}

inline void lars_step(ParamList params, const GradList& grads, const LarsConfig& config) {
  LarsState scratch;
  lars_step(std::move(params), grads, config, scratch);
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  bool decoupled = false;  // AdamW
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;
};

inline void adam_step(ParamList params, const GradList& grads, const AdamConfig& config, AdamState& state) {
  require_congruent(params, grads);
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.emplace_back(p.values.size(), 0.0);
      state.v.emplace_back(p.values.size(), 0.0);
    }
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto w = params[t].values;
    const auto g = grads[t].values;
    auto& m = state.m[t];
    auto& v = state.v[t];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = config.decoupled ? g[i] : g[i] + config.weight_decay * w[i];
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
      if (config.decoupled) w[i] -= config.lr * config.weight_decay * w[i];
      w[i] -= config.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
    }
  }
}

}  // namespace tilessl
