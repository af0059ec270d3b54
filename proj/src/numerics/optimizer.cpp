// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/numerics/optimizer.h"

#include <algorithm>
#include <cmath>

#include "nmtforge/errors.h"

namespace nmtforge {

void OptimizerConfig::validate() const {
  if (!(0.0 < beta1 && beta1 < beta2 && beta2 < 1.0)) throw ConfigError("need 0 < beta1 < beta2 < 1");
  if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
  if (d_model < 1) throw ConfigError("d_model must be >= 1");
  if (!(epsilon > 0.0) || !(base_lr > 0.0)) throw ConfigError("epsilon and base_lr must be positive");
}

Real learning_rate(const OptimizerConfig& config, int64_t step) {
  if (step < 1) throw ConfigError("optimizer steps start at 1");
  const Real s = static_cast<Real>(step);
  const Real w = static_cast<Real>(config.warmup_steps);
  return config.base_lr / std::sqrt(static_cast<Real>(config.d_model)) *
         std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

Adam::Adam(OptimizerConfig config) : config_(config) { config_.validate(); }

void Adam::step(ParameterStore& params, const ParameterStore& grads, int64_t step) {
  const Real lr = learning_rate(config_, step);
  ++updates_;
  const Real c1 = 1.0 - std::pow(config_.beta1, static_cast<Real>(updates_));
  const Real c2 = 1.0 - std::pow(config_.beta2, static_cast<Real>(updates_));

  Real clip = 1.0;
  if (config_.clip_norm > 0.0) {
    Real sq = 0.0;
    for (const auto& [name, g] : grads) sq += g.matrix().squaredNorm();
    const Real norm = std::sqrt(sq);
    if (norm > config_.clip_norm) clip = config_.clip_norm / norm;
  }

  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    if (g.shape() != p.shape()) throw ShapeError("gradient shape mismatch for " + name);
    auto [mit, fresh] = m_.try_emplace(name, p.shape());
    auto vit = v_.try_emplace(name, p.shape()).first;
    auto m = mit->second.matrix().array();
    auto v = vit->second.matrix().array();
    const auto ga = g.matrix().array() * clip;
    m = config_.beta1 * m + (1.0 - config_.beta1) * ga;
    v = config_.beta2 * v + (1.0 - config_.beta2) * ga.square();
    p.matrix().array() -= lr * (m / c1) / ((v / c2).sqrt() + config_.epsilon);
  }
}

}  // namespace nmtforge
