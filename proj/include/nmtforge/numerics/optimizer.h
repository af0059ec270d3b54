// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "nmtforge/numerics/tensor.h"

namespace nmtforge {

enum class LrSchedule { Noam };

struct OptimizerConfig {
  Real beta1 = 0.9;
  Real beta2 = 0.998;
  Real epsilon = 1e-9;
  Real base_lr = 2.0;
  int64_t warmup_steps = 8000;
  // Model width entering the d_model^-0.5 factor of the schedule.
  int64_t d_model = 512;
  // Global gradient-norm clip; 0 disables.
  Real clip_norm = 0.0;
  LrSchedule schedule = LrSchedule::Noam;

  void validate() const;
};

// base_lr * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5); step >= 1.
Real learning_rate(const OptimizerConfig& config, int64_t step);

// Dense Adam. The learning rate follows the schedule at `step`; bias
// correction counts this optimizer's own updates, so a fresh optimizer can
// continue a schedule (finetuning) without an undersized first step.
class Adam {
 public:
  explicit Adam(OptimizerConfig config);

  const OptimizerConfig& config() const { return config_; }
  // Applies one update. Parameters without a gradient entry are left alone.
  void step(ParameterStore& params, const ParameterStore& grads, int64_t step);

  const ParameterStore& first_moments() const { return m_; }
  const ParameterStore& second_moments() const { return v_; }
  int64_t updates() const { return updates_; }

 private:
  OptimizerConfig config_;
  ParameterStore m_;
  ParameterStore v_;
  int64_t updates_ = 0;
};

}  // namespace nmtforge
