// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nmtforge/numerics/graph.h"

namespace nmtforge {

struct GradCheckResult {
  Real max_rel_error = 0.0;
  size_t coordinates = 0;
  // "<tensor>[<index>]" of the worst coordinate.
  std::string worst;
  Real worst_analytic = 0.0;
  Real worst_numeric = 0.0;
};

struct GradCheckOptions {
  Real h = 1e-5;
  // Five-point stencil (error O(h^4)) instead of the two-point central
  // difference; lets a larger h keep roundoff down on tiny gradients.
  bool five_point = false;
  // Coordinates sampled per tensor; 0 checks every coordinate.
  size_t max_coords_per_tensor = 0;
  uint64_t seed = 0;
  // grad_check_params only: parameters to check (all when empty).
  std::function<bool(const std::string&)> include;
};

// Scalar function of leaf variables, rebuilt on every evaluation.
using ScalarFn = std::function<Var(Graph&, std::span<const Var>)>;

// Compares backward() against central differences. Relative error per
// coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor> inputs,
                           const GradCheckOptions& options = {});

// Same check over named parameters that f binds via Graph::param. The store is
// perturbed in place and restored.
GradCheckResult grad_check_params(const std::function<Var(Graph&)>& f, ParameterStore& params,
                                  const GradCheckOptions& options = {});

}  // namespace nmtforge
