// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/numerics/gradcheck.h"

#include <algorithm>
#include <cmath>

#include "nmtforge/numerics/rng.h"

namespace nmtforge {
namespace {

std::vector<int64_t> sample_coordinates(int64_t size, size_t max_coords, Rng& rng) {
  std::vector<int64_t> all(static_cast<size_t>(size));
  for (int64_t i = 0; i < size; ++i) all[static_cast<size_t>(i)] = i;
  if (max_coords == 0 || all.size() <= max_coords) return all;
  rng.shuffle(all);
  all.resize(max_coords);
  std::sort(all.begin(), all.end());
  return all;
}

Real relative_error(Real analytic, Real numeric) {
  const Real denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// Derivative at x of the function that `at` evaluates after setting the
// coordinate to its argument.
template <typename Eval>
Real numeric_derivative(Eval&& at, Real x, const GradCheckOptions& o) {
  const Real h = o.h;
  if (!o.five_point) return (at(x + h) - at(x - h)) / (2.0 * h);
  return (8.0 * (at(x + h) - at(x - h)) - (at(x + 2.0 * h) - at(x - 2.0 * h))) / (12.0 * h);
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor> inputs, const GradCheckOptions& options) {
  auto evaluate = [&](bool with_grad, std::vector<Tensor>* grads) {
    Graph g(with_grad);
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& t : inputs) vars.push_back(g.variable(t));
    Var loss = f(g, vars);
    const Real value = loss.value().item();
    if (grads) {
      g.backward(loss);
      grads->clear();
      for (Var v : vars) grads->push_back(g.grad_of(v));
    }
    return value;
  };

  std::vector<Tensor> analytic;
  evaluate(true, &analytic);

  GradCheckResult result;
  Rng rng(options.seed);
  for (size_t t = 0; t < inputs.size(); ++t) {
    for (int64_t i : sample_coordinates(inputs[t].size(), options.max_coords_per_tensor, rng)) {
      const Real saved = inputs[t][i];
      auto at = [&](Real x) {
        inputs[t][i] = x;
        return evaluate(false, nullptr);
      };
      const Real numeric = numeric_derivative(at, saved, options);
      inputs[t][i] = saved;
      const Real err = relative_error(analytic[t][i], numeric);
      ++result.coordinates;
      if (err > result.max_rel_error || result.worst.empty()) {
        result.max_rel_error = err;
        result.worst = "input" + std::to_string(t) + "[" + std::to_string(i) + "]";
        result.worst_analytic = analytic[t][i];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

GradCheckResult grad_check_params(const std::function<Var(Graph&)>& f, ParameterStore& params,
                                  const GradCheckOptions& options) {
  ParameterStore analytic;
  {
    Graph g(true);
    Var loss = f(g);
    g.backward(loss);
    analytic = g.param_grads();
  }
  auto evaluate = [&]() {
    Graph g(false);
    return f(g).value().item();
  };

  GradCheckResult result;
  Rng rng(options.seed);
  for (auto& [name, tensor] : params) {
    auto it = analytic.find(name);
    if (it == analytic.end()) continue;  // parameter not used by f
    if (options.include && !options.include(name)) continue;
    for (int64_t i : sample_coordinates(tensor.size(), options.max_coords_per_tensor, rng)) {
      const Real saved = tensor[i];
      auto at = [&](Real x) {
        tensor[i] = x;
        return evaluate();
      };
      const Real numeric = numeric_derivative(at, saved, options);
      tensor[i] = saved;
      const Real err = relative_error(it->second[i], numeric);
      ++result.coordinates;
      if (err > result.max_rel_error || result.worst.empty()) {
        result.max_rel_error = err;
        result.worst = name + "[" + std::to_string(i) + "]";
        result.worst_analytic = it->second[i];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace nmtforge
