// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "nmtforge/numerics/ops.h"

namespace nmtforge {

// Binds parameters of a store to a graph by name.
class Params {
 public:
  Params(Graph& g, const ParameterStore& store) : g_(g), store_(store) {}
  Var operator()(const std::string& name) const;
  Graph& graph() const { return g_; }
  const ParameterStore& store() const { return store_; }

 private:
  Graph& g_;
  const ParameterStore& store_;
};

// x * <prefix>.w + <prefix>.b (bias skipped when absent from the store).
Var linear(const Params& p, const std::string& prefix, Var x);
Var norm(const Params& p, const std::string& prefix, Var x);
// relu(x W1 + b1) W2 + b2
Var feed_forward(const Params& p, const std::string& prefix, Var x);

// Rows of sinusoidal position encodings for positions [start, start + n).
Tensor sinusoidal_positions(int64_t start, int64_t n, int64_t dim);

// Linear-transformation enhanced GRU:
//   [r, z, l] = sigmoid(x Wg + h Ug + bg)
//   c  = tanh(x Wh + (r * h) Uh + bh) + l * (x Hl)
//   h' = (1 - z) * h + z * c
Var lgru_step(const Params& p, const std::string& prefix, Var x, Var h);
// Transition GRU: the same update with no input.
//   [r, z] = sigmoid(h Ug + bg);  c = tanh((r * h) Uh + bh)
Var tgru_step(const Params& p, const std::string& prefix, Var h);

}  // namespace nmtforge
