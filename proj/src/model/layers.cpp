// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/model/layers.h"

#include <cmath>

#include "nmtforge/errors.h"

namespace nmtforge {

Var Params::operator()(const std::string& name) const {
  auto it = store_.find(name);
  if (it == store_.end()) throw SpecError("missing parameter '" + name + "'");
  return g_.param(name, it->second);
}

Var linear(const Params& p, const std::string& prefix, Var x) {
  Var y = matmul(x, p(prefix + ".w"));
  if (p.store().count(prefix + ".b")) y = add(y, p(prefix + ".b"));
  return y;
}

Var norm(const Params& p, const std::string& prefix, Var x) {
  return layer_norm(x, p(prefix + ".g"), p(prefix + ".b"));
}

Var feed_forward(const Params& p, const std::string& prefix, Var x) {
  return linear(p, prefix + ".2", relu(linear(p, prefix + ".1", x)));
}

Tensor sinusoidal_positions(int64_t start, int64_t n, int64_t dim) {
  Tensor pe({n, dim});
  for (int64_t r = 0; r < n; ++r) {
    const double pos = static_cast<double>(start + r);
    for (int64_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      pe(r, i) = std::sin(pos * freq);
      if (i + 1 < dim) pe(r, i + 1) = std::cos(pos * freq);
    }
  }
  return pe;
}

Var lgru_step(const Params& p, const std::string& prefix, Var x, Var h) {
  const int64_t hd = h.cols();
  Var gates = sigmoid(add(add(matmul(x, p(prefix + ".wg")), matmul(h, p(prefix + ".ug"))), p(prefix + ".bg")));
  Var r = slice(gates, 1, 0, hd);
  Var z = slice(gates, 1, hd, 2 * hd);
  Var l = slice(gates, 1, 2 * hd, 3 * hd);
  Var cand = tanh(add(add(matmul(x, p(prefix + ".wh")), matmul(mul(r, h), p(prefix + ".uh"))), p(prefix + ".bh")));
  cand = add(cand, mul(l, matmul(x, p(prefix + ".hl"))));
  // (1 - z) h + z c  ==  h + z (c - h)
  return add(h, mul(z, sub(cand, h)));
}

Var tgru_step(const Params& p, const std::string& prefix, Var h) {
  const int64_t hd = h.cols();
  Var gates = sigmoid(add(matmul(h, p(prefix + ".ug")), p(prefix + ".bg")));
  Var r = slice(gates, 1, 0, hd);
  Var z = slice(gates, 1, hd, 2 * hd);
  Var cand = tanh(add(matmul(mul(r, h), p(prefix + ".uh")), p(prefix + ".bh")));
  return add(h, mul(z, sub(cand, h)));
}

}  // namespace nmtforge
