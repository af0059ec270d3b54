// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "nmtforge/model/layers.h"
#include "nmtforge/model/model.h"

namespace nmtforge {

class Architecture {
 public:
  virtual ~Architecture() = default;
  virtual Var encode(Graph& g, const ParameterStore& ps, const std::vector<Ids>& src) const = 0;
  virtual Var forward(Graph& g, const ParameterStore& ps, const Batch& batch,
                      const ForwardOptions& options) const = 0;
  virtual std::unique_ptr<DecoderState> start(const ParameterStore& ps, const std::vector<Ids>& src) const = 0;
  virtual Tensor step(const ParameterStore& ps, DecoderState& state, std::span<const int> last) const = 0;
};

std::shared_ptr<const Architecture> make_transformer(const ModelSpec& spec);
std::shared_ptr<const Architecture> make_dtmt(const ModelSpec& spec);

// Helpers shared by the architectures.
std::vector<int64_t> offsets_of(const std::vector<Ids>& seqs);
Ids flatten(const std::vector<Ids>& seqs);

}  // namespace nmtforge
