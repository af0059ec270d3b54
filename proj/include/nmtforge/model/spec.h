// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nmtforge/numerics/tensor.h"

namespace nmtforge {

enum class Family { transformer, dtmt };
enum class DecoderSelfAttention { standard, average };
enum class Direction { l2r, r2l };

// Architecture hyperparameters. Transformer fields (filter, layers, heads,
// prenorm, decoder_self_attention, positional) are ignored by DTMT, which
// uses hidden plus the transition-block fields.
struct ModelSpec {
  std::string name = "custom";
  Family family = Family::transformer;
  int hidden = 64;
  int filter = 256;
  int enc_layers = 2;
  int dec_layers = 1;
  int heads = 4;
  bool prenorm = true;
  DecoderSelfAttention decoder_self_attention = DecoderSelfAttention::standard;
  bool positional = true;
  int lgru_per_block = 1;
  int tgru_per_block = 4;
  bool bidirectional_encoder = true;
  Direction direction = Direction::l2r;

  // Throws SpecError.
  void validate() const;

  // "key=value" lines.
  std::string to_text() const;
  static ModelSpec from_text(const std::string& text);

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

std::string to_string(Family f);
std::string to_string(DecoderSelfAttention a);
std::string to_string(Direction d);

// Named configurations: "deeper", "wider", "aan", "dtmt" (toy scale),
// "micro-deeper", "micro-wider", "micro-aan", "micro-dtmt" (pipeline scale)
// and "full-deeper", "full-wider", "full-aan", "full-dtmt".
ModelSpec preset(const std::string& name);
std::vector<std::string> preset_names();

enum class Init { xavier, embedding, zeros, ones };

struct ParamInfo {
  std::string name;
  Shape shape;
  Init init = Init::xavier;
  // Multiplies the initial values (scaled-down residual projections).
  double gain = 1.0;
};

// Every parameter of the architecture, in a fixed order. Building and loading
// both check against this list.
std::vector<ParamInfo> parameter_schema(const ModelSpec& spec, size_t src_vocab, size_t tgt_vocab);
int64_t schema_parameter_count(const ModelSpec& spec, size_t src_vocab, size_t tgt_vocab);

}  // namespace nmtforge
