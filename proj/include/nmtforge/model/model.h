// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nmtforge/corpus/corpus.h"
#include "nmtforge/model/spec.h"
#include "nmtforge/numerics/ops.h"
#include "nmtforge/text/vocab.h"

namespace nmtforge {

using Ids = std::vector<int>;

// Teacher-forcing batch. src rows end with </s>; tgt_in = <s> y, tgt_out = y </s>.
// Sequences are ragged and flattened in batch order wherever rows are stacked.
struct Batch {
  std::vector<Ids> src;
  std::vector<Ids> tgt_in;
  std::vector<Ids> tgt_out;

  size_t size() const { return src.size(); }
  size_t target_tokens() const;
  std::vector<int64_t> src_offsets() const;
  std::vector<int64_t> tgt_offsets() const;
  Ids flat_tgt_out() const;
};

// src/tgt hold token ids without </s> or <s>.
Batch make_batch(const std::vector<Ids>& src, const std::vector<Ids>& tgt);

// Per-hypothesis decoder memory for incremental decoding. Rows are
// hypotheses; select() re-indexes them (duplication allowed) after a beam step.
class DecoderState {
 public:
  virtual ~DecoderState() = default;
  virtual size_t rows() const = 0;
  // Number of target tokens consumed so far.
  virtual size_t steps() const = 0;
  virtual void select(std::span<const size_t> rows) = 0;
};

class Architecture;

// Anything that can score next tokens incrementally: models, ensembles,
// hand-built test distributions.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual size_t target_vocab_size() const = 0;
  // Null when the scorer has no vocabulary object (test fixtures).
  virtual const Vocabulary* target_vocabulary() const { return nullptr; }
  virtual Direction direction() const { return Direction::l2r; }
  // One row per source.
  virtual std::unique_ptr<DecoderState> start(const std::vector<Ids>& src) const = 0;
  // Feeds the last token of every row; returns next-token log-probabilities
  // (rows x target_vocab_size).
  virtual Tensor step(DecoderState& state, std::span<const int> last_tokens) const = 0;
};

struct ForwardOptions {
  // DTMT only: receives one (1 x src_len) attention row per logits row.
  std::vector<Tensor>* attention_weights = nullptr;
};

// A model: spec, vocabularies and parameters, plus the architecture code.
// Copies are independent (parameters are values).
class Model : public Scorer {
 public:
  Model(ModelSpec spec, Vocabulary src_vocab, Vocabulary tgt_vocab, ParameterStore params);

  // Fresh parameters from the schema; deterministic in seed.
  static Model build(const ModelSpec& spec, const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                     uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  const Vocabulary& src_vocab() const { return src_vocab_; }
  const Vocabulary& tgt_vocab() const { return tgt_vocab_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  int64_t parameter_count() const { return nmtforge::parameter_count(params_); }

  // Optimizer steps taken so far (continues across finetuning).
  int64_t trained_steps = 0;
  // Free-form training history, one event per line.
  std::string lineage;

  // Encoder states, rows stacked over the batch.
  Var encode(Graph& g, const std::vector<Ids>& src) const;
  // Logits for every row of batch.tgt_out, stacked: (target_tokens x |V_tgt|).
  Var forward(Graph& g, const Batch& batch, const ForwardOptions& options = {}) const;

  size_t target_vocab_size() const override { return tgt_vocab_.size(); }
  const Vocabulary* target_vocabulary() const override { return &tgt_vocab_; }
  Direction direction() const override { return spec_.direction; }
  std::unique_ptr<DecoderState> start(const std::vector<Ids>& src) const override;
  Tensor step(DecoderState& state, std::span<const int> last_tokens) const override;

 private:
  void check_ids(const std::vector<Ids>& seqs, size_t vocab, const char* side) const;

  ModelSpec spec_;
  Vocabulary src_vocab_;
  Vocabulary tgt_vocab_;
  ParameterStore params_;
  std::shared_ptr<const Architecture> arch_;
};

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

// Target-side reversal for right-to-left models.
ParallelCorpus r2l_wrap(const ParallelCorpus& corpus);
std::vector<Tokens> r2l_unwrap(const std::vector<Tokens>& lines);

}  // namespace nmtforge
