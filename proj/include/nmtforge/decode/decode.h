// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nmtforge/model/model.h"
#include "nmtforge/text/bpe.h"
#include "nmtforge/text/truecase.h"

namespace nmtforge {

enum class DecodeMode { greedy, beam, sample };
enum class EnsembleCombine { arithmetic, geometric };

std::string to_string(DecodeMode m);
DecodeMode parse_decode_mode(const std::string& s);

struct DecodeConfig {
  DecodeMode mode = DecodeMode::beam;
  int beam_size = 4;
  double alpha = 0.6;
  double temperature = 1.0;
  // 0 = 2 * source length + 10.
  int max_len = 0;
  uint64_t seed = 0;
  EnsembleCombine combine = EnsembleCombine::arithmetic;
  // Sources decoded together per batch.
  int batch_sources = 64;

  void validate() const;
};

// tokens ends with </s> when finished; truncated hypotheses (max_len reached)
// have no </s>.
struct Hypothesis {
  Ids tokens;
  double log_prob = 0.0;
  double score = 0.0;
  bool finished = false;

  // Tokens without the trailing </s>.
  Ids output() const;
};

using CandidateSet = std::vector<Hypothesis>;

// ((5 + len) / 6)^alpha
double length_penalty(size_t len, double alpha);

// Averages member next-token distributions: arithmetic mean of
// probabilities (default) or normalized geometric mean. Members must share
// the target vocabulary (EnsembleError otherwise).
class Ensemble : public Scorer {
 public:
  Ensemble(std::vector<const Scorer*> members, EnsembleCombine combine = EnsembleCombine::arithmetic);

  size_t target_vocab_size() const override { return members_.front()->target_vocab_size(); }
  const Vocabulary* target_vocabulary() const override { return members_.front()->target_vocabulary(); }
  Direction direction() const override { return members_.front()->direction(); }
  std::unique_ptr<DecoderState> start(const std::vector<Ids>& src) const override;
  Tensor step(DecoderState& state, std::span<const int> last_tokens) const override;

 private:
  std::vector<const Scorer*> members_;
  EnsembleCombine combine_;
};

// One candidate set per source, best first, at most beam_size entries.
std::vector<CandidateSet> beam_search(const Scorer& scorer, const std::vector<Ids>& sources, const DecodeConfig& config);
std::vector<Hypothesis> greedy_decode(const Scorer& scorer, const std::vector<Ids>& sources, const DecodeConfig& config);
// Ancestral sampling from softmax(log p / temperature). Source i uses its own
// stream derived from (config.seed, i).
std::vector<Hypothesis> sample_decode(const Scorer& scorer, const std::vector<Ids>& sources, const DecodeConfig& config);
// Dispatches on config.mode; returns the best (or sampled) hypothesis per source.
std::vector<Hypothesis> decode(const Scorer& scorer, const std::vector<Ids>& sources, const DecodeConfig& config);

// Token-level translation: encodes with the first model's source vocabulary,
// decodes, maps ids back to target tokens and undoes target reversal for
// right-to-left models.
std::vector<Tokens> translate_tokens(std::span<const Model* const> models, const std::vector<Tokens>& sources,
                                     const DecodeConfig& config);

// Text pre/post-processing around translate_tokens. Input lines go through
// normalize_punct, tokenize, truecase and source BPE (each when enabled);
// outputs through bpe_undo, detruecase and detokenize.
struct TextProcessing {
  bool normalize = false;
  bool tokenize = false;
  const Truecaser* truecaser = nullptr;
  const BpeModel* src_bpe = nullptr;
  bool target_bpe = false;
  bool detruecase = false;
  bool detokenize = false;
};

std::vector<std::string> translate_corpus(std::span<const Model* const> models, const std::vector<std::string>& lines,
                                          const DecodeConfig& config, const TextProcessing& text = {});

}  // namespace nmtforge
