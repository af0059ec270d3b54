// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "nmtforge/corpus/corpus.h"

namespace nmtforge {

enum class ToyTask { copy, reverse, lexicon_swap };

std::string to_string(ToyTask t);
ToyTask parse_toy_task(const std::string& s);

// Synthetic translation task. vocab_size counts the four reserved model ids,
// so each language has vocab_size - 4 word types. Token frequencies follow a
// Zipf law over a seeded ranking; domain_shift in [0, 1] blends it towards
// the reversed ranking, which turns rare words into frequent ones.
struct ToyTaskSpec {
  ToyTask task = ToyTask::lexicon_swap;
  int vocab_size = 50;
  int min_len = 1;
  int max_len = 12;
  int pairs = 1000;
  double domain_shift = 0.0;
  double zipf_exponent = 1.0;
  // Seeds the language itself (lexicon and frequency ranking). Corpora that
  // should share a language share this seed.
  uint64_t language_seed = 1;
  // Seeds the sentence sampling.
  uint64_t seed = 0;

  void validate() const;
};

std::vector<std::string> toy_source_types(const ToyTaskSpec& spec);
// Source word -> target word; identity for copy and reverse.
std::map<std::string, std::string> toy_lexicon(const ToyTaskSpec& spec);
std::vector<double> toy_unigram(const ToyTaskSpec& spec);

Tokens toy_translate(const ToyTaskSpec& spec, const Tokens& source);
ParallelCorpus gen_toy(const ToyTaskSpec& spec);

}  // namespace nmtforge
