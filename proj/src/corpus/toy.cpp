// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/corpus/toy.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nmtforge/errors.h"
#include "nmtforge/numerics/rng.h"

namespace nmtforge {

std::string to_string(ToyTask t) {
  switch (t) {
    case ToyTask::copy: return "copy";
    case ToyTask::reverse: return "reverse";
    case ToyTask::lexicon_swap: return "lexicon_swap";
  }
  return "?";
}

ToyTask parse_toy_task(const std::string& s) {
  for (ToyTask t : {ToyTask::copy, ToyTask::reverse, ToyTask::lexicon_swap}) {
    if (to_string(t) == s) return t;
  }
  throw ConfigError("unknown toy task '" + s + "' (copy, reverse, lexicon_swap)");
}

void ToyTaskSpec::validate() const {
  if (vocab_size < 5) throw ConfigError("toy vocab_size must be >= 5 (4 reserved ids + 1 word)");
  if (min_len < 1 || max_len < min_len) throw ConfigError("toy lengths need 1 <= min_len <= max_len");
  if (pairs < 1) throw ConfigError("toy pairs must be >= 1");
  if (!(domain_shift >= 0.0 && domain_shift <= 1.0)) throw ConfigError("domain_shift must be in [0, 1]");
  if (!(zipf_exponent >= 0.0)) throw ConfigError("zipf_exponent must be >= 0");
}

namespace {

size_t word_types(const ToyTaskSpec& spec) { return static_cast<size_t>(spec.vocab_size - 4); }

std::vector<size_t> permutation(size_t n, uint64_t seed) {
  std::vector<size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  Rng rng(seed);
  rng.shuffle(p);
  return p;
}

}  // namespace

std::vector<std::string> toy_source_types(const ToyTaskSpec& spec) {
  spec.validate();
  std::vector<std::string> out;
  for (size_t i = 0; i < word_types(spec); ++i) out.push_back("s" + std::to_string(i));
  return out;
}

std::map<std::string, std::string> toy_lexicon(const ToyTaskSpec& spec) {
  const auto types = toy_source_types(spec);
  std::map<std::string, std::string> lex;
  if (spec.task == ToyTask::lexicon_swap) {
    const auto perm = permutation(types.size(), derive_seed(spec.language_seed, 1));
    for (size_t i = 0; i < types.size(); ++i) lex[types[i]] = "t" + std::to_string(perm[i]);
  } else {
    for (const auto& t : types) lex[t] = t;
  }
  return lex;
}

std::vector<double> toy_unigram(const ToyTaskSpec& spec) {
  spec.validate();
  const size_t n = word_types(spec);
  const auto rank = permutation(n, derive_seed(spec.language_seed, 2));
  std::vector<double> base(n), shifted(n);
  double zb = 0.0, zs = 0.0;
  for (size_t i = 0; i < n; ++i) {
    base[i] = 1.0 / std::pow(static_cast<double>(rank[i] + 1), spec.zipf_exponent);
    shifted[i] = 1.0 / std::pow(static_cast<double>(n - rank[i]), spec.zipf_exponent);
    zb += base[i];
    zs += shifted[i];
  }
  std::vector<double> p(n);
  for (size_t i = 0; i < n; ++i) {
    p[i] = (1.0 - spec.domain_shift) * base[i] / zb + spec.domain_shift * shifted[i] / zs;
  }
  return p;
}

Tokens toy_translate(const ToyTaskSpec& spec, const Tokens& source) {
  const auto lex = toy_lexicon(spec);
  Tokens out;
  out.reserve(source.size());
  for (const auto& tok : source) {
    auto it = lex.find(tok);
    if (it == lex.end()) throw VocabError("token '" + tok + "' is not a word of the toy language");
    out.push_back(it->second);
  }
  if (spec.task == ToyTask::reverse) std::reverse(out.begin(), out.end());
  return out;
}

ParallelCorpus gen_toy(const ToyTaskSpec& spec) {
  const auto types = toy_source_types(spec);
  const auto unigram = toy_unigram(spec);
  const auto lex = toy_lexicon(spec);
  Rng rng(spec.seed);
  ParallelCorpus out;
  out.reserve(static_cast<size_t>(spec.pairs));
  for (int i = 0; i < spec.pairs; ++i) {
    const auto len = static_cast<size_t>(spec.min_len) + rng.below(static_cast<uint64_t>(spec.max_len - spec.min_len + 1));
    SentencePair pair;
    for (size_t k = 0; k < len; ++k) pair.source.push_back(types[rng.categorical(unigram)]);
    for (const auto& tok : pair.source) pair.target.push_back(lex.at(tok));
    if (spec.task == ToyTask::reverse) std::reverse(pair.target.begin(), pair.target.end());
    out.push_back(std::move(pair));
  }
  return out;
}

}  // namespace nmtforge
