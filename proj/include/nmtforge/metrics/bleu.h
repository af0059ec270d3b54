// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "nmtforge/corpus/corpus.h"

namespace nmtforge {

// Frozen mteval-v13a style tokenizer, case preserved:
//   1. every char of  { | } ~ [ \ ] ^ _ ` space ! " # $ % & ( ) * + : ; < = > ? @ /
//      becomes a separate token;
//   2. '.' and ',' split off unless both neighbours are digits;
//   3. '-' split off after a digit;
//   4. whitespace runs collapse, ends are trimmed.
// "&quot;", "&amp;", "&lt;", "&gt;" are unescaped first.
Tokens bleu_tokenize(const std::string& line);

struct BleuReport {
  std::array<double, 4> precisions{};
  std::array<size_t, 4> matches{};
  std::array<size_t, 4> totals{};
  double brevity_penalty = 0.0;
  double score = 0.0;
  size_t hyp_len = 0;
  size_t ref_len = 0;
};

// Corpus BLEU over already tokenized lines. The geometric mean runs over the
// orders n <= 4 for which the hypotheses contain any n-gram. Each hypothesis may have several
// references: counts clip against the maximum over references and the
// reference length is the one closest to the hypothesis (shorter on ties).
BleuReport corpus_bleu(const std::vector<Tokens>& hyps, const std::vector<std::vector<Tokens>>& refs);
BleuReport corpus_bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs);
// Raw lines, tokenized with bleu_tokenize.
BleuReport corpus_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs);

// 4-gram sentence BLEU in [0, 100]; precisions for n >= 2 use add-one
// smoothing on both numerator and denominator.
double sentence_bleu(const Tokens& hyp, const Tokens& ref);

// For each model, BLEU of its lines against all other models' lines as
// references. outputs[m][i] is model m's translation of sentence i.
std::vector<double> self_bleu(const std::vector<std::vector<Tokens>>& outputs);

// {"score", "precisions", "bp", "hyp_len", "ref_len"} in that order.
std::string bleu_json(const BleuReport& report);

}  // namespace nmtforge
