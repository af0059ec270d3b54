// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace nmtforge {

using Tokens = std::vector<std::string>;

enum class Provenance { gold, back_translated, distilled, in_domain };
enum class Augmentation { clean, noisy, sample };

std::string to_string(Provenance p);
std::string to_string(Augmentation a);
Provenance parse_provenance(const std::string& s);
Augmentation parse_augmentation(const std::string& s);

struct SentencePair {
  Tokens source;
  Tokens target;
  Provenance provenance = Provenance::gold;
  Augmentation augmentation = Augmentation::clean;

  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

using ParallelCorpus = std::vector<SentencePair>;

ParallelCorpus make_corpus(const std::vector<Tokens>& sources, const std::vector<Tokens>& targets,
                           Provenance provenance = Provenance::gold,
                           Augmentation augmentation = Augmentation::clean);
std::vector<Tokens> sources_of(const ParallelCorpus& corpus);
std::vector<Tokens> targets_of(const ParallelCorpus& corpus);
ParallelCorpus concat_corpora(const std::vector<ParallelCorpus>& parts);

// --- filtering -------------------------------------------------------------

struct FilterRules {
  int max_len = 100;
  int max_word_chars = 40;
  double max_ratio = 4.0;
  bool dedup = true;

  void validate() const;
};

// Rules are checked in the order listed; kEmpty precedes the rest because
// the ratio of an empty side is undefined.
enum class FilterVerdict { keep, empty, length_exceeded, word_too_long, ratio_exceeded };

std::string to_string(FilterVerdict v);

FilterVerdict filter_pair(const SentencePair& pair, const FilterRules& rules);

struct FilterStats {
  size_t input = 0;
  size_t kept = 0;
  size_t empty = 0;
  size_t length_exceeded = 0;
  size_t word_too_long = 0;
  size_t ratio_exceeded = 0;
  size_t duplicates = 0;
};

// filter_pair over the corpus, then dedup when rules.dedup is set.
ParallelCorpus filter_corpus(const ParallelCorpus& corpus, const FilterRules& rules,
                             FilterStats* stats = nullptr);

// Keeps the first occurrence of each exact (source, target) pair.
ParallelCorpus dedup(const ParallelCorpus& corpus);

// --- monolingual LM filter ------------------------------------------------

// Token n-gram model with add-k smoothing; sentences are padded with order-1
// start symbols and scored including the end symbol.
class NgramLm {
 public:
  static NgramLm train(const std::vector<Tokens>& corpus, int order = 3, double add_k = 0.1);

  double log_prob(const Tokens& sentence) const;
  // log_prob divided by the number of predicted symbols (tokens + end).
  double per_token_log_prob(const Tokens& sentence) const;
  int order() const { return order_; }

 private:
  double conditional(const std::string& context, const std::string& word) const;

  int order_ = 3;
  double add_k_ = 0.1;
  size_t types_ = 0;
  std::unordered_set<std::string> vocab_;
  std::unordered_map<std::string, double> ngram_counts_;
  std::unordered_map<std::string, double> context_counts_;
};

// Keeps the ceil(keep_fraction * n) lines with the highest per-token log
// probability (ties by position), in original order.
std::vector<Tokens> lm_filter(const std::vector<Tokens>& mono, const NgramLm& lm, double keep_fraction);

// --- augmentation ----------------------------------------------------------

struct NoiseConfig {
  double p_replace = 0.1;
  double p_delete = 0.1;
  double p_permute = 0.1;
  int permute_window = 3;
  uint64_t seed = 0;

  void validate() const;
};

struct NoiseStats {
  size_t pairs = 0;
  size_t with_any_op = 0;
  size_t replaced = 0;
  size_t deleted = 0;
  size_t permuted = 0;
};

// Source-side token noise: replace, then delete, then local permutation, each
// enabled per pair with its own probability. Replacement tokens are drawn from
// the corpus source vocabulary. Output pairs are labelled noisy.
ParallelCorpus make_noisy(const ParallelCorpus& corpus, const NoiseConfig& config, NoiseStats* stats = nullptr);

// Shuffles with the seed and deals pairs round-robin into n shards.
std::vector<ParallelCorpus> shard(const ParallelCorpus& corpus, int n, uint64_t seed);

// --- files -----------------------------------------------------------------

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);
std::vector<Tokens> read_token_lines(const std::filesystem::path& path);
void write_token_lines(const std::filesystem::path& path, const std::vector<Tokens>& lines);

// "source<TAB>target" per line plus a "<path>.manifest.jsonl" sidecar with one
// record per run of equally labelled lines.
void write_corpus(const std::filesystem::path& path, const ParallelCorpus& corpus,
                  const std::string& stage = "");
ParallelCorpus read_corpus(const std::filesystem::path& path);

}  // namespace nmtforge
