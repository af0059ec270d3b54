// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/corpus/corpus.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "nmtforge/errors.h"
#include "nmtforge/numerics/rng.h"
#include "nmtforge/text/normalize.h"

namespace nmtforge {

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::gold: return "gold";
    case Provenance::back_translated: return "back_translated";
    case Provenance::distilled: return "distilled";
    case Provenance::in_domain: return "in_domain";
  }
  return "?";
}

std::string to_string(Augmentation a) {
  switch (a) {
    case Augmentation::clean: return "clean";
    case Augmentation::noisy: return "noisy";
    case Augmentation::sample: return "sample";
  }
  return "?";
}

Provenance parse_provenance(const std::string& s) {
  for (Provenance p : {Provenance::gold, Provenance::back_translated, Provenance::distilled, Provenance::in_domain}) {
    if (to_string(p) == s) return p;
  }
  throw FormatError("unknown provenance '" + s + "'");
}

Augmentation parse_augmentation(const std::string& s) {
  for (Augmentation a : {Augmentation::clean, Augmentation::noisy, Augmentation::sample}) {
    if (to_string(a) == s) return a;
  }
  throw FormatError("unknown augmentation '" + s + "'");
}

ParallelCorpus make_corpus(const std::vector<Tokens>& sources, const std::vector<Tokens>& targets,
                           Provenance provenance, Augmentation augmentation) {
  if (sources.size() != targets.size()) {
    throw AlignError("source/target line counts differ: " + std::to_string(sources.size()) + " vs " +
                     std::to_string(targets.size()));
  }
  ParallelCorpus out;
  out.reserve(sources.size());
  for (size_t i = 0; i < sources.size(); ++i) out.push_back({sources[i], targets[i], provenance, augmentation});
  return out;
}

std::vector<Tokens> sources_of(const ParallelCorpus& corpus) {
  std::vector<Tokens> out;
  out.reserve(corpus.size());
  for (const auto& p : corpus) out.push_back(p.source);
  return out;
}

std::vector<Tokens> targets_of(const ParallelCorpus& corpus) {
  std::vector<Tokens> out;
  out.reserve(corpus.size());
  for (const auto& p : corpus) out.push_back(p.target);
  return out;
}

ParallelCorpus concat_corpora(const std::vector<ParallelCorpus>& parts) {
  ParallelCorpus out;
  for (const auto& part : parts) out.insert(out.end(), part.begin(), part.end());
  return out;
}

// --- filtering -------------------------------------------------------------

void FilterRules::validate() const {
  if (max_len <= 0) throw ConfigError("filter max_len must be positive");
  if (max_word_chars <= 0) throw ConfigError("filter max_word_chars must be positive");
  if (!(max_ratio >= 1.0)) throw ConfigError("filter max_ratio must be >= 1");
}

std::string to_string(FilterVerdict v) {
  switch (v) {
    case FilterVerdict::keep: return "Keep";
    case FilterVerdict::empty: return "Empty";
    case FilterVerdict::length_exceeded: return "LengthExceeded";
    case FilterVerdict::word_too_long: return "WordTooLong";
    case FilterVerdict::ratio_exceeded: return "RatioExceeded";
  }
  return "?";
}

FilterVerdict filter_pair(const SentencePair& pair, const FilterRules& rules) {
  const size_t ns = pair.source.size();
  const size_t nt = pair.target.size();
  if (ns == 0 || nt == 0) return FilterVerdict::empty;
  if (ns > static_cast<size_t>(rules.max_len) || nt > static_cast<size_t>(rules.max_len)) {
    return FilterVerdict::length_exceeded;
  }
  for (const Tokens* side : {&pair.source, &pair.target}) {
    for (const auto& tok : *side) {
      if (utf8_length(tok) > static_cast<size_t>(rules.max_word_chars)) return FilterVerdict::word_too_long;
    }
  }
  const double ratio = static_cast<double>(std::max(ns, nt)) / static_cast<double>(std::min(ns, nt));
  if (ratio > rules.max_ratio) return FilterVerdict::ratio_exceeded;
  return FilterVerdict::keep;
}

ParallelCorpus filter_corpus(const ParallelCorpus& corpus, const FilterRules& rules, FilterStats* stats) {
  rules.validate();
  FilterStats local;
  local.input = corpus.size();
  ParallelCorpus kept;
  for (const auto& pair : corpus) {
    switch (filter_pair(pair, rules)) {
      case FilterVerdict::keep: kept.push_back(pair); break;
      case FilterVerdict::empty: ++local.empty; break;
      case FilterVerdict::length_exceeded: ++local.length_exceeded; break;
      case FilterVerdict::word_too_long: ++local.word_too_long; break;
      case FilterVerdict::ratio_exceeded: ++local.ratio_exceeded; break;
    }
  }
  if (rules.dedup) {
    const size_t before = kept.size();
    kept = dedup(kept);
    local.duplicates = before - kept.size();
  }
  local.kept = kept.size();
  if (stats) *stats = local;
  return kept;
}

ParallelCorpus dedup(const ParallelCorpus& corpus) {
  std::unordered_set<std::string> seen;
  ParallelCorpus out;
  for (const auto& pair : corpus) {
    // Tokens never contain spaces or tabs, so this key is injective.
    std::string key = join_tokens(pair.source) + '\t' + join_tokens(pair.target);
    if (seen.insert(std::move(key)).second) out.push_back(pair);
  }
  return out;
}

// --- LM filter -------------------------------------------------------------

namespace {

const char* const kLmStart = "<s>";
const char* const kLmEnd = "</s>";
const char* const kLmUnk = "<unk>";

std::string join_context(const std::vector<std::string>& symbols, size_t end, int n) {
  std::string key;
  for (size_t i = end - static_cast<size_t>(n); i < end; ++i) {
    key += symbols[i];
    key += ' ';
  }
  return key;
}

}  // namespace

NgramLm NgramLm::train(const std::vector<Tokens>& corpus, int order, double add_k) {
  if (order < 1) throw ConfigError("n-gram order must be >= 1");
  if (!(add_k > 0.0)) throw ConfigError("add-k smoothing constant must be positive");
  NgramLm lm;
  lm.order_ = order;
  lm.add_k_ = add_k;
  std::unordered_set<std::string> types;
  for (const auto& sentence : corpus) {
    std::vector<std::string> symbols(static_cast<size_t>(order - 1), kLmStart);
    symbols.insert(symbols.end(), sentence.begin(), sentence.end());
    symbols.push_back(kLmEnd);
    for (const auto& t : sentence) types.insert(t);
    for (size_t i = static_cast<size_t>(order - 1); i < symbols.size(); ++i) {
      const std::string context = join_context(symbols, i, order - 1);
      lm.context_counts_[context] += 1.0;
      lm.ngram_counts_[context + symbols[i]] += 1.0;
    }
  }
  lm.types_ = types.size() + 2;  // plus end and unknown
  lm.vocab_ = std::move(types);
  return lm;
}

double NgramLm::conditional(const std::string& context, const std::string& word) const {
  auto c = ngram_counts_.find(context + word);
  auto h = context_counts_.find(context);
  const double num = (c == ngram_counts_.end() ? 0.0 : c->second) + add_k_;
  const double den = (h == context_counts_.end() ? 0.0 : h->second) + add_k_ * static_cast<double>(types_);
  return std::log(num / den);
}

double NgramLm::log_prob(const Tokens& sentence) const {
  std::vector<std::string> symbols(static_cast<size_t>(order_ - 1), kLmStart);
  // Unseen words share one unknown symbol whose n-gram counts are all zero.
  for (const auto& t : sentence) symbols.push_back(vocab_.count(t) ? t : std::string(kLmUnk));
  symbols.push_back(kLmEnd);
  double total = 0.0;
  for (size_t i = static_cast<size_t>(order_ - 1); i < symbols.size(); ++i) {
    total += conditional(join_context(symbols, i, order_ - 1), symbols[i]);
  }
  return total;
}

double NgramLm::per_token_log_prob(const Tokens& sentence) const {
  return log_prob(sentence) / static_cast<double>(sentence.size() + 1);
}

std::vector<Tokens> lm_filter(const std::vector<Tokens>& mono, const NgramLm& lm, double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw ConfigError("keep_fraction must be in (0, 1]");
  if (mono.empty()) return {};
  std::vector<double> scores(mono.size());
  for (size_t i = 0; i < mono.size(); ++i) scores[i] = lm.per_token_log_prob(mono[i]);
  std::vector<size_t> order(mono.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  const auto keep = static_cast<size_t>(std::ceil(keep_fraction * static_cast<double>(mono.size()) - 1e-9));
  std::vector<size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
  std::sort(chosen.begin(), chosen.end());
  std::vector<Tokens> out;
  out.reserve(chosen.size());
  for (size_t i : chosen) out.push_back(mono[i]);
  return out;
}

// --- augmentation ----------------------------------------------------------

void NoiseConfig::validate() const {
  for (double p : {p_replace, p_delete, p_permute}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("noise probabilities must be in [0, 1]");
  }
  if (permute_window < 0) throw ConfigError("permute_window must be >= 0");
}

ParallelCorpus make_noisy(const ParallelCorpus& corpus, const NoiseConfig& config, NoiseStats* stats) {
  config.validate();
  std::set<std::string> vocab_set;
  for (const auto& pair : corpus) vocab_set.insert(pair.source.begin(), pair.source.end());
  const std::vector<std::string> vocab(vocab_set.begin(), vocab_set.end());

  Rng rng(config.seed);
  NoiseStats local;
  ParallelCorpus out;
  out.reserve(corpus.size());
  for (const auto& pair : corpus) {
    SentencePair noisy = pair;
    noisy.augmentation = Augmentation::noisy;
    const bool do_replace = rng.bernoulli(config.p_replace);
    const bool do_delete = rng.bernoulli(config.p_delete);
    const bool do_permute = rng.bernoulli(config.p_permute);
    Tokens& src = noisy.source;
    if (do_replace && !src.empty()) {
      src[rng.below(src.size())] = vocab[rng.below(vocab.size())];
      ++local.replaced;
    }
    // Never delete the last token; an empty side would be filtered anyway.
    if (do_delete && src.size() > 1) {
      src.erase(src.begin() + static_cast<std::ptrdiff_t>(rng.below(src.size())));
      ++local.deleted;
    }
    if (do_permute && src.size() > 1) {
      // Each position gets key i + U[0, window + 1); sorting the keys moves
      // no token further than the window.
      std::vector<std::pair<double, size_t>> keys(src.size());
      for (size_t i = 0; i < src.size(); ++i) {
        keys[i] = {static_cast<double>(i) + rng.uniform() * (config.permute_window + 1), i};
      }
      std::sort(keys.begin(), keys.end());
      Tokens permuted;
      permuted.reserve(src.size());
      for (const auto& k : keys) permuted.push_back(src[k.second]);
      src = std::move(permuted);
      ++local.permuted;
    }
    ++local.pairs;
    if (do_replace || do_delete || do_permute) ++local.with_any_op;
    out.push_back(std::move(noisy));
  }
  if (stats) *stats = local;
  return out;
}

std::vector<ParallelCorpus> shard(const ParallelCorpus& corpus, int n, uint64_t seed) {
  if (n < 1) throw ShardError("shard count must be >= 1");
  if (static_cast<size_t>(n) > corpus.size()) {
    throw ShardError("cannot split " + std::to_string(corpus.size()) + " pairs into " + std::to_string(n) +
                     " non-empty shards");
  }
  std::vector<size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<ParallelCorpus> shards(static_cast<size_t>(n));
  for (size_t i = 0; i < order.size(); ++i) shards[i % static_cast<size_t>(n)].push_back(corpus[order[i]]);
  return shards;
}

// --- files -----------------------------------------------------------------

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw FormatError("write failed: " + path.string());
}

std::vector<Tokens> read_token_lines(const std::filesystem::path& path) {
  std::vector<Tokens> out;
  for (const auto& l : read_lines(path)) out.push_back(split_tokens(l));
  return out;
}

void write_token_lines(const std::filesystem::path& path, const std::vector<Tokens>& lines) {
  std::vector<std::string> text;
  text.reserve(lines.size());
  for (const auto& t : lines) text.push_back(join_tokens(t));
  write_lines(path, text);
}

namespace {

std::filesystem::path manifest_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".manifest.jsonl");
}

}  // namespace

void write_corpus(const std::filesystem::path& path, const ParallelCorpus& corpus, const std::string& stage) {
  std::vector<std::string> lines;
  std::vector<std::string> records;
  lines.reserve(corpus.size());
  size_t run_begin = 0;
  for (size_t i = 0; i < corpus.size(); ++i) {
    lines.push_back(join_tokens(corpus[i].source) + '\t' + join_tokens(corpus[i].target));
    const bool last = i + 1 == corpus.size();
    if (last || corpus[i + 1].provenance != corpus[i].provenance ||
        corpus[i + 1].augmentation != corpus[i].augmentation) {
      nlohmann::ordered_json rec;
      rec["begin"] = run_begin;
      rec["end"] = i + 1;
      rec["provenance"] = to_string(corpus[i].provenance);
      rec["augmentation"] = to_string(corpus[i].augmentation);
      rec["stage"] = stage;
      records.push_back(rec.dump());
      run_begin = i + 1;
    }
  }
  write_lines(path, lines);
  write_lines(manifest_path(path), records);
}

ParallelCorpus read_corpus(const std::filesystem::path& path) {
  ParallelCorpus corpus;
  size_t lineno = 0;
  for (const auto& line : read_lines(path)) {
    ++lineno;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected source<TAB>target");
    }
    corpus.push_back({split_tokens(line.substr(0, tab)), split_tokens(line.substr(tab + 1))});
  }
  const auto manifest = manifest_path(path);
  if (std::filesystem::exists(manifest)) {
    for (const auto& line : read_lines(manifest)) {
      if (line.empty()) continue;
      const auto rec = nlohmann::json::parse(line, nullptr, false);
      if (rec.is_discarded() || !rec.contains("begin") || !rec.contains("end")) {
        throw FormatError("bad manifest record in " + manifest.string());
      }
      const auto begin = rec["begin"].get<size_t>();
      const auto end = rec["end"].get<size_t>();
      if (begin > end || end > corpus.size()) throw FormatError("manifest span out of range in " + manifest.string());
      const Provenance p = parse_provenance(rec.value("provenance", "gold"));
      const Augmentation a = parse_augmentation(rec.value("augmentation", "clean"));
      for (size_t i = begin; i < end; ++i) {
        corpus[i].provenance = p;
        corpus[i].augmentation = a;
      }
    }
  }
  return corpus;
}

}  // namespace nmtforge
