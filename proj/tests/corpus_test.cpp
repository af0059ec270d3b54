// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "nmtforge/corpus/corpus.h"
#include "nmtforge/corpus/toy.h"
#include "nmtforge/errors.h"
#include "nmtforge/numerics/rng.h"
#include "nmtforge/text/normalize.h"

using namespace nmtforge;

namespace {

Tokens words(size_t n, const std::string& w = "w") { return Tokens(n, w); }

SentencePair pair_of(Tokens s, Tokens t) { return {std::move(s), std::move(t)}; }

ParallelCorpus fuzz_corpus(Rng& rng, size_t n) {
  ParallelCorpus c;
  for (size_t i = 0; i < n; ++i) {
    Tokens s, t;
    const size_t ls = rng.below(12), lt = rng.below(12);
    for (size_t k = 0; k < ls; ++k) s.push_back(std::string(1 + rng.below(rng.bernoulli(0.05) ? 60 : 6), 'a' + static_cast<char>(rng.below(3))));
    for (size_t k = 0; k < lt; ++k) t.push_back(std::string(1, 'x' + static_cast<char>(rng.below(3))));
    c.push_back(pair_of(s, t));
  }
  return c;
}

std::string key(const SentencePair& p) { return join_tokens(p.source) + "\t" + join_tokens(p.target); }

}  // namespace

TEST(FilterPair, LengthLimitIsHundredWords) {
  const FilterRules rules;
  EXPECT_EQ(filter_pair(pair_of(words(101), words(100)), rules), FilterVerdict::length_exceeded);
  EXPECT_EQ(filter_pair(pair_of(words(100), words(101)), rules), FilterVerdict::length_exceeded);
  EXPECT_EQ(filter_pair(pair_of(words(100), words(100)), rules), FilterVerdict::keep);
}

TEST(FilterPair, WordLimitIsFortyCharacters) {
  const FilterRules rules;
  EXPECT_EQ(filter_pair(pair_of({std::string(41, 'a')}, {"b"}), rules), FilterVerdict::word_too_long);
  EXPECT_EQ(filter_pair(pair_of({std::string(40, 'a')}, {"b"}), rules), FilterVerdict::keep);
  // Forty CJK characters are 120 bytes but still forty characters.
  std::string cjk;
  for (int i = 0; i < 40; ++i) cjk += "\xE4\xB8\xAD";
  EXPECT_EQ(filter_pair(pair_of({cjk}, {"b"}), rules), FilterVerdict::keep);
  EXPECT_EQ(filter_pair(pair_of({cjk + "\xE4\xB8\xAD"}, {"b"}), rules), FilterVerdict::word_too_long);
}

TEST(FilterPair, RatioBoundaryKeepsFourToOne) {
  const FilterRules rules;
  EXPECT_EQ(filter_pair(pair_of(words(9), words(2)), rules), FilterVerdict::ratio_exceeded);
  EXPECT_EQ(filter_pair(pair_of(words(8), words(2)), rules), FilterVerdict::keep);
  EXPECT_EQ(filter_pair(pair_of(words(2), words(9)), rules), FilterVerdict::ratio_exceeded);
  EXPECT_EQ(filter_pair(pair_of(words(10), words(12)), rules), FilterVerdict::keep);
}

TEST(FilterPair, FirstViolatedRuleIsReported) {
  const FilterRules rules;
  // Violates all three; length comes first.
  Tokens s = words(101);
  s[0] = std::string(50, 'a');
  EXPECT_EQ(filter_pair(pair_of(s, words(1)), rules), FilterVerdict::length_exceeded);
  EXPECT_EQ(filter_pair(pair_of({std::string(50, 'a'), "b", "c", "d", "e"}, words(1)), rules),
            FilterVerdict::word_too_long);
  EXPECT_EQ(filter_pair(pair_of({}, words(1)), rules), FilterVerdict::empty);
}

TEST(FilterCorpus, IdempotentOnFuzzedCorpora) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const ParallelCorpus c = fuzz_corpus(rng, 300);
    const ParallelCorpus once = filter_corpus(c, FilterRules{});
    EXPECT_EQ(filter_corpus(once, FilterRules{}), once);
    for (const auto& p : once) EXPECT_EQ(filter_pair(p, FilterRules{}), FilterVerdict::keep);
  }
}

TEST(FilterCorpus, InvalidRulesThrow) {
  FilterRules r;
  r.max_ratio = 0.5;
  EXPECT_THROW(filter_corpus({}, r), ConfigError);
}

TEST(Dedup, FirstOccurrenceKept) {
  const ParallelCorpus c = {pair_of({"a"}, {"x"}), pair_of({"a"}, {"y"}), pair_of({"a"}, {"x"})};
  const ParallelCorpus d = dedup(c);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[0].target, Tokens{"x"});
  EXPECT_EQ(d[1].target, Tokens{"y"});
}

TEST(Dedup, InjectedDuplicatesMatchCountingOracle) {
  Rng rng(11);
  ParallelCorpus c;
  for (int i = 0; i < 863; ++i) c.push_back(pair_of({"s" + std::to_string(i)}, {"t" + std::to_string(i % 7)}));
  for (int i = 0; i < 137; ++i) {
    const SentencePair copy = c[rng.below(c.size())];
    c.insert(c.begin() + static_cast<std::ptrdiff_t>(rng.below(c.size() + 1)), copy);
  }
  ASSERT_EQ(c.size(), 1000u);
  std::set<std::string> distinct;
  for (const auto& p : c) distinct.insert(key(p));
  const ParallelCorpus d = dedup(c);
  EXPECT_EQ(d.size(), distinct.size());
  EXPECT_EQ(d.size(), 863u);
  std::set<std::string> seen;
  for (const auto& p : d) EXPECT_TRUE(seen.insert(key(p)).second);
}

TEST(LmFilter, KeepAllIsIdentity) {
  const std::vector<Tokens> mono = {{"a", "b"}, {"c"}, {"a", "b"}};
  const NgramLm lm = NgramLm::train({{"a", "b"}});
  EXPECT_EQ(lm_filter(mono, lm, 1.0), mono);
  EXPECT_TRUE(lm_filter({}, lm, 0.5).empty());
  EXPECT_THROW(lm_filter(mono, lm, 0.0), ConfigError);
}

TEST(LmFilter, GibberishRanksBelowInDomain) {
  const ToyTaskSpec spec;
  const ParallelCorpus train = gen_toy(spec);
  const NgramLm lm = NgramLm::train(targets_of(train));
  const Tokens in_domain = gen_toy([&] {
    ToyTaskSpec s = spec;
    s.seed = 99;
    s.pairs = 1;
    s.min_len = 6;
    return s;
  }()).front().target;
  const Tokens gibberish = {"qq", "zz", "xq", "kk", "zq", "qz"};
  EXPECT_GT(lm.per_token_log_prob(in_domain), lm.per_token_log_prob(gibberish));
  const std::vector<Tokens> mono = {gibberish, in_domain};
  EXPECT_EQ(lm_filter(mono, lm, 0.5), std::vector<Tokens>{in_domain});
}

TEST(LmFilter, TiesKeepEarlierLinesAndOrder) {
  const NgramLm lm = NgramLm::train({{"a"}});
  const std::vector<Tokens> mono = {{"x"}, {"a"}, {"y"}, {"z"}};
  // x, y, z all score as the unknown word; ceil(0.5 * 4) = 2 keeps a and x.
  EXPECT_EQ(lm_filter(mono, lm, 0.5), (std::vector<Tokens>{{"x"}, {"a"}}));
}

TEST(MakeNoisy, ZeroProbabilitiesLeaveTokensAlone) {
  Rng rng(5);
  const ParallelCorpus c = fuzz_corpus(rng, 200);
  NoiseConfig cfg;
  cfg.p_replace = cfg.p_delete = cfg.p_permute = 0.0;
  const ParallelCorpus n = make_noisy(c, cfg);
  ASSERT_EQ(n.size(), c.size());
  for (size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(n[i].source, c[i].source);
    EXPECT_EQ(n[i].target, c[i].target);
    EXPECT_EQ(n[i].augmentation, Augmentation::noisy);
  }
}

TEST(MakeNoisy, EnabledFractionMatchesBinomial) {
  ToyTaskSpec spec;
  spec.pairs = 10000;
  const ParallelCorpus c = gen_toy(spec);
  NoiseConfig cfg;
  cfg.seed = 8;
  NoiseStats stats;
  const ParallelCorpus n = make_noisy(c, cfg, &stats);
  const double expected = 1.0 - std::pow(0.9, 3);
  EXPECT_NEAR(static_cast<double>(stats.with_any_op) / 10000.0, expected, 0.02);
  for (size_t i = 0; i < c.size(); ++i) EXPECT_EQ(n[i].target, c[i].target);
}

TEST(MakeNoisy, SameSeedSameOutput) {
  const ParallelCorpus c = gen_toy(ToyTaskSpec{});
  NoiseConfig cfg;
  cfg.p_replace = cfg.p_delete = cfg.p_permute = 0.5;
  cfg.seed = 4;
  EXPECT_EQ(make_noisy(c, cfg), make_noisy(c, cfg));
  cfg.seed = 5;
  EXPECT_NE(make_noisy(c, cfg), make_noisy(gen_toy(ToyTaskSpec{}), NoiseConfig{.p_replace = 0.5, .p_delete = 0.5,
                                                                                 .p_permute = 0.5, .seed = 4}));
}

TEST(MakeNoisy, PermutationStaysWithinWindow) {
  Tokens src;
  for (int i = 0; i < 12; ++i) src.push_back(std::to_string(i));
  const ParallelCorpus c(200, pair_of(src, {"t"}));
  NoiseConfig cfg{.p_replace = 0.0, .p_delete = 0.0, .p_permute = 1.0, .permute_window = 3, .seed = 1};
  for (const auto& p : make_noisy(c, cfg)) {
    ASSERT_EQ(p.source.size(), src.size());
    std::multiset<std::string> a(p.source.begin(), p.source.end()), b(src.begin(), src.end());
    EXPECT_EQ(a, b);
    for (size_t i = 0; i < p.source.size(); ++i) {
      EXPECT_LE(std::abs(std::stoi(p.source[i]) - static_cast<int>(i)), 3);
    }
  }
}

TEST(Shard, IdentityForOneShard) {
  Rng rng(1);
  const ParallelCorpus c = fuzz_corpus(rng, 10);
  const auto s = shard(c, 1, 0);
  ASSERT_EQ(s.size(), 1u);
  std::multiset<std::string> a, b;
  for (const auto& p : c) a.insert(key(p));
  for (const auto& p : s[0]) b.insert(key(p));
  EXPECT_EQ(a, b);
}

TEST(Shard, ThreeShardsOfThree) {
  ParallelCorpus c;
  for (int i = 0; i < 9; ++i) c.push_back(pair_of({std::to_string(i)}, {"t"}));
  const auto s = shard(c, 3, 7);
  ASSERT_EQ(s.size(), 3u);
  for (const auto& part : s) EXPECT_EQ(part.size(), 3u);
}

TEST(Shard, PartitionPropertyOnFuzzedCorpora) {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    ParallelCorpus c;
    const size_t n = 1 + rng.below(50);
    for (size_t i = 0; i < n; ++i) c.push_back(pair_of({std::to_string(i)}, {"t"}));
    const int k = 1 + static_cast<int>(rng.below(n));
    const auto s = shard(c, k, rng.next());
    std::multiset<std::string> all;
    size_t lo = n, hi = 0;
    for (const auto& part : s) {
      lo = std::min(lo, part.size());
      hi = std::max(hi, part.size());
      for (const auto& p : part) all.insert(key(p));
    }
    EXPECT_LE(hi - lo, 1u);
    EXPECT_EQ(all.size(), n);
    EXPECT_EQ(std::set<std::string>(all.begin(), all.end()).size(), n);
  }
}

TEST(Shard, TooManyShardsThrows) {
  EXPECT_THROW(shard({pair_of({"a"}, {"b"})}, 2, 0), ShardError);
}

TEST(CorpusFiles, TsvAndManifestRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "nmtforge_corpus_test";
  std::filesystem::remove_all(dir);
  ParallelCorpus c = {pair_of({"a", "b"}, {"x"}), pair_of({"c"}, {"y", "z"}), pair_of({"d"}, {"w"})};
  c[1].provenance = Provenance::back_translated;
  c[1].augmentation = Augmentation::sample;
  c[2].provenance = Provenance::back_translated;
  c[2].augmentation = Augmentation::sample;
  write_corpus(dir / "c.tsv", c, "bt");
  EXPECT_EQ(read_corpus(dir / "c.tsv"), c);
  EXPECT_EQ(read_lines(dir / "c.tsv.manifest.jsonl").size(), 2u);
  write_lines(dir / "bad.tsv", {"no tab here"});
  EXPECT_THROW(read_corpus(dir / "bad.tsv"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Toy, CopyTargetsEqualSources) {
  ToyTaskSpec spec;
  spec.task = ToyTask::copy;
  for (const auto& p : gen_toy(spec)) EXPECT_EQ(p.source, p.target);
}

TEST(Toy, ReverseTargetsAreReversedSources) {
  ToyTaskSpec spec;
  spec.task = ToyTask::reverse;
  for (const auto& p : gen_toy(spec)) EXPECT_EQ(p.target, Tokens(p.source.rbegin(), p.source.rend()));
}

TEST(Toy, LexiconSwapIsBijection) {
  const ToyTaskSpec spec;
  const auto lex = toy_lexicon(spec);
  std::map<std::string, std::string> inverse;
  for (const auto& [s, t] : lex) EXPECT_TRUE(inverse.emplace(t, s).second);
  EXPECT_EQ(lex.size(), 46u);
  for (const auto& p : gen_toy(spec)) {
    ASSERT_LE(p.source.size(), 12u);
    Tokens back;
    for (const auto& t : p.target) back.push_back(inverse.at(t));
    EXPECT_EQ(back, p.source);
    EXPECT_EQ(toy_translate(spec, p.source), p.target);
  }
}

TEST(Toy, DeterministicGivenSeed) {
  ToyTaskSpec spec;
  spec.seed = 12;
  EXPECT_EQ(gen_toy(spec), gen_toy(spec));
  ToyTaskSpec other = spec;
  other.seed = 13;
  EXPECT_NE(gen_toy(spec), gen_toy(other));
}

TEST(Toy, DomainShiftMovesUnigramDistribution) {
  ToyTaskSpec base;
  base.pairs = 3000;
  ToyTaskSpec shifted = base;
  shifted.domain_shift = 0.5;
  shifted.seed = 1;
  auto empirical = [](const ParallelCorpus& c) {
    std::map<std::string, double> f;
    double n = 0;
    for (const auto& p : c) {
      for (const auto& t : p.source) {
        f[t] += 1;
        n += 1;
      }
    }
    for (auto& [t, v] : f) v /= n;
    return f;
  };
  const auto p = empirical(gen_toy(shifted));
  const auto q = empirical(gen_toy(base));
  double kl = 0.0;
  for (const auto& [t, pv] : p) {
    const double qv = q.count(t) ? q.at(t) : 1e-6;
    kl += pv * std::log(pv / qv);
  }
  EXPECT_GT(kl, 0.05);
}
