// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/decode/decode.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "nmtforge/errors.h"
#include "nmtforge/numerics/rng.h"
#include "nmtforge/text/normalize.h"

namespace nmtforge {

std::string to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::greedy: return "greedy";
    case DecodeMode::beam: return "beam";
    case DecodeMode::sample: return "sample";
  }
  return "?";
}

DecodeMode parse_decode_mode(const std::string& s) {
  for (DecodeMode m : {DecodeMode::greedy, DecodeMode::beam, DecodeMode::sample}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown decode mode '" + s + "' (greedy, beam, sample)");
}

void DecodeConfig::validate() const {
  if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (max_len < 0) throw ConfigError("max_len must be >= 1 (or 0 for automatic)");
  if (!(alpha >= 0.0)) throw ConfigError("length penalty alpha must be >= 0");
  if (batch_sources < 1) throw ConfigError("batch_sources must be >= 1");
}

Ids Hypothesis::output() const {
  Ids out = tokens;
  if (finished && !out.empty() && out.back() == Vocabulary::kEos) out.pop_back();
  return out;
}

double length_penalty(size_t len, double alpha) {
  return std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
}

// --- ensemble ----------------------------------------------------------------

namespace {

class EnsembleState : public DecoderState {
 public:
  size_t rows() const override { return parts.front()->rows(); }
  size_t steps() const override { return parts.front()->steps(); }
  void select(std::span<const size_t> r) override {
    for (auto& p : parts) p->select(r);
  }
  std::vector<std::unique_ptr<DecoderState>> parts;
};

}  // namespace

Ensemble::Ensemble(std::vector<const Scorer*> members, EnsembleCombine combine)
    : members_(std::move(members)), combine_(combine) {
  if (members_.empty()) throw EnsembleError("ensemble needs at least one model");
  const Scorer& first = *members_.front();
  for (const Scorer* m : members_) {
    if (m->target_vocab_size() != first.target_vocab_size()) {
      throw EnsembleError("ensemble members have different target vocabulary sizes");
    }
    const Vocabulary* a = first.target_vocabulary();
    const Vocabulary* b = m->target_vocabulary();
    if (a && b && !(*a == *b)) throw EnsembleError("ensemble members have different target vocabularies");
    if (m->direction() != first.direction()) throw EnsembleError("ensemble mixes left-to-right and right-to-left models");
  }
}

std::unique_ptr<DecoderState> Ensemble::start(const std::vector<Ids>& src) const {
  auto st = std::make_unique<EnsembleState>();
  for (const Scorer* m : members_) st->parts.push_back(m->start(src));
  return st;
}

Tensor Ensemble::step(DecoderState& state, std::span<const int> last) const {
  auto& st = dynamic_cast<EnsembleState&>(state);
  if (members_.size() == 1) return members_.front()->step(*st.parts.front(), last);
  std::vector<Tensor> lps;
  for (size_t i = 0; i < members_.size(); ++i) lps.push_back(members_[i]->step(*st.parts[i], last));
  Tensor out(lps.front().shape());
  const auto k = static_cast<Real>(members_.size());
  for (int64_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    if (combine_ == EnsembleCombine::arithmetic) {
      // log(mean_m exp(lp_m)), shifted by the row max of each column's members.
      for (int64_t c = 0; c < out.cols(); ++c) {
        Real mx = -std::numeric_limits<Real>::infinity();
        for (const auto& lp : lps) mx = std::max(mx, lp(r, c));
        if (std::isinf(mx)) {
          row[static_cast<size_t>(c)] = mx;
          continue;
        }
        Real s = 0.0;
        for (const auto& lp : lps) s += std::exp(lp(r, c) - mx);
        row[static_cast<size_t>(c)] = mx + std::log(s / k);
      }
    } else {
      Real mx = -std::numeric_limits<Real>::infinity();
      for (int64_t c = 0; c < out.cols(); ++c) {
        Real s = 0.0;
        for (const auto& lp : lps) s += lp(r, c);
        row[static_cast<size_t>(c)] = s / k;
        mx = std::max(mx, row[static_cast<size_t>(c)]);
      }
      Real z = 0.0;
      for (Real v : row) z += std::exp(v - mx);
      const Real log_z = mx + std::log(z);
      for (Real& v : row) v -= log_z;
    }
  }
  return out;
}

// --- search ------------------------------------------------------------------

namespace {

size_t max_len_for(const Ids& src, const DecodeConfig& config) {
  if (config.max_len > 0) return static_cast<size_t>(config.max_len);
  return 2 * src.size() + 10;
}

template <typename Fn>
void for_each_chunk(size_t n, int chunk, Fn&& fn) {
  for (size_t begin = 0; begin < n; begin += static_cast<size_t>(chunk)) {
    fn(begin, std::min(n, begin + static_cast<size_t>(chunk)));
  }
}

struct Live {
  Ids tokens;
  double log_prob = 0.0;
  size_t row = 0;
};

struct Expansion {
  double log_prob;
  size_t hyp;
  int token;
};

// Pool order: higher score first, then higher log-prob, then lexicographically
// smaller token sequence.
bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.tokens < b.tokens;
}

std::vector<CandidateSet> beam_chunk(const Scorer& scorer, const std::vector<Ids>& sources, const DecodeConfig& config) {
  const size_t n = sources.size();
  const auto beam = static_cast<size_t>(config.beam_size);
  const size_t vocab = scorer.target_vocab_size();
  auto state = scorer.start(sources);
  std::vector<std::vector<Live>> live(n);
  std::vector<CandidateSet> pool(n);
  std::vector<size_t> limit(n);
  for (size_t i = 0; i < n; ++i) {
    live[i].push_back({{}, 0.0, i});
    limit[i] = max_len_for(sources[i], config);
  }
  std::vector<int> last(n, Vocabulary::kBos);

  for (size_t t = 0;; ++t) {
    if (state->rows() == 0) break;
    const Tensor lp = scorer.step(*state, last);
    std::vector<size_t> next_rows;
    std::vector<int> next_last;
    for (size_t i = 0; i < n; ++i) {
      if (live[i].empty()) continue;
      std::vector<Expansion> cand;
      cand.reserve(live[i].size() * vocab);
      for (size_t h = 0; h < live[i].size(); ++h) {
        const auto row = lp.row(static_cast<int64_t>(live[i][h].row));
        for (size_t v = 0; v < vocab; ++v) {
          if (v == static_cast<size_t>(Vocabulary::kPad) || v == static_cast<size_t>(Vocabulary::kBos)) continue;
          cand.push_back({live[i][h].log_prob + row[v], h, static_cast<int>(v)});
        }
      }
      const size_t keep = std::min(beam, cand.size());
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(),
                        [](const Expansion& a, const Expansion& b) {
                          if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                          if (a.token != b.token) return a.token < b.token;
                          return a.hyp < b.hyp;
                        });
      std::vector<Live> next;
      const bool at_limit = t + 1 >= limit[i];
      for (size_t c = 0; c < keep; ++c) {
        const Expansion& e = cand[c];
        Ids tokens = live[i][e.hyp].tokens;
        tokens.push_back(e.token);
        if (e.token == Vocabulary::kEos || at_limit) {
          Hypothesis done;
          done.finished = e.token == Vocabulary::kEos;
          done.log_prob = e.log_prob;
          done.score = e.log_prob / length_penalty(tokens.size(), config.alpha);
          done.tokens = std::move(tokens);
          pool[i].push_back(std::move(done));
        } else {
          next.push_back({std::move(tokens), e.log_prob, live[i][e.hyp].row});
        }
      }
      // Stop once the pool is full and no live hypothesis can still win:
      // log-probs only fall and the penalty is largest at the length limit.
      if (pool[i].size() >= beam && !next.empty()) {
        double best_pool = -std::numeric_limits<double>::infinity();
        for (const auto& h : pool[i]) best_pool = std::max(best_pool, h.score);
        double best_live = -std::numeric_limits<double>::infinity();
        for (const auto& h : next) best_live = std::max(best_live, h.log_prob / length_penalty(limit[i], config.alpha));
        if (best_pool >= best_live) next.clear();
      }
      for (auto& h : next) {
        next_rows.push_back(h.row);
        next_last.push_back(h.tokens.back());
        h.row = next_rows.size() - 1;
      }
      live[i] = std::move(next);
    }
    if (next_rows.empty()) break;
    state->select(next_rows);
    last = std::move(next_last);
  }
  for (auto& p : pool) {
    std::sort(p.begin(), p.end(), better);
    if (p.size() > beam) p.resize(beam);
  }
  return pool;
}

}  // namespace

std::vector<CandidateSet> beam_search(const Scorer& scorer, const std::vector<Ids>& sources, const DecodeConfig& config) {
  config.validate();
  std::vector<CandidateSet> out;
  out.reserve(sources.size());
  for_each_chunk(sources.size(), config.batch_sources, [&](size_t b, size_t e) {
    auto part = beam_chunk(scorer, std::vector<Ids>(sources.begin() + static_cast<std::ptrdiff_t>(b),
                                                    sources.begin() + static_cast<std::ptrdiff_t>(e)),
                           config);
    for (auto& c : part) out.push_back(std::move(c));
  });
  return out;
}

namespace {

// Shared loop for greedy and sampling: pick() chooses the next token of
// source i given its log-probability row.
template <typename Pick>
std::vector<Hypothesis> left_to_right(const Scorer& scorer, const std::vector<Ids>& sources, const DecodeConfig& config,
                                      Pick&& pick, size_t offset) {
  const size_t n = sources.size();
  auto state = scorer.start(sources);
  std::vector<Hypothesis> hyps(n);
  std::vector<size_t> active(n);
  std::iota(active.begin(), active.end(), 0);
  std::vector<int> last(n, Vocabulary::kBos);
  while (!active.empty()) {
    const Tensor lp = scorer.step(*state, last);
    std::vector<size_t> keep_rows, keep_ids;
    std::vector<int> next_last;
    for (size_t r = 0; r < active.size(); ++r) {
      const size_t i = active[r];
      const auto row = lp.row(static_cast<int64_t>(r));
      const int tok = pick(offset + i, row);
      Hypothesis& h = hyps[i];
      h.tokens.push_back(tok);
      h.log_prob += row[static_cast<size_t>(tok)];
      if (tok == Vocabulary::kEos) {
        h.finished = true;
      } else if (h.tokens.size() < max_len_for(sources[i], config)) {
        keep_rows.push_back(r);
        keep_ids.push_back(i);
        next_last.push_back(tok);
      }
    }
    if (keep_rows.empty()) break;
    state->select(keep_rows);
    active = std::move(keep_ids);
    last = std::move(next_last);
  }
  for (auto& h : hyps) h.score = h.log_prob / length_penalty(h.tokens.size(), config.alpha);
  return hyps;
}

int argmax_token(std::span<const Real> row) {
  int best = -1;
  for (size_t v = 0; v < row.size(); ++v) {
    if (v == static_cast<size_t>(Vocabulary::kPad) || v == static_cast<size_t>(Vocabulary::kBos)) continue;
    if (best < 0 || row[v] > row[static_cast<size_t>(best)]) best = static_cast<int>(v);
  }
  return best;
}

}  // namespace

std::vector<Hypothesis> greedy_decode(const Scorer& scorer, const std::vector<Ids>& sources, const DecodeConfig& config) {
  config.validate();
  std::vector<Hypothesis> out;
  for_each_chunk(sources.size(), config.batch_sources, [&](size_t b, size_t e) {
    auto part = left_to_right(
        scorer,
        std::vector<Ids>(sources.begin() + static_cast<std::ptrdiff_t>(b), sources.begin() + static_cast<std::ptrdiff_t>(e)),
        config, [](size_t, std::span<const Real> row) { return argmax_token(row); }, b);
    out.insert(out.end(), part.begin(), part.end());
  });
  return out;
}

std::vector<Hypothesis> sample_decode(const Scorer& scorer, const std::vector<Ids>& sources, const DecodeConfig& config) {
  config.validate();
  std::vector<Rng> rngs;
  rngs.reserve(sources.size());
  for (size_t i = 0; i < sources.size(); ++i) rngs.emplace_back(derive_seed(config.seed, i));
  std::vector<Hypothesis> out;
  auto pick = [&](size_t i, std::span<const Real> row) {
    std::vector<double> w(row.size(), 0.0);
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t v = 0; v < row.size(); ++v) {
      if (v != static_cast<size_t>(Vocabulary::kPad) && v != static_cast<size_t>(Vocabulary::kBos)) {
        mx = std::max(mx, row[v] / config.temperature);
      }
    }
    for (size_t v = 0; v < row.size(); ++v) {
      if (v == static_cast<size_t>(Vocabulary::kPad) || v == static_cast<size_t>(Vocabulary::kBos)) continue;
      w[v] = std::exp(row[v] / config.temperature - mx);
    }
    return static_cast<int>(rngs[i].categorical(w));
  };
  for_each_chunk(sources.size(), config.batch_sources, [&](size_t b, size_t e) {
    auto part = left_to_right(
        scorer,
        std::vector<Ids>(sources.begin() + static_cast<std::ptrdiff_t>(b), sources.begin() + static_cast<std::ptrdiff_t>(e)),
        config, pick, b);
    out.insert(out.end(), part.begin(), part.end());
  });
  return out;
}

std::vector<Hypothesis> decode(const Scorer& scorer, const std::vector<Ids>& sources, const DecodeConfig& config) {
  switch (config.mode) {
    case DecodeMode::greedy: return greedy_decode(scorer, sources, config);
    case DecodeMode::sample: return sample_decode(scorer, sources, config);
    case DecodeMode::beam: break;
  }
  std::vector<Hypothesis> best;
  for (auto& set : beam_search(scorer, sources, config)) best.push_back(std::move(set.front()));
  return best;
}

std::vector<Tokens> translate_tokens(std::span<const Model* const> models, const std::vector<Tokens>& sources,
                                     const DecodeConfig& config) {
  if (models.empty()) throw EnsembleError("translation needs at least one model");
  const Model& first = *models.front();
  for (const Model* m : models) {
    if (!(m->src_vocab() == first.src_vocab())) throw EnsembleError("ensemble members have different source vocabularies");
  }
  std::vector<const Scorer*> members(models.begin(), models.end());
  const Ensemble ensemble(members, config.combine);
  // Empty sources still get a </s> row so every line yields an output.
  std::vector<Ids> ids;
  ids.reserve(sources.size());
  for (const auto& s : sources) {
    Ids x = first.src_vocab().encode(s);
    x.push_back(Vocabulary::kEos);
    ids.push_back(std::move(x));
  }
  std::vector<Tokens> out;
  out.reserve(sources.size());
  for (const auto& h : decode(ensemble, ids, config)) {
    const Ids o = h.output();
    Tokens toks = first.tgt_vocab().decode(o);
    if (first.spec().direction == Direction::r2l) std::reverse(toks.begin(), toks.end());
    out.push_back(std::move(toks));
  }
  return out;
}

std::vector<std::string> translate_corpus(std::span<const Model* const> models, const std::vector<std::string>& lines,
                                          const DecodeConfig& config, const TextProcessing& text) {
  std::vector<Tokens> sources;
  sources.reserve(lines.size());
  for (const auto& line : lines) {
    std::string l = text.normalize ? normalize_punct(line) : line;
    Tokens toks = text.tokenize ? tokenize(l) : split_tokens(l);
    if (text.truecaser) toks = text.truecaser->apply(toks);
    if (text.src_bpe) toks = text.src_bpe->apply(toks);
    sources.push_back(std::move(toks));
  }
  std::vector<std::string> out;
  out.reserve(lines.size());
  for (auto& toks : translate_tokens(models, sources, config)) {
    if (text.target_bpe) toks = bpe_undo(toks);
    if (text.detruecase) toks = detruecase(toks);
    out.push_back(text.detokenize ? detokenize(toks) : join_tokens(toks));
  }
  return out;
}

}  // namespace nmtforge
