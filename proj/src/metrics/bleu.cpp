// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/metrics/bleu.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <regex>

#include <nlohmann/json.hpp>

#include "nmtforge/errors.h"
#include "nmtforge/text/normalize.h"

namespace nmtforge {

Tokens bleu_tokenize(const std::string& line) {
  static const std::regex kQuot("&quot;"), kAmp("&amp;"), kLt("&lt;"), kGt("&gt;");
  static const std::regex kPunct(R"(([\{-\~\[-\` -\&\(-\+\:-\@\/]))");
  static const std::regex kPeriodAfter(R"(([^0-9])([\.,]))");
  static const std::regex kPeriodBefore(R"(([\.,])([^0-9]))");
  static const std::regex kDash(R"(([0-9])(-))");
  std::string s = std::regex_replace(line, kQuot, "\"");
  s = std::regex_replace(s, kAmp, "&");
  s = std::regex_replace(s, kLt, "<");
  s = std::regex_replace(s, kGt, ">");
  s = " " + s + " ";
  s = std::regex_replace(s, kPunct, " $1 ");
  s = std::regex_replace(s, kPeriodAfter, "$1 $2 ");
  s = std::regex_replace(s, kPeriodBefore, " $1 $2");
  s = std::regex_replace(s, kDash, "$1 $2 ");
  return split_tokens(s);
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, size_t>;

NgramCounts count_ngrams(const Tokens& tokens, size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (size_t i = 0; i + n <= tokens.size(); ++i) {
    counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                    tokens.begin() + static_cast<std::ptrdiff_t>(i + n))]++;
  }
  return counts;
}

size_t closest_ref_len(size_t hyp_len, const std::vector<Tokens>& refs) {
  size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = [&](size_t len) { return len > hyp_len ? len - hyp_len : hyp_len - len; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  return best;
}

void accumulate(BleuReport& report, const Tokens& hyp, const std::vector<Tokens>& refs) {
  report.hyp_len += hyp.size();
  report.ref_len += closest_ref_len(hyp.size(), refs);
  for (size_t n = 1; n <= 4; ++n) {
    const NgramCounts h = count_ngrams(hyp, n);
    NgramCounts max_ref;
    for (const auto& r : refs) {
      for (const auto& [gram, c] : count_ngrams(r, n)) max_ref[gram] = std::max(max_ref[gram], c);
    }
    size_t matched = 0;
    for (const auto& [gram, c] : h) {
      auto it = max_ref.find(gram);
      if (it != max_ref.end()) matched += std::min(c, it->second);
    }
    report.matches[n - 1] += matched;
    report.totals[n - 1] += hyp.size() >= n ? hyp.size() - n + 1 : 0;
  }
}

// Orders with no hypothesis n-grams at all (every hypothesis shorter than n)
// are left out of the geometric mean instead of zeroing the score.
void finish(BleuReport& report) {
  double log_sum = 0.0;
  int orders = 0;
  bool zero = report.hyp_len == 0;
  for (size_t n = 0; n < 4; ++n) {
    if (report.totals[n] == 0) {
      report.precisions[n] = 0.0;
      continue;
    }
    report.precisions[n] = static_cast<double>(report.matches[n]) / static_cast<double>(report.totals[n]);
    ++orders;
    if (report.matches[n] == 0) {
      zero = true;
    } else {
      log_sum += std::log(report.precisions[n]);
    }
  }
  if (report.hyp_len == 0) {
    report.brevity_penalty = 0.0;
  } else {
    report.brevity_penalty =
        std::min(1.0, std::exp(1.0 - static_cast<double>(report.ref_len) / static_cast<double>(report.hyp_len)));
  }
  report.score = zero ? 0.0 : 100.0 * report.brevity_penalty * std::exp(log_sum / orders);
}

}  // namespace

BleuReport corpus_bleu(const std::vector<Tokens>& hyps, const std::vector<std::vector<Tokens>>& refs) {
  if (hyps.size() != refs.size()) {
    throw AlignError("hypothesis/reference line counts differ: " + std::to_string(hyps.size()) + " vs " +
                     std::to_string(refs.size()));
  }
  if (hyps.empty()) throw AlignError("BLEU needs at least one line");
  BleuReport report;
  for (size_t i = 0; i < hyps.size(); ++i) {
    if (refs[i].empty()) throw AlignError("line " + std::to_string(i) + " has no reference");
    accumulate(report, hyps[i], refs[i]);
  }
  finish(report);
  return report;
}

BleuReport corpus_bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs) {
  std::vector<std::vector<Tokens>> multi;
  multi.reserve(refs.size());
  for (const auto& r : refs) multi.push_back({r});
  return corpus_bleu(hyps, multi);
}

BleuReport corpus_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  std::vector<Tokens> h, r;
  h.reserve(hyps.size());
  r.reserve(refs.size());
  for (const auto& l : hyps) h.push_back(bleu_tokenize(l));
  for (const auto& l : refs) r.push_back(bleu_tokenize(l));
  return corpus_bleu(h, r);
}

double sentence_bleu(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  BleuReport stats;
  accumulate(stats, hyp, {ref});
  if (stats.matches[0] == 0) return 0.0;
  double log_sum = std::log(static_cast<double>(stats.matches[0]) / static_cast<double>(stats.totals[0]));
  for (size_t n = 1; n < 4; ++n) {
    log_sum += std::log((static_cast<double>(stats.matches[n]) + 1.0) / (static_cast<double>(stats.totals[n]) + 1.0));
  }
  const double bp =
      std::min(1.0, std::exp(1.0 - static_cast<double>(stats.ref_len) / static_cast<double>(stats.hyp_len)));
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

std::vector<double> self_bleu(const std::vector<std::vector<Tokens>>& outputs) {
  if (outputs.size() < 2) throw ArityError("self-BLEU needs at least two models");
  const size_t lines = outputs.front().size();
  for (const auto& o : outputs) {
    if (o.size() != lines) throw AlignError("self-BLEU inputs have different line counts");
  }
  std::vector<double> scores;
  for (size_t m = 0; m < outputs.size(); ++m) {
    std::vector<std::vector<Tokens>> refs(lines);
    for (size_t i = 0; i < lines; ++i) {
      for (size_t o = 0; o < outputs.size(); ++o) {
        if (o != m) refs[i].push_back(outputs[o][i]);
      }
    }
    scores.push_back(corpus_bleu(outputs[m], refs).score);
  }
  return scores;
}

std::string bleu_json(const BleuReport& report) {
  nlohmann::ordered_json j;
  j["score"] = report.score;
  j["precisions"] = report.precisions;
  j["bp"] = report.brevity_penalty;
  j["hyp_len"] = report.hyp_len;
  j["ref_len"] = report.ref_len;
  return j.dump();
}

}  // namespace nmtforge
