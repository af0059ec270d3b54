// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/text/bpe.h"

#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include "nmtforge/errors.h"
#include "nmtforge/text/normalize.h"

namespace nmtforge {
namespace {

std::vector<std::string> initial_symbols(const std::string& word) { return utf8_chars(word); }

// Replaces every left-to-right occurrence of (a, b) with a+b.
void merge_pair(std::vector<std::string>& symbols, const BpeModel::Merge& pair) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == pair.first && symbols[i + 1] == pair.second) {
      out.push_back(symbols[i] + symbols[i + 1]);
      ++i;
    } else {
      out.push_back(std::move(symbols[i]));
    }
  }
  symbols = std::move(out);
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

BpeModel::BpeModel(std::vector<Merge> merges) : merges_(std::move(merges)) {
  for (size_t i = 0; i < merges_.size(); ++i) {
    if (!rank_.emplace(merges_[i], i).second) {
      throw FormatError("duplicate BPE merge: " + merges_[i].first + " " + merges_[i].second);
    }
  }
}

BpeModel BpeModel::learn(const std::vector<std::vector<std::string>>& corpus, size_t merges) {
  std::map<std::string, int64_t> word_counts;
  for (const auto& line : corpus) {
    for (const auto& w : line) ++word_counts[w];
  }
  std::vector<std::pair<std::vector<std::string>, int64_t>> words;
  words.reserve(word_counts.size());
  for (const auto& [w, n] : word_counts) words.emplace_back(initial_symbols(w), n);

  std::vector<Merge> learned;
  while (learned.size() < merges) {
    std::map<Merge, int64_t> pairs;
    for (const auto& [symbols, n] : words) {
      for (size_t i = 0; i + 1 < symbols.size(); ++i) pairs[{symbols[i], symbols[i + 1]}] += n;
    }
    if (pairs.empty()) break;
    // std::map iterates pairs in ascending order, so the first maximum wins ties.
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    const Merge chosen = best->first;
    for (auto& [symbols, n] : words) merge_pair(symbols, chosen);
    learned.push_back(chosen);
  }
  return BpeModel(std::move(learned));
}

std::vector<std::string> BpeModel::segment_word(const std::string& word) const {
  std::vector<std::string> symbols = initial_symbols(word);
  while (symbols.size() > 1) {
    size_t best_rank = std::numeric_limits<size_t>::max();
    Merge best;
    for (size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = rank_.find({symbols[i], symbols[i + 1]});
      if (it != rank_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = it->first;
      }
    }
    if (best_rank == std::numeric_limits<size_t>::max()) break;
    merge_pair(symbols, best);
  }
  for (size_t i = 0; i + 1 < symbols.size(); ++i) symbols[i] += kSeparator;
  return symbols;
}

std::vector<std::string> BpeModel::apply(const std::vector<std::string>& tokens) const {
  std::vector<std::string> out;
  for (const auto& w : tokens) {
    for (auto& s : segment_word(w)) out.push_back(std::move(s));
  }
  return out;
}

void BpeModel::write(std::ostream& out) const {
  for (const auto& [a, b] : merges_) out << a << ' ' << b << '\n';
}

BpeModel BpeModel::read(std::istream& in) {
  std::vector<Merge> merges;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto space = line.find(' ');
    if (space == std::string::npos || line.find(' ', space + 1) != std::string::npos) {
      throw FormatError("malformed BPE merge line: " + line);
    }
    merges.emplace_back(line.substr(0, space), line.substr(space + 1));
  }
  return BpeModel(std::move(merges));
}

void BpeModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  write(out);
}

BpeModel BpeModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  return read(in);
}

std::vector<std::string> bpe_undo(const std::vector<std::string>& subwords) {
  const std::string sep = BpeModel::kSeparator;
  std::vector<std::string> words;
  std::string current;
  bool open = false;
  for (const auto& s : subwords) {
    if (ends_with(s, sep)) {
      current += s.substr(0, s.size() - sep.size());
      open = true;
    } else {
      current += s;
      words.push_back(std::move(current));
      current.clear();
      open = false;
    }
  }
  if (open) words.push_back(std::move(current));
  return words;
}

}  // namespace nmtforge
