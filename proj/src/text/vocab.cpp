// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/text/vocab.h"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

#include "nmtforge/errors.h"

namespace nmtforge {

Vocabulary::Vocabulary() {
  for (const char* t : {"<pad>", "<s>", "</s>", "<unk>"}) add(t, 0);
}

void Vocabulary::add(const std::string& token, int64_t count) {
  if (!ids_.emplace(token, static_cast<int>(tokens_.size())).second) {
    throw VocabError("duplicate vocabulary entry: " + token);
  }
  tokens_.push_back(token);
  counts_.push_back(count);
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& corpus, size_t max_size) {
  std::map<std::string, int64_t> counts;
  for (const auto& line : corpus) {
    for (const auto& t : line) ++counts[t];
  }
  std::vector<std::pair<std::string, int64_t>> entries(counts.begin(), counts.end());
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [token, n] : entries) {
    if (max_size && v.size() >= max_size) break;
    if (v.contains(token)) continue;  // literal "<unk>" etc. in the data
    v.add(token, n);
  }
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<size_t>(id) >= tokens_.size()) {
    throw VocabError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
  }
  return tokens_[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> out;
  for (int id : ids) {
    if (id == kEos) break;
    if (id == kPad || id == kBos) continue;
    out.push_back(token(id));
  }
  return out;
}

void Vocabulary::write(std::ostream& out) const {
  for (size_t i = kReserved; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << counts_[i] << '\n';
}

Vocabulary Vocabulary::read(std::istream& in) {
  Vocabulary v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw FormatError("vocabulary line without tab: " + line);
    v.add(line.substr(0, tab), std::stoll(line.substr(tab + 1)));
  }
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  write(out);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  return read(in);
}

}  // namespace nmtforge
