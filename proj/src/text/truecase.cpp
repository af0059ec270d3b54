// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/text/truecase.h"

#include <istream>
#include <ostream>
#include <sstream>

#include "nmtforge/errors.h"

namespace nmtforge {

std::string ascii_lower(std::string s) {
  for (char& c : s) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return s;
}

Truecaser Truecaser::learn(const std::vector<std::vector<std::string>>& corpus) {
  Truecaser tc;
  for (const auto& line : corpus) {
    for (const auto& token : line) ++tc.counts_[token];
  }
  if (tc.counts_.empty()) throw EmptyCorpusError("cannot learn truecasing from an empty corpus");
  return tc;
}

int64_t Truecaser::count(const std::string& form) const {
  auto it = counts_.find(form);
  return it == counts_.end() ? 0 : it->second;
}

std::vector<std::string> Truecaser::apply(std::vector<std::string> tokens) const {
  if (tokens.empty()) return tokens;
  std::string lower = ascii_lower(tokens[0]);
  if (lower != tokens[0] && count(lower) > count(tokens[0])) tokens[0] = std::move(lower);
  return tokens;
}

void Truecaser::write(std::ostream& out) const {
  for (const auto& [form, n] : counts_) out << form << '\t' << n << '\n';
}

Truecaser Truecaser::read(std::istream& in) {
  Truecaser tc;
  std::string line;
  while (std::getline(in, line)) {
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw FormatError("truecase model line without tab: " + line);
    tc.counts_[line.substr(0, tab)] = std::stoll(line.substr(tab + 1));
  }
  if (tc.counts_.empty()) throw EmptyCorpusError("empty truecase model");
  return tc;
}

std::vector<std::string> detruecase(std::vector<std::string> tokens) {
  if (!tokens.empty() && !tokens[0].empty()) {
    char& c = tokens[0][0];
    if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
  }
  return tokens;
}

}  // namespace nmtforge
