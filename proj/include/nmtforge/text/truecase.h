// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace nmtforge {

// Surface-form frequencies over a tokenized corpus. A sentence-initial token
// is lowered when its lowercase form is strictly more frequent corpus-wide.
class Truecaser {
 public:
  static Truecaser learn(const std::vector<std::vector<std::string>>& corpus);

  std::vector<std::string> apply(std::vector<std::string> tokens) const;
  int64_t count(const std::string& form) const;

  void write(std::ostream& out) const;
  static Truecaser read(std::istream& in);

 private:
  std::map<std::string, int64_t> counts_;
};

// Restores a capital on the first letter of the sentence-initial token.
std::vector<std::string> detruecase(std::vector<std::string> tokens);

std::string ascii_lower(std::string s);

}  // namespace nmtforge
