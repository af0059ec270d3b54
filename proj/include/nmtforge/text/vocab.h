// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace nmtforge {

// Token <-> id map with reserved ids 0..3 for <pad>, <s>, </s>, <unk>.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kReserved = 4;

  Vocabulary();

  // Non-reserved tokens ordered by count desc then token asc. max_size bounds
  // the total size including reserved entries (0 = unbounded).
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus, size_t max_size = 0);

  size_t size() const { return tokens_.size(); }
  int id(const std::string& token) const;
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }
  const std::string& token(int id) const;
  int64_t count(int id) const { return counts_.at(static_cast<size_t>(id)); }

  std::vector<int> encode(std::span<const std::string> tokens) const;
  // Stops at </s>; drops <pad>/<s>.
  std::vector<std::string> decode(std::span<const int> ids) const;

  // "token<TAB>count" per line, non-reserved entries only.
  void write(std::ostream& out) const;
  static Vocabulary read(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void add(const std::string& token, int64_t count);

  std::vector<std::string> tokens_;
  std::vector<int64_t> counts_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace nmtforge
