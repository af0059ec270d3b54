// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace nmtforge {

// Byte-pair encoding over code points. Merges never cross word boundaries;
// applied output marks every non-final subword of a word with "@@".
class BpeModel {
 public:
  using Merge = std::pair<std::string, std::string>;

  static constexpr const char* kSeparator = "@@";

  BpeModel() = default;
  explicit BpeModel(std::vector<Merge> merges);

  // Greedy most-frequent-pair merges; ties go to the lexicographically
  // smallest pair. Stops early when no pair remains.
  static BpeModel learn(const std::vector<std::vector<std::string>>& corpus, size_t merges);

  const std::vector<Merge>& merges() const { return merges_; }
  size_t merge_count() const { return merges_.size(); }

  std::vector<std::string> segment_word(const std::string& word) const;
  std::vector<std::string> apply(const std::vector<std::string>& tokens) const;

  // One merge per line: "left right".
  void write(std::ostream& out) const;
  static BpeModel read(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static BpeModel load(const std::filesystem::path& path);

 private:
  std::vector<Merge> merges_;
  std::map<Merge, size_t> rank_;
};

// Joins "@@"-continued subwords back into words.
std::vector<std::string> bpe_undo(const std::vector<std::string>& subwords);

}  // namespace nmtforge
