// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace nmtforge {

// Splits UTF-8 text into code-point strings. Throws EncodingError on malformed input.
std::vector<std::string> utf8_chars(std::string_view text);
size_t utf8_length(std::string_view text);
bool is_valid_utf8(std::string_view text);

// Maps full-width and CJK punctuation to ASCII, collapses whitespace runs to a
// single space and trims both ends. Idempotent.
std::string normalize_punct(std::string_view line);

// Whitespace split.
std::vector<std::string> split_tokens(std::string_view line);
std::string join_tokens(const std::vector<std::string>& tokens);

// Separates ASCII punctuation from words (except '.' and ',' between digits
// and '-' or '\'' inside words).
std::vector<std::string> tokenize(std::string_view line);
// Inverse-ish of tokenize: attaches closing punctuation to the preceding word
// and opening brackets to the following one.
std::string detokenize(const std::vector<std::string>& tokens);

// Per-character segmentation for text without word delimiters (CJK input).
std::vector<std::string> segment_characters(std::string_view line);

}  // namespace nmtforge
