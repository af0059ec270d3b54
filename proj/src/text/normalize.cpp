// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/text/normalize.h"

#include <cctype>
#include <cstdint>
#include <sstream>

#include "nmtforge/errors.h"

namespace nmtforge {
namespace {

// Length of the UTF-8 sequence at text[i], or 0 if malformed.
size_t sequence_length(std::string_view text, size_t i) {
  const auto lead = static_cast<unsigned char>(text[i]);
  size_t len = 0;
  uint32_t min = 0;
  if (lead < 0x80) return 1;
  if ((lead & 0xE0) == 0xC0) {
    len = 2;
    min = 0x80;
  } else if ((lead & 0xF0) == 0xE0) {
    len = 3;
    min = 0x800;
  } else if ((lead & 0xF8) == 0xF0) {
    len = 4;
    min = 0x10000;
  } else {
    return 0;
  }
  if (i + len > text.size()) return 0;
  uint32_t cp = lead & (0x7F >> len);
  for (size_t k = 1; k < len; ++k) {
    const auto c = static_cast<unsigned char>(text[i + k]);
    if ((c & 0xC0) != 0x80) return 0;
    cp = (cp << 6) | (c & 0x3F);
  }
  if (cp < min || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return 0;
  return len;
}

uint32_t decode_at(std::string_view text, size_t i, size_t len) {
  const auto lead = static_cast<unsigned char>(text[i]);
  if (len == 1) return lead;
  uint32_t cp = lead & (0x7F >> len);
  for (size_t k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(text[i + k]) & 0x3F);
  return cp;
}

// Half-width replacement for a punctuation code point, or nullptr.
const char* punct_replacement(uint32_t cp) {
  static thread_local char single[2] = {0, 0};
  if (cp >= 0xFF01 && cp <= 0xFF5E) {
    const char ascii = static_cast<char>(cp - 0xFF01 + 0x21);
    if (std::ispunct(static_cast<unsigned char>(ascii))) {
      single[0] = ascii;
      return single;
    }
    return nullptr;
  }
  switch (cp) {
    case 0x3000: return " ";   // ideographic space
    case 0x3001: return ",";   // 、
    case 0x3002: return ".";   // 。
    case 0x2018:
    case 0x2019: return "'";
    case 0x201C:
    case 0x201D: return "\"";
    case 0x2013:
    case 0x2014: return "-";
    case 0x2026: return "...";
    case 0x00A0: return " ";
    default: return nullptr;
  }
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v'; }

bool is_split_punct(char c) {
  switch (c) {
    case '.': case ',': case '!': case '?': case ';': case ':': case '"':
    case '(': case ')': case '[': case ']': case '{': case '}':
      return true;
    default:
      return false;
  }
}

bool is_digit(char c) { return c >= '0' && c <= '9'; }

}  // namespace

bool is_valid_utf8(std::string_view text) {
  for (size_t i = 0; i < text.size();) {
    const size_t len = sequence_length(text, i);
    if (len == 0) return false;
    i += len;
  }
  return true;
}

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  for (size_t i = 0; i < text.size();) {
    const size_t len = sequence_length(text, i);
    if (len == 0) throw EncodingError("invalid UTF-8 at byte " + std::to_string(i));
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

size_t utf8_length(std::string_view text) {
  size_t n = 0;
  for (size_t i = 0; i < text.size(); ++n) {
    const size_t len = sequence_length(text, i);
    if (len == 0) throw EncodingError("invalid UTF-8 at byte " + std::to_string(i));
    i += len;
  }
  return n;
}

std::string normalize_punct(std::string_view line) {
  std::string mapped;
  mapped.reserve(line.size());
  for (size_t i = 0; i < line.size();) {
    const size_t len = sequence_length(line, i);
    if (len == 0) throw EncodingError("invalid UTF-8 at byte " + std::to_string(i));
    if (const char* rep = punct_replacement(decode_at(line, i, len))) {
      mapped += rep;
    } else {
      mapped.append(line.substr(i, len));
    }
    i += len;
  }
  std::string out;
  out.reserve(mapped.size());
  bool pending_space = false;
  for (char c : mapped) {
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += c;
  }
  return out;
}

std::vector<std::string> split_tokens(std::string_view line) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    size_t j = i;
    while (j < line.size() && !is_space(line[j])) ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view line) {
  std::vector<std::string> out;
  for (const std::string& word : split_tokens(line)) {
    std::string current;
    for (size_t i = 0; i < word.size(); ++i) {
      const char c = word[i];
      const bool numeric_sep = (c == '.' || c == ',') && i > 0 && i + 1 < word.size() && is_digit(word[i - 1]) &&
                               is_digit(word[i + 1]);
      if (is_split_punct(c) && !numeric_sep) {
        if (!current.empty()) out.push_back(std::move(current));
        current.clear();
        out.emplace_back(1, c);
      } else {
        current += c;
      }
    }
    if (!current.empty()) out.push_back(std::move(current));
  }
  return out;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  auto closing = [](const std::string& t) {
    return t == "." || t == "," || t == "!" || t == "?" || t == ";" || t == ":" || t == ")" || t == "]" ||
           t == "}";
  };
  auto opening = [](const std::string& t) { return t == "(" || t == "[" || t == "{"; };
  std::string out;
  bool glue_next = true;
  for (const std::string& t : tokens) {
    if (!glue_next && !closing(t)) out += ' ';
    out += t;
    glue_next = opening(t);
  }
  return out;
}

std::vector<std::string> segment_characters(std::string_view line) {
  std::vector<std::string> out;
  for (std::string& ch : utf8_chars(line)) {
    if (ch.size() == 1 && is_space(ch[0])) continue;
    out.push_back(std::move(ch));
  }
  return out;
}

}  // namespace nmtforge
