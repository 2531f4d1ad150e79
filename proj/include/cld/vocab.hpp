#pragma once

// Closed vocabulary of the synthetic color/shape prompt language.

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "cld/errors.hpp"

namespace cld {

struct NamedColor {
  std::string_view name;
  double r, g, b;
};

inline constexpr std::array<NamedColor, 14> kPalette{{
    {"red", 0.90, 0.10, 0.10},    {"green", 0.10, 0.70, 0.20},
    {"blue", 0.10, 0.25, 0.90},   {"yellow", 0.95, 0.85, 0.10},
    {"cyan", 0.10, 0.80, 0.85},   {"magenta", 0.85, 0.10, 0.80},
    {"orange", 0.95, 0.50, 0.05}, {"purple", 0.50, 0.15, 0.70},
    {"white", 0.96, 0.96, 0.96},  {"black", 0.05, 0.05, 0.05},
    {"gray", 0.50, 0.50, 0.50},   {"pink", 0.95, 0.55, 0.70},
    {"brown", 0.55, 0.30, 0.10},  {"teal", 0.00, 0.50, 0.50},
}};

inline constexpr std::array<std::string_view, 4> kShapeWords{"circle", "rectangle",
                                                             "triangle", "ring"};

inline constexpr std::array<std::string_view, 6> kExtraWords{
    "background", "solid", "gradient", "translucent", "layer", "and"};

inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words = [] {
    std::vector<std::string> w;
    for (const auto& c : kPalette) w.emplace_back(c.name);
    for (auto s : kShapeWords) w.emplace_back(s);
    for (auto s : kExtraWords) w.emplace_back(s);
    return w;
  }();
  return words;
}

inline std::size_t vocab_size() { return vocabulary().size(); }

inline int token_id(std::string_view word) {
  const auto& words = vocabulary();
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i] == word) return static_cast<int>(i);
  }
  throw ValidationError("unknown vocabulary word '" + std::string(word) + "'");
}

inline std::vector<int> encode_prompt(const std::vector<std::string>& words) {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(token_id(w));
  return ids;
}

// Splits on whitespace.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (ch == ' ' || ch == '\t' || ch == '\n' || ch == ',') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace cld
