#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace qttt {

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by four specials.
inline constexpr int kBosToken = 256;
inline constexpr int kEosToken = 257;
inline constexpr int kPadToken = 258;
inline constexpr int kSepToken = 259;
inline constexpr int kByteVocabSize = 260;

inline std::vector<int> bytes_to_tokens(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<int>(c));
  return out;
}

/// Specials are dropped.
inline std::string tokens_to_bytes(const std::vector<int>& tokens) {
  std::string out;
  for (int t : tokens)
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(t));
  return out;
}

}  // namespace qttt
