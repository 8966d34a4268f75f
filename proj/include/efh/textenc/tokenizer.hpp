#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

namespace efh::textenc {

// Byte-level vocabulary: ids 0..255 are raw bytes, then two specials.
inline constexpr std::size_t kByteTokens = 256;
inline constexpr std::size_t kClsToken = 256;
inline constexpr std::size_t kPadToken = 257;
inline constexpr std::size_t kVocabSize = 258;

/// [cls] followed by the UTF-8 bytes of `text`, truncated to `max_len`
/// tokens in total. Throws ArgumentError when `text` is blank.
std::vector<std::size_t> tokenize(std::string_view text, std::size_t max_len);

/// True when `text` has at least one non-whitespace character.
bool has_content(std::string_view text);

}  // namespace efh::textenc
