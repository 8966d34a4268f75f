#include "efh/textenc/tokenizer.hpp"

#include <algorithm>
#include <cctype>

#include "efh/numcore/errors.hpp"

namespace efh::textenc {

bool has_content(std::string_view text) {
  for (unsigned char c : text) {
    if (!std::isspace(c)) return true;
  }
  return false;
}

std::vector<std::size_t> tokenize(std::string_view text, std::size_t max_len) {
  if (!has_content(text)) throw ArgumentError("cannot tokenize empty text");
  if (max_len < 2) throw ConfigError("max sequence length must be at least 2");
  std::vector<std::size_t> ids;
  ids.reserve(std::min(text.size() + 1, max_len));
  ids.push_back(kClsToken);
  for (unsigned char c : text) {
    if (ids.size() == max_len) break;
    ids.push_back(c);
  }
  return ids;
}

}  // namespace efh::textenc
