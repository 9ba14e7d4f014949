#include "mma/text.hpp"

#include <sstream>

#include "mma/errors.hpp"

namespace mma {

Vocabulary::Vocabulary(std::vector<std::string> words) {
  words_.emplace_back(kMaskToken);
  for (auto& w : words) {
    if (w == kMaskToken) continue;
    if (w.empty() || w.find_first_of(" \t\r\n") != std::string::npos) {
      throw VocabularyError("vocabulary words must be nonempty and whitespace-free: '" + w + "'");
    }
    words_.push_back(std::move(w));
  }
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<std::int64_t>(i)).second) {
      throw VocabularyError("duplicate vocabulary word '" + words_[i] + "'");
    }
  }
}

std::int64_t Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) throw VocabularyError("unknown token '" + std::string(word) + "'");
  return it->second;
}

const std::string& Vocabulary::word(std::int64_t id) const {
  if (id < 0 || id >= size()) throw VocabularyError("unknown token id " + std::to_string(id));
  return words_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view word) const {
  return index_.contains(std::string(word));
}

std::vector<std::int64_t> Vocabulary::encode(const TextInput& text) const {
  std::vector<std::int64_t> ids;
  ids.reserve(text.tokens.size());
  for (const auto& t : text.tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace mma
