#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mma {

inline constexpr std::string_view kMaskToken = "<MASK>";

// Word tokens of one class text: tokens[0] is the class label, the rest are
// prompt words.
struct TextInput {
  std::vector<std::string> tokens;

  bool operator==(const TextInput&) const = default;
};

// Whitespace word vocabulary. Id 0 is always the mask token.
class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}
  explicit Vocabulary(std::vector<std::string> words);

  std::int64_t id(std::string_view word) const;  // throws VocabularyError
  const std::string& word(std::int64_t id) const;
  bool contains(std::string_view word) const;
  std::int64_t size() const { return static_cast<std::int64_t>(words_.size()); }
  std::int64_t mask_id() const { return 0; }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<std::int64_t> encode(const TextInput& text) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::int64_t> index_;
};

std::vector<std::string> split_words(std::string_view text);
std::string join_words(const std::vector<std::string>& words);

}  // namespace mma
