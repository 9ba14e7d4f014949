#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mma/text.hpp"

namespace mma {

// Dynamic prompt words v_1..v_m. The class label always occupies slot 0 of
// the assembled text, ahead of these tokens.
struct PromptTemplate {
  std::vector<std::string> tokens;

  std::size_t size() const { return tokens.size(); }
  bool operator==(const PromptTemplate&) const = default;
};

PromptTemplate parse_prompt(std::string_view text);
std::string to_string(const PromptTemplate& prompt);

TextInput build_text_input(std::string_view class_name, const PromptTemplate& prompt);
std::vector<TextInput> build_class_texts(const std::vector<std::string>& class_names,
                                         const PromptTemplate& prompt);
// Inverse of build_text_input.
std::pair<std::string, PromptTemplate> parse_text_input(const TextInput& text);

// Positions are 1-based, matching v_1..v_m.
PromptTemplate masked_prompt(const PromptTemplate& prompt, std::size_t n);
PromptTemplate with_token(const PromptTemplate& prompt, std::size_t n, std::string word);

}  // namespace mma
