#include "mma/prompt.hpp"

#include "mma/errors.hpp"

namespace mma {

PromptTemplate parse_prompt(std::string_view text) {
  PromptTemplate prompt{split_words(text)};
  if (prompt.tokens.empty()) throw ConfigurationError("prompt template must have at least one word");
  return prompt;
}

std::string to_string(const PromptTemplate& prompt) { return join_words(prompt.tokens); }

TextInput build_text_input(std::string_view class_name, const PromptTemplate& prompt) {
  if (class_name.empty()) throw ConfigurationError("class name must be nonempty");
  if (class_name.find_first_of(" \t\r\n") != std::string_view::npos) {
    throw ConfigurationError("class name must be a single word: '" + std::string(class_name) + "'");
  }
  TextInput text;
  text.tokens.reserve(prompt.size() + 1);
  text.tokens.emplace_back(class_name);
  text.tokens.insert(text.tokens.end(), prompt.tokens.begin(), prompt.tokens.end());
  return text;
}

std::vector<TextInput> build_class_texts(const std::vector<std::string>& class_names,
                                         const PromptTemplate& prompt) {
  std::vector<TextInput> texts;
  texts.reserve(class_names.size());
  for (const auto& c : class_names) texts.push_back(build_text_input(c, prompt));
  return texts;
}

std::pair<std::string, PromptTemplate> parse_text_input(const TextInput& text) {
  if (text.tokens.empty()) throw InputContractError("text input has no label token");
  return {text.tokens.front(),
          PromptTemplate{{text.tokens.begin() + 1, text.tokens.end()}}};
}

namespace {
void check_position(const PromptTemplate& prompt, std::size_t n) {
  if (n < 1 || n > prompt.size()) {
    throw InputContractError("prompt position " + std::to_string(n) + " outside 1.." +
                             std::to_string(prompt.size()));
  }
}
}  // namespace

PromptTemplate masked_prompt(const PromptTemplate& prompt, std::size_t n) {
  return with_token(prompt, n, std::string(kMaskToken));
}

PromptTemplate with_token(const PromptTemplate& prompt, std::size_t n, std::string word) {
  check_position(prompt, n);
  auto out = prompt;
  out.tokens[n - 1] = std::move(word);
  return out;
}

}  // namespace mma
