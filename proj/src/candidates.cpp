#include "mma/candidates.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "mma/errors.hpp"

namespace mma {

StaticSynonymProvider::StaticSynonymProvider(std::map<std::string, std::vector<std::string>> table)
    : table_(std::move(table)) {}

StaticSynonymProvider StaticSynonymProvider::from_pool(const std::vector<std::string>& pool) {
  std::map<std::string, std::vector<std::string>> table;
  for (const auto& word : pool) {
    auto& row = table[word];
    for (const auto& other : pool) {
      if (other != word) row.push_back(other);
    }
  }
  return StaticSynonymProvider(std::move(table));
}

StaticSynonymProvider StaticSynonymProvider::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ExternalDependencyError("cannot open synonym table: " + path.string());
  std::map<std::string, std::vector<std::string>> table;
  std::string line;
  for (int line_no = 1; std::getline(in, line); ++line_no) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 'word: synonyms'");
    }
    auto key = split_words(line.substr(0, colon));
    if (key.size() != 1) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected a single head word");
    }
    table[key.front()] = split_words(line.substr(colon + 1));
  }
  return StaticSynonymProvider(std::move(table));
}

StaticSynonymProvider StaticSynonymProvider::restricted_to(
    const std::function<bool(const std::string&)>& allowed) const {
  auto table = table_;
  for (auto& [_, row] : table) std::erase_if(row, [&](const std::string& w) { return !allowed(w); });
  return StaticSynonymProvider(std::move(table));
}

std::vector<std::string> StaticSynonymProvider::fill_ins(const PromptTemplate& prompt,
                                                         std::size_t n, std::size_t k) const {
  if (n < 1 || n > prompt.size()) throw InputContractError("candidate position out of range");
  const auto& original = prompt.tokens[n - 1];
  std::vector<std::string> out;
  auto it = table_.find(original);
  if (it == table_.end()) return out;
  for (const auto& w : it->second) {
    if (out.size() >= k) break;
    if (w != original && std::find(out.begin(), out.end(), w) == out.end()) out.push_back(w);
  }
  return out;
}

LanguageModelProvider::LanguageModelProvider(const std::filesystem::path& module_path,
                                             const std::filesystem::path& sidecar_path) {
  if (!std::filesystem::exists(module_path)) {
    throw ExternalDependencyError("language model not found: " + module_path.string());
  }
  std::ifstream in(sidecar_path);
  if (!in) throw ExternalDependencyError("language model sidecar not found: " + sidecar_path.string());
  try {
    module_ = torch::jit::load(module_path.string());
  } catch (const c10::Error& e) {
    throw ExternalDependencyError("cannot load language model " + module_path.string() + ": " +
                                  e.what_without_backtrace());
  }
  module_.eval();
  try {
    const auto side = nlohmann::json::parse(in);
    bos_ = side.at("bos");
    word_ids_ = side.at("words").get<std::map<std::string, std::vector<std::int64_t>>>();
    for (const auto& [word, _] : word_ids_) fill_words_.push_back(word);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(sidecar_path.string() + ": bad language model sidecar: " + e.what());
  }
}

void LanguageModelProvider::restrict_to(const std::function<bool(const std::string&)>& allowed) {
  std::erase_if(fill_words_, [&](const std::string& w) { return !allowed(w); });
}

double LanguageModelProvider::sequence_log_likelihood(const std::vector<std::string>& words) const {
  std::vector<std::int64_t> ids{bos_};
  for (const auto& w : words) {
    auto it = word_ids_.find(w);
    if (it == word_ids_.end()) throw VocabularyError("language model has no word '" + w + "'");
    ids.insert(ids.end(), it->second.begin(), it->second.end());
  }
  torch::NoGradGuard no_grad;
  auto input = torch::tensor(ids, torch::kInt64).unsqueeze(0);
  auto logits = module_.forward({input}).toTensor().to(torch::kFloat64);
  auto log_p = torch::log_softmax(logits[0], -1);
  double total = 0;
  for (std::size_t t = 1; t < ids.size(); ++t) {
    total += log_p[static_cast<std::int64_t>(t - 1)][ids[t]].item<double>();
  }
  return total;
}

std::vector<std::string> LanguageModelProvider::fill_ins(const PromptTemplate& prompt,
                                                         std::size_t n, std::size_t k) const {
  if (n < 1 || n > prompt.size()) throw InputContractError("candidate position out of range");
  const auto& original = prompt.tokens[n - 1];
  std::vector<std::pair<double, std::string>> scored;
  auto words = prompt.tokens;
  for (const auto& word : fill_words_) {
    if (word == original || word == kMaskToken) continue;
    words[n - 1] = word;
    scored.emplace_back(sequence_log_likelihood(words), word);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < scored.size() && i < k; ++i) out.push_back(scored[i].second);
  return out;
}

CandidateSet candidates(const CandidateProvider& provider, const PromptTemplate& prompt,
                        std::size_t n, std::size_t k) {
  if (n < 1 || n > prompt.size()) throw InputContractError("candidate position out of range");
  CandidateSet set;
  set.words.push_back(prompt.tokens[n - 1]);
  for (auto& w : provider.fill_ins(prompt, n, k)) {
    if (std::find(set.words.begin(), set.words.end(), w) == set.words.end()) {
      set.words.push_back(std::move(w));
    }
  }
  return set;
}

}  // namespace mma
