#pragma once

// Replacement-word providers for prompt tokens.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <torch/script.h>

#include "mma/prompt.hpp"

namespace mma {

class CandidateProvider {
 public:
  virtual ~CandidateProvider() = default;
  virtual std::string name() const = 0;
  // Up to k fill-in words for position n (1-based), best first, never
  // including the word currently at n.
  virtual std::vector<std::string> fill_ins(const PromptTemplate& prompt, std::size_t n,
                                            std::size_t k) const = 0;
};

// Offline provider: a fixed ranked synonym list per word.
class StaticSynonymProvider final : public CandidateProvider {
 public:
  explicit StaticSynonymProvider(std::map<std::string, std::vector<std::string>> table);

  // Every word of the pool maps to all other pool words, in pool order.
  static StaticSynonymProvider from_pool(const std::vector<std::string>& pool);
  // Text format, one entry per line: "word: syn1 syn2 ...". '#' starts a comment.
  static StaticSynonymProvider load(const std::filesystem::path& path);

  // Copy keeping only synonyms that satisfy `allowed`.
  StaticSynonymProvider restricted_to(const std::function<bool(const std::string&)>& allowed) const;

  std::string name() const override { return "static"; }
  std::vector<std::string> fill_ins(const PromptTemplate& prompt, std::size_t n,
                                    std::size_t k) const override;

 private:
  std::map<std::string, std::vector<std::string>> table_;
};

// Neural provider: ranks every allowed word by the log-likelihood a causal
// language model assigns to the prompt with that word substituted at n.
//
// The TorchScript module maps ids[1, L] -> logits[1, L, V]; the JSON sidecar
// is { "bos": id, "words": { "word": [ids], ... } } (tools/export_gpt2.py).
class LanguageModelProvider final : public CandidateProvider {
 public:
  LanguageModelProvider(const std::filesystem::path& module_path,
                        const std::filesystem::path& sidecar_path);

  // Drops fill-in words that fail `allowed` (e.g. words the surrogate cannot encode).
  void restrict_to(const std::function<bool(const std::string&)>& allowed);

  std::string name() const override { return "lm"; }
  std::vector<std::string> fill_ins(const PromptTemplate& prompt, std::size_t n,
                                    std::size_t k) const override;

  double sequence_log_likelihood(const std::vector<std::string>& words) const;

 private:
  mutable torch::jit::Module module_;
  std::int64_t bos_ = 0;
  std::map<std::string, std::vector<std::int64_t>> word_ids_;
  std::vector<std::string> fill_words_;  // sorted
};

// Γ(v_n): the provider's top-k fill-ins with the original word first.
struct CandidateSet {
  std::vector<std::string> words;
};

CandidateSet candidates(const CandidateProvider& provider, const PromptTemplate& prompt,
                        std::size_t n, std::size_t k);

}  // namespace mma
