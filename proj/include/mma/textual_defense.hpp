#pragma once

// Prompt-side defense: find the prompt words that most support the wrong
// predictions on adversarial images (masked saliency) and swap each for the
// candidate that best restores the true-label probability.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "mma/candidates.hpp"
#include "mma/dual_encoder.hpp"
#include "mma/prompt.hpp"

namespace mma {

// Marks a sample whose current prediction is already correct.
inline constexpr std::int64_t kNotFooled = -1;

// Class probabilities of a fixed image batch under a candidate prompt.
class PromptProbabilities {
 public:
  virtual ~PromptProbabilities() = default;
  // [B, C], float64.
  virtual torch::Tensor probs(const PromptTemplate& prompt) const = 0;
};

class EncoderPromptProbabilities final : public PromptProbabilities {
 public:
  EncoderPromptProbabilities(const DualEncoder& encoder, const torch::Tensor& images,
                             std::vector<std::string> class_names, double temperature);
  torch::Tensor probs(const PromptTemplate& prompt) const override;

 private:
  const DualEncoder& encoder_;
  torch::Tensor image_embedding_;
  std::vector<std::string> class_names_;
  double temperature_;
};

// Per sample: the predicted label if it differs from the truth, else kNotFooled.
std::vector<std::int64_t> wrong_predictions(const torch::Tensor& probs,
                                            std::span<const std::int64_t> y_true);

double mean_label_probability(const torch::Tensor& probs, std::span<const std::int64_t> labels);

// Mean over the batch of max(p(y'|prompt) - p(y'|prompt masked at n), 0);
// kNotFooled samples contribute 0.
double saliency(std::size_t n, const PromptProbabilities& model, const PromptTemplate& prompt,
                std::span<const std::int64_t> y_prime);
std::vector<double> saliency_scores(const PromptProbabilities& model, const PromptTemplate& prompt,
                                    std::span<const std::int64_t> y_prime);

// 1-based positions whose score is strictly greater than rho.
std::vector<std::size_t> select_update_set(std::span<const double> scores, double rho);

// Linear-interpolation percentile, q in [0, 100].
double percentile(std::span<const double> values, double q);

struct RhoPolicy {
  enum class Kind { kAbsolute, kPercentile };
  Kind kind = Kind::kPercentile;
  double value = 60.0;

  double threshold(std::span<const double> scores) const;
  void validate() const;
  bool operator==(const RhoPolicy&) const = default;
};

// Candidate maximizing mean p(y_true | prompt with candidate at n) minus the
// masked baseline. Ties go to the original word, else the lexicographically
// first word.
std::string replace_token(std::size_t n, const PromptProbabilities& model,
                          const PromptTemplate& prompt, std::span<const std::int64_t> y_true,
                          const CandidateSet& cands);

struct DefenseConfig {
  RhoPolicy rho;
  std::size_t k = 10;

  void validate() const;
};

struct SaliencyReport {
  std::vector<double> scores;
  double threshold = 0;
  std::vector<std::size_t> update_set;
};

struct DefenseResult {
  PromptTemplate prompt;
  SaliencyReport saliency;
  std::vector<std::pair<std::size_t, std::string>> replacements;  // (position, new word)
  std::size_t fooled = 0;
  double true_prob_before = 0;
  double true_prob_after = 0;
};

// Scores every position on the input prompt, then replaces the update set
// in ascending position order; each replacement is in effect when the next
// position is scored.
DefenseResult defend(const PromptTemplate& prompt, const PromptProbabilities& model,
                     std::span<const std::int64_t> y_true, const CandidateProvider& provider,
                     const DefenseConfig& cfg);

DefenseResult defend(const PromptTemplate& prompt, const DualEncoder& encoder,
                     const torch::Tensor& adversarial, const torch::Tensor& labels,
                     const std::vector<std::string>& class_names, double temperature,
                     const CandidateProvider& provider, const DefenseConfig& cfg);

}  // namespace mma
