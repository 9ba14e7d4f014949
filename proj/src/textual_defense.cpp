#include "mma/textual_defense.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mma/errors.hpp"

namespace mma {

EncoderPromptProbabilities::EncoderPromptProbabilities(const DualEncoder& encoder,
                                                       const torch::Tensor& images,
                                                       std::vector<std::string> class_names,
                                                       double temperature)
    : encoder_(encoder), class_names_(std::move(class_names)), temperature_(temperature) {
  if (class_names_.size() < 2) throw ConfigurationError("need at least 2 classes");
  if (!(temperature_ > 0)) throw ConfigurationError("temperature must be > 0");
  torch::NoGradGuard no_grad;
  image_embedding_ = normalize(encoder_.encode_image(images)).values().to(torch::kFloat64);
}

torch::Tensor EncoderPromptProbabilities::probs(const PromptTemplate& prompt) const {
  torch::NoGradGuard no_grad;
  const auto texts = build_class_texts(class_names_, prompt);
  const auto text = normalize(encoder_.encode_text(texts)).values().to(torch::kFloat64);
  return torch::softmax(torch::matmul(image_embedding_, text.t()) / temperature_, -1);
}

namespace {

void check_batch(const torch::Tensor& probs, std::span<const std::int64_t> labels) {
  if (probs.dim() != 2 || probs.size(0) != static_cast<std::int64_t>(labels.size())) {
    throw InputContractError("probability rows and labels differ in length");
  }
  if (labels.empty()) throw InputContractError("defense batch is empty");
}

}  // namespace

std::vector<std::int64_t> wrong_predictions(const torch::Tensor& probs,
                                            std::span<const std::int64_t> y_true) {
  check_batch(probs, y_true);
  const auto pred = predict_from_probs(probs);
  std::vector<std::int64_t> out(y_true.size());
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const auto p = pred[static_cast<std::int64_t>(i)].item<std::int64_t>();
    out[i] = p == y_true[i] ? kNotFooled : p;
  }
  return out;
}

double mean_label_probability(const torch::Tensor& probs, std::span<const std::int64_t> labels) {
  check_batch(probs, labels);
  auto p = probs.to(torch::kFloat64).contiguous();
  const auto* data = p.data_ptr<double>();
  const auto classes = p.size(1);
  double sum = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) throw InputContractError("label out of range");
    sum += data[static_cast<std::int64_t>(i) * classes + labels[i]];
  }
  return sum / static_cast<double>(labels.size());
}

namespace {

double clipped_drop(const torch::Tensor& before, const torch::Tensor& after,
                    std::span<const std::int64_t> y_prime) {
  check_batch(before, y_prime);
  auto b = before.to(torch::kFloat64).contiguous();
  auto a = after.to(torch::kFloat64).contiguous();
  const auto classes = b.size(1);
  double sum = 0;
  for (std::size_t i = 0; i < y_prime.size(); ++i) {
    if (y_prime[i] == kNotFooled) continue;
    const auto idx = static_cast<std::int64_t>(i) * classes + y_prime[i];
    sum += std::max(b.data_ptr<double>()[idx] - a.data_ptr<double>()[idx], 0.0);
  }
  return sum / static_cast<double>(y_prime.size());
}

}  // namespace

double saliency(std::size_t n, const PromptProbabilities& model, const PromptTemplate& prompt,
                std::span<const std::int64_t> y_prime) {
  const auto masked = masked_prompt(prompt, n);
  return clipped_drop(model.probs(prompt), model.probs(masked), y_prime);
}

std::vector<double> saliency_scores(const PromptProbabilities& model, const PromptTemplate& prompt,
                                    std::span<const std::int64_t> y_prime) {
  const auto base = model.probs(prompt);
  std::vector<double> scores;
  scores.reserve(prompt.size());
  for (std::size_t n = 1; n <= prompt.size(); ++n) {
    scores.push_back(clipped_drop(base, model.probs(masked_prompt(prompt, n)), y_prime));
  }
  return scores;
}

std::vector<std::size_t> select_update_set(std::span<const double> scores, double rho) {
  if (!(rho >= 0)) throw ConfigurationError("rho must be >= 0");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > rho) out.push_back(i + 1);
  }
  return out;
}

double percentile(std::span<const double> values, double q) {
  if (values.empty()) throw InputContractError("percentile of an empty set");
  if (!(q >= 0 && q <= 100)) throw ConfigurationError("percentile must lie in [0, 100]");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double RhoPolicy::threshold(std::span<const double> scores) const {
  validate();
  if (kind == Kind::kAbsolute) return value;
  return scores.empty() ? 0.0 : std::max(percentile(scores, value), 0.0);
}

void RhoPolicy::validate() const {
  if (kind == Kind::kAbsolute && !(value >= 0)) throw ConfigurationError("rho must be >= 0");
  if (kind == Kind::kPercentile && !(value >= 0 && value <= 100)) {
    throw ConfigurationError("rho percentile must lie in [0, 100]");
  }
}

std::string replace_token(std::size_t n, const PromptProbabilities& model,
                          const PromptTemplate& prompt, std::span<const std::int64_t> y_true,
                          const CandidateSet& cands) {
  if (cands.words.empty()) throw ConfigurationError("empty candidate set");
  if (cands.words.size() == 1) return cands.words.front();
  const auto& original = prompt.tokens.at(n - 1);
  const double baseline = mean_label_probability(model.probs(masked_prompt(prompt, n)), y_true);

  std::string best;
  double best_gain = -std::numeric_limits<double>::infinity();
  for (const auto& word : cands.words) {
    const double gain =
        mean_label_probability(model.probs(with_token(prompt, n, word)), y_true) - baseline;
    bool take = gain > best_gain;
    if (!take && gain == best_gain) {
      take = word == original || (best != original && word < best);
    }
    if (take) {
      best = word;
      best_gain = gain;
    }
  }
  return best;
}

void DefenseConfig::validate() const {
  rho.validate();
  if (k < 1) throw ConfigurationError("candidate count k must be >= 1");
}

DefenseResult defend(const PromptTemplate& prompt, const PromptProbabilities& model,
                     std::span<const std::int64_t> y_true, const CandidateProvider& provider,
                     const DefenseConfig& cfg) {
  cfg.validate();
  DefenseResult result;
  result.prompt = prompt;
  const auto base = model.probs(prompt);
  result.true_prob_before = mean_label_probability(base, y_true);
  const auto y_prime = wrong_predictions(base, y_true);
  result.fooled = static_cast<std::size_t>(
      std::count_if(y_prime.begin(), y_prime.end(), [](auto y) { return y != kNotFooled; }));

  result.saliency.scores = saliency_scores(model, prompt, y_prime);
  result.saliency.threshold = cfg.rho.threshold(result.saliency.scores);
  result.saliency.update_set = select_update_set(result.saliency.scores, result.saliency.threshold);

  for (const auto n : result.saliency.update_set) {
    const auto cands = candidates(provider, result.prompt, n, cfg.k);
    auto word = replace_token(n, model, result.prompt, y_true, cands);
    if (word != result.prompt.tokens[n - 1]) {
      result.replacements.emplace_back(n, word);
      result.prompt.tokens[n - 1] = std::move(word);
    }
  }
  result.true_prob_after = result.replacements.empty()
                               ? result.true_prob_before
                               : mean_label_probability(model.probs(result.prompt), y_true);
  return result;
}

DefenseResult defend(const PromptTemplate& prompt, const DualEncoder& encoder,
                     const torch::Tensor& adversarial, const torch::Tensor& labels,
                     const std::vector<std::string>& class_names, double temperature,
                     const CandidateProvider& provider, const DefenseConfig& cfg) {
  EncoderPromptProbabilities model(encoder, adversarial, class_names, temperature);
  auto y = labels.to(torch::kInt64).contiguous();
  std::vector<std::int64_t> y_true(y.data_ptr<std::int64_t>(), y.data_ptr<std::int64_t>() + y.numel());
  return defend(prompt, model, y_true, provider, cfg);
}

}  // namespace mma
