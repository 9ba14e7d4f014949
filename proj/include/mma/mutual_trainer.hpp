#pragma once

// Alternating optimization: num_g passes of generator updates against the
// current prompt, then one prompt-defense pass on fresh adversarial samples,
// repeated for a fixed number of outer iterations.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mma/candidates.hpp"
#include "mma/dataset.hpp"
#include "mma/dual_encoder.hpp"
#include "mma/eval_harness.hpp"
#include "mma/generator.hpp"
#include "mma/textual_defense.hpp"
#include "mma/visual_attack.hpp"

namespace mma {

struct TrainSchedule {
  std::int64_t outer_iterations = 10;
  std::int64_t num_g = 2;  // full passes over the training set per iteration
  std::int64_t batch_size = 32;
  std::int64_t defense_batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainSchedule&) const = default;
};

struct StepRecord {
  std::int64_t iteration = 0;
  std::int64_t step = 0;
  AttackLossReport loss;

  nlohmann::json to_json() const;
};

struct IterationRecord {
  std::int64_t iteration = 0;
  std::int64_t steps = 0;
  AttackLossReport mean_loss;
  // Surrogate zero-shot accuracy on the held-out split.
  double surrogate_clean_acc = 0;       // prompt after this iteration's defense
  double surrogate_adv_acc = 0;         // prompt after this iteration's defense
  double surrogate_clean_acc_initial = 0;  // initial prompt
  double surrogate_adv_acc_initial = 0;    // initial prompt
  std::optional<double> target_clean_acc;
  std::optional<double> target_adv_acc;
  std::string attack_prompt;
  std::string attack_text_hash;  // fingerprint of the class-text embeddings used in the attack
  std::string prompt;            // snapshot after the defense pass
  std::optional<SaliencyReport> saliency;
  std::vector<std::pair<std::size_t, std::string>> replacements;
  double defense_true_prob_before = 0;
  double defense_true_prob_after = 0;

  nlohmann::json to_json() const;
  static IterationRecord from_json(const nlohmann::json& j);
};

struct TrainerSetup {
  const DualEncoder& surrogate;
  const ImageDataset& train;
  const ImageDataset& eval;
  const CandidateProvider& candidates;
  const TargetModel* monitor = nullptr;  // held-out black-box target
};

struct TrainerOptions {
  TrainSchedule schedule;
  AttackConfig attack;
  DefenseConfig defense;
  double temperature = 1.0;
  bool defense_enabled = true;
  std::filesystem::path run_dir;  // empty: nothing persisted
};

struct TrainResult {
  GeneratorState generator;
  PromptTemplate prompt;
  std::vector<IterationRecord> records;
  std::int64_t generator_epochs = 0;
  std::int64_t defense_passes = 0;
  bool aborted = false;
  std::string abort_reason;
};

// Fingerprint of the normalized class-text embeddings for a prompt.
std::string text_embedding_hash(const DualEncoder& surrogate,
                                const std::vector<std::string>& class_names,
                                const PromptTemplate& prompt);

TrainResult run(const TrainerSetup& setup, const TrainerOptions& options, GeneratorState generator,
                PromptTemplate prompt);
// Same loop with the defense disabled.
TrainResult run_attack_only(const TrainerSetup& setup, TrainerOptions options,
                            GeneratorState generator, PromptTemplate prompt);

std::vector<IterationRecord> read_iteration_log(const std::filesystem::path& path);

}  // namespace mma
