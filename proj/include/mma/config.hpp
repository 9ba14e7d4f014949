#pragma once

// Declarative run configuration: flat "key = value" text, '#' comments.
// The first setting may be "schema = 1"; unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mma/eval_harness.hpp"
#include "mma/generator.hpp"
#include "mma/mutual_trainer.hpp"
#include "mma/textual_defense.hpp"

namespace mma {

inline constexpr int kConfigSchema = 1;

struct RunConfig {
  std::string surrogate_backend = "tiny";
  std::string surrogate_checkpoint;
  std::string surrogate_sidecar;
  std::string surrogate_variant;  // clip checkpoints must name their variant

  std::string dataset_manifest;
  std::string train_split = "train";
  std::string eval_split = "val";
  std::vector<std::string> classes;  // label words; empty: the manifest's class names

  double epsilon = 0.04;
  double learning_rate = 1e-4;
  std::optional<double> temperature;  // backend default when unset
  double alpha = 1.0;
  double sigma = 0.1;
  double feat_weight = 1.0;
  double tri_weight = 1.0;
  double cls_weight = 1.0;
  RhoPolicy rho;
  std::int64_t k = 10;
  std::string prompt = "a photo of a";

  TrainSchedule schedule;
  GeneratorConfig generator;

  std::string candidates_provider = "static";  // static | lm
  std::string candidates_table;                // static: synonym table file (optional)
  std::string candidates_model;                // lm: TorchScript module
  std::string candidates_sidecar;              // lm: vocabulary sidecar

  std::vector<std::pair<std::string, std::string>> targets;  // name -> classifier checkpoint
  GroupMap groups;             // empty: one group per target family name
  std::string monitor_target;  // held-out target tracked during training

  std::string output_dir = "runs/default";
  std::string device = "cpu";

  void validate() const;
  // Fields a training or evaluation run cannot do without.
  void require(const std::vector<std::string>& keys) const;

  AttackConfig attack_config() const;
  DefenseConfig defense_config() const;

  bool operator==(const RunConfig&) const = default;
};

RunConfig parse_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);
std::string format_config(const RunConfig& cfg);
void save_config(const RunConfig& cfg, const std::filesystem::path& path);

// MMA_OUTPUT_DIR and MMA_DEVICE override the corresponding fields.
void apply_environment(RunConfig& cfg);

}  // namespace mma
