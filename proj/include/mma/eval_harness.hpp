#pragma once

// Transferability measurement against black-box target classifiers.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "mma/classifiers.hpp"
#include "mma/dataset.hpp"
#include "mma/generator.hpp"

namespace mma {

struct TargetModel {
  std::string name;
  std::string group;
  std::int64_t image_size = 0;  // 0 accepts any size
  // images [B, 3, H, W] -> int64 labels [B]; must not mutate the model.
  std::function<torch::Tensor(const torch::Tensor&)> classify;
};

TargetModel make_target(std::string name, std::string group, ClassifierNet net);

double attack_success_rate(std::span<const std::int64_t> predictions,
                           std::span<const std::int64_t> labels);
double attack_success_rate(const torch::Tensor& predictions, const torch::Tensor& labels);

struct TargetAccuracy {
  double clean_acc = 0;
  double adv_acc = 0;
};

// Fraction correct; computed as 1 - attack_success_rate so the two sum to 1.
double target_accuracy(const TargetModel& target, const torch::Tensor& images,
                       const torch::Tensor& labels);
// Without a generator the adversarial accuracy is the clean accuracy.
TargetAccuracy evaluate_target(const TargetModel& target, const ImageDataset& data,
                               const GeneratorState* generator);

// Architecture families, each listing its member targets.
struct GroupMap {
  std::vector<std::pair<std::string, std::vector<std::string>>> groups;

  static GroupMap from_targets(const std::vector<TargetModel>& targets);
  // "group:name,name;group:name"
  static GroupMap parse(const std::string& text);
  std::string to_string() const;
  // Each name must belong to exactly one group; groups must be nonempty.
  void validate(const std::vector<std::string>& names) const;
  bool operator==(const GroupMap&) const = default;
};

// Unweighted mean over groups of the within-group mean accuracy.
double group_overall(const std::map<std::string, double>& per_target, const GroupMap& groups);

struct TargetReport {
  std::string name;
  std::string group;
  double clean_acc = 0;
  double adv_acc = 0;
  double attack_success_rate = 0;
};

struct TransferReport {
  std::string source;  // generator checkpoint or adversarial manifest
  std::vector<TargetReport> targets;
  GroupMap groups;
  double overall_clean = 0;
  double overall_adv = 0;

  nlohmann::json to_json() const;
  static TransferReport from_json(const nlohmann::json& j);
  std::string to_csv() const;
  // Overall values recomputed from the per-target rows.
  std::pair<double, double> recompute_overall() const;
};

TransferReport transfer_matrix(const GeneratorState* generator,
                               const std::vector<TargetModel>& targets,
                               const ImageDataset& data, const GroupMap& groups);
// Baseline mode: externally produced adversarial images. Throws
// InputContractError if any pair violates the epsilon bound.
TransferReport transfer_matrix(const AdversarialSet& set, double epsilon,
                               const std::vector<TargetModel>& targets, const GroupMap& groups);

}  // namespace mma
