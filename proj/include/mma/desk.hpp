#pragma once

// Desk-scale setup: a procedurally rendered shapes dataset, the tiny
// surrogate's vocabulary, and its contrastive pretraining.

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mma/classifiers.hpp"
#include "mma/dataset.hpp"
#include "mma/tiny_encoder.hpp"

namespace mma {

struct SyntheticConfig {
  std::int64_t train_per_class = 240;
  std::int64_t val_per_class = 100;
  std::int64_t image_size = 32;
  std::int64_t classes = 6;  // up to 8
  std::uint64_t seed = 7;
};

std::vector<std::string> synthetic_class_names(std::int64_t classes);

// Returns (train, val); each split is class-balanced and shuffled.
std::pair<ImageDataset, ImageDataset> make_synthetic_dataset(const SyntheticConfig& cfg);

// Words the prompt template and the candidate providers draw from.
std::vector<std::string> prompt_word_pool();

TinyEncoderConfig desk_encoder_config(const std::vector<std::string>& class_names,
                                      std::int64_t image_size = 32);

struct SurrogatePretrainConfig {
  std::int64_t epochs = 60;
  std::int64_t batch_size = 64;
  double learning_rate = 3e-3;
  double train_temperature = 0.1;
  std::int64_t prompt_length = 4;
  std::string fixed_prompt = "a photo of a";  // empty: a random pool prompt per batch
  std::uint64_t seed = 11;
};

// Contrastive image/class-text training under the fixed prompt (or a fresh
// pool prompt per batch when none is given). Returns a frozen encoder.
TinyDualEncoder pretrain_tiny_surrogate(const ImageDataset& train,
                                        const SurrogatePretrainConfig& cfg);

// Zero-shot accuracy under "a photo of a" at the encoder's own temperature.
double desk_zero_shot_accuracy(const DualEncoder& encoder, const ImageDataset& data);

struct DeskConfig {
  SyntheticConfig data;
  SurrogatePretrainConfig surrogate;
  ClassifierTrainConfig targets;
};

// Renders the dataset and trains the surrogate plus vgg/mlp/resnet targets
// under `dir` (manifest.txt, surrogate.bin, target_<family>.bin), then writes
// run.cfg pointing at them with resnet as the monitor. Returns run.cfg's path.
std::filesystem::path prepare_desk(const std::filesystem::path& dir, const DeskConfig& cfg,
                                   std::ostream& log);

}  // namespace mma
