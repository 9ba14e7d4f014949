#pragma once

// Small locally trained image classifiers used as black-box targets.
//   "vgg"    two conv-conv-maxpool stages + linear head
//   "mlp"    two hidden fully connected layers
//   "resnet" stem + two residual stages with global pooling

#include <cstdint>
#include <filesystem>
#include <string>

#include <torch/torch.h>

#include "mma/dataset.hpp"

namespace mma {

class ClassifierNetImpl : public torch::nn::Cloneable<ClassifierNetImpl> {
 public:
  ClassifierNetImpl(std::string family, std::int64_t classes, std::int64_t image_size);
  void reset() override;
  torch::Tensor forward(const torch::Tensor& images);

  std::string family;
  std::int64_t classes;
  std::int64_t image_size;
  torch::nn::Sequential layers{nullptr};
};
TORCH_MODULE(ClassifierNet);

struct ClassifierTrainConfig {
  std::int64_t epochs = 20;
  std::int64_t batch_size = 64;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;
};

ClassifierNet make_classifier(const std::string& family, std::int64_t classes,
                              std::int64_t image_size, std::uint64_t seed);
ClassifierNet train_classifier(const std::string& family, const ImageDataset& train,
                               const ClassifierTrainConfig& cfg);

// Top-1 labels, lowest index on ties.
torch::Tensor classify(const ClassifierNet& net, const torch::Tensor& images);
double accuracy(const ClassifierNet& net, const ImageDataset& data);

void save_classifier(const ClassifierNet& net, const std::filesystem::path& path);
ClassifierNet load_classifier(const std::filesystem::path& path);

}  // namespace mma
