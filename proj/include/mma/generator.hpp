#pragma once

// Universal perturbation generator and the l-infinity bounding rule.

#include <cstdint>
#include <filesystem>

#include <torch/torch.h>

namespace mma {

struct GeneratorConfig {
  std::int64_t channels = 16;
  std::int64_t blocks = 2;
  // tanh head is scaled to [-scale * eps, +scale * eps] so the bound is active.
  double output_scale = 2.0;
  bool zero_init_head = false;

  void validate() const;
  bool operator==(const GeneratorConfig&) const = default;
};

class ResidualBlockImpl : public torch::nn::Cloneable<ResidualBlockImpl> {
 public:
  explicit ResidualBlockImpl(std::int64_t channels);
  void reset() override;
  torch::Tensor forward(const torch::Tensor& x);

 private:
  std::int64_t channels_;
  torch::nn::Conv2d conv1_{nullptr};
  torch::nn::Conv2d conv2_{nullptr};
};
TORCH_MODULE(ResidualBlock);

// Residual encoder-decoder: stem -> stride-2 downsample -> residual blocks ->
// nearest upsample + conv -> 3-channel tanh head added to the input image.
class PerturbationNetImpl : public torch::nn::Cloneable<PerturbationNetImpl> {
 public:
  explicit PerturbationNetImpl(GeneratorConfig config);
  void reset() override;

  // Unbounded candidate image for budget `epsilon`.
  torch::Tensor forward(const torch::Tensor& images, double epsilon);

  GeneratorConfig config;
  torch::nn::Conv2d stem{nullptr};
  torch::nn::Conv2d down{nullptr};
  torch::nn::Sequential body{nullptr};
  torch::nn::Conv2d up{nullptr};
  torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(PerturbationNet);

struct GeneratorState {
  GeneratorConfig config;
  double epsilon = 0.04;
  std::int64_t iteration = 0;
  PerturbationNet net{nullptr};

  static GeneratorState create(const GeneratorConfig& config, double epsilon,
                               std::uint64_t seed);
  GeneratorState clone() const;
  std::uint64_t fingerprint() const;
};

torch::Tensor generate_raw(const GeneratorState& state, const torch::Tensor& images);
// min(clean + eps, max(raw, clean - eps)) clamped to [0, 1].
torch::Tensor bound(const torch::Tensor& raw, const torch::Tensor& clean, double epsilon);
torch::Tensor forward(const GeneratorState& state, const torch::Tensor& images);

// Largest per-sample l-infinity distance in a batch.
double linf_distance(const torch::Tensor& a, const torch::Tensor& b);

void save_generator(const GeneratorState& state, const std::filesystem::path& path);
GeneratorState load_generator(const std::filesystem::path& path);

}  // namespace mma
