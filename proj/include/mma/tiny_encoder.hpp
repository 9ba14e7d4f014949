#pragma once

// Small trainable dual encoder for desk-scale experiments and tests.
//
// Image tower: per-channel standardization -> conv3x3/s2 -> ReLU ->
// conv3x3/s2 -> ReLU -> global average pool -> linear.
// Text tower: token + position embedding -> tanh(linear) per token ->
// mean over tokens -> linear.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mma/dual_encoder.hpp"

namespace mma {

struct TinyEncoderConfig {
  std::int64_t image_size = 32;
  std::int64_t conv1_channels = 16;
  std::int64_t conv2_channels = 32;
  std::int64_t embed_dim = 32;
  std::int64_t token_dim = 32;
  std::int64_t text_hidden = 64;
  std::int64_t max_tokens = 16;
  std::array<double, 3> pixel_mean{0.5, 0.5, 0.5};
  std::array<double, 3> pixel_std{0.25, 0.25, 0.25};
  double temperature = 1.0;
  std::vector<std::string> words;  // vocabulary, mask token added implicitly

  void validate() const;
};

class TinyDualEncoderNetImpl : public torch::nn::Cloneable<TinyDualEncoderNetImpl> {
 public:
  explicit TinyDualEncoderNetImpl(TinyEncoderConfig config, std::int64_t vocab_size);

  void reset() override;

  // images already validated, [B, 3, S, S]
  torch::Tensor image_features(const torch::Tensor& images);
  // token_vectors: [L, token_dim] (embedding rows, position not yet added)
  torch::Tensor text_features(const torch::Tensor& token_vectors);

  TinyEncoderConfig config;
  std::int64_t vocab_size;
  torch::nn::Conv2d conv1{nullptr};
  torch::nn::Conv2d conv2{nullptr};
  torch::nn::Linear image_proj{nullptr};
  torch::nn::Embedding token_embedding{nullptr};
  torch::Tensor position;
  torch::nn::Linear text_hidden{nullptr};
  torch::nn::Linear text_proj{nullptr};
  torch::Tensor pixel_mean;
  torch::Tensor pixel_std;
};
TORCH_MODULE(TinyDualEncoderNet);

class TinyDualEncoder final : public DualEncoder {
 public:
  // Weights drawn from torch's default initializers under `seed`.
  TinyDualEncoder(TinyEncoderConfig config, std::uint64_t seed);

  std::string name() const override { return "tiny"; }
  RawEmbedding encode_image(const torch::Tensor& images) const override;
  RawEmbedding encode_text(std::span<const TextInput> texts) const override;
  const Vocabulary& vocabulary() const override { return vocab_; }
  std::int64_t embedding_dim() const override { return config_.embed_dim; }
  std::int64_t image_size() const override { return config_.image_size; }
  double default_temperature() const override { return config_.temperature; }
  std::uint64_t fingerprint() const override;

  // Text tower applied to explicit token vectors [N, L, token_dim]; the
  // differentiable input for gradient checks of the text path.
  RawEmbedding encode_token_vectors(const torch::Tensor& token_vectors) const;
  torch::Tensor token_vectors(const TextInput& text) const;

  const TinyEncoderConfig& config() const { return config_; }
  TinyDualEncoderNet& net() { return net_; }
  const TinyDualEncoderNet& net() const { return net_; }

  // Stops gradient accumulation into the weights; inputs stay differentiable.
  void freeze();
  TinyDualEncoder to(torch::ScalarType dtype) const;

  void save(const std::filesystem::path& path) const;
  static TinyDualEncoder load(const std::filesystem::path& path);

 private:
  TinyDualEncoder(TinyEncoderConfig config, TinyDualEncoderNet net);

  TinyEncoderConfig config_;
  Vocabulary vocab_;
  TinyDualEncoderNet net_;
};

}  // namespace mma
