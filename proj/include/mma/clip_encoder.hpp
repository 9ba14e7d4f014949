#pragma once

// Pretrained CLIP-style surrogate loaded from a TorchScript export.
//
// The module must provide
//   encode_image(Tensor pixels[B, 3, S, S]) -> Tensor[B, d]   (standardized pixels)
//   encode_text(Tensor ids[N, context_length]) -> Tensor[N, d]
// and the JSON sidecar describes tokenization and preprocessing:
//   { "variant": "ViT-B/32", "image_size": 224, "context_length": 77,
//     "sot": id, "eot": id, "pad": id, "mean": [3], "std": [3],
//     "temperature": 0.01, "mask": [ids], "words": { "word": [ids], ... } }
// tools/export_clip.py writes both files.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <torch/script.h>

#include "mma/dual_encoder.hpp"

namespace mma {

class TorchScriptClipEncoder final : public DualEncoder {
 public:
  TorchScriptClipEncoder(const std::filesystem::path& module_path,
                         const std::filesystem::path& sidecar_path);

  std::string name() const override { return "clip:" + variant_; }
  RawEmbedding encode_image(const torch::Tensor& images) const override;
  RawEmbedding encode_text(std::span<const TextInput> texts) const override;
  const Vocabulary& vocabulary() const override { return vocab_; }
  std::int64_t embedding_dim() const override { return embedding_dim_; }
  std::int64_t image_size() const override { return image_size_; }
  double default_temperature() const override { return temperature_; }
  std::uint64_t fingerprint() const override { return fingerprint_; }

  const std::string& variant() const { return variant_; }
  torch::Tensor token_ids(const TextInput& text) const;

 private:
  mutable torch::jit::Module module_;
  std::string variant_;
  std::int64_t image_size_ = 224;
  std::int64_t context_length_ = 77;
  std::int64_t sot_ = 0;
  std::int64_t eot_ = 0;
  std::int64_t pad_ = 0;
  torch::Tensor mean_;
  torch::Tensor std_;
  double temperature_ = 0.01;
  std::vector<std::int64_t> mask_ids_;
  std::map<std::string, std::vector<std::int64_t>> word_ids_;
  Vocabulary vocab_;
  std::int64_t embedding_dim_ = 0;
  std::uint64_t fingerprint_ = 0;
};

}  // namespace mma
