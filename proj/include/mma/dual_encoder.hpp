#pragma once

// Surrogate dual encoder: visual and textual towers sharing an embedding
// space, plus the zero-shot classification head built on top of them.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "mma/text.hpp"

namespace mma {

// Encoder output before normalization; rows along the last dimension.
class RawEmbedding {
 public:
  explicit RawEmbedding(torch::Tensor values);
  const torch::Tensor& values() const { return values_; }
  std::int64_t dim() const { return values_.size(-1); }

 private:
  torch::Tensor values_;
};

// Rows are unit length. Only produced by normalize() or adopt().
class UnitEmbedding {
 public:
  const torch::Tensor& values() const { return values_; }
  std::int64_t dim() const { return values_.size(-1); }
  std::int64_t rows() const { return values_.dim() == 1 ? 1 : values_.size(0); }

  // Wraps rows already known to be unit length (checked within 1e-5).
  static UnitEmbedding adopt(torch::Tensor values);
  UnitEmbedding index(const torch::Tensor& rows) const;

 private:
  explicit UnitEmbedding(torch::Tensor values) : values_(std::move(values)) {}
  friend UnitEmbedding normalize(const RawEmbedding& e);
  torch::Tensor values_;
};

// Throws DegenerateEmbeddingError when any row has zero norm.
UnitEmbedding normalize(const RawEmbedding& e);

// Row-wise cosine similarity of equally shaped unit embeddings.
torch::Tensor cosine_sim(const UnitEmbedding& a, const UnitEmbedding& b);
// [B, C] similarities between B image rows and C text rows.
torch::Tensor similarity_matrix(const UnitEmbedding& images, const UnitEmbedding& texts);

// Adds a batch dimension if needed and checks [B, 3, size, size] with pixels
// in [0, 1]; size <= 0 accepts any square size.
torch::Tensor as_image_batch(const torch::Tensor& images, std::int64_t size);

class DualEncoder {
 public:
  virtual ~DualEncoder() = default;

  virtual std::string name() const = 0;
  // images: [B, 3, H, W] (or [3, H, W]) with pixels in [0, 1].
  virtual RawEmbedding encode_image(const torch::Tensor& images) const = 0;
  virtual RawEmbedding encode_text(std::span<const TextInput> texts) const = 0;
  virtual const Vocabulary& vocabulary() const = 0;
  virtual std::int64_t embedding_dim() const = 0;
  virtual std::int64_t image_size() const = 0;
  virtual double default_temperature() const = 0;
  // Hash of every weight; equal before/after any read-only use.
  virtual std::uint64_t fingerprint() const = 0;
};

struct ZeroShotHead {
  std::vector<TextInput> class_texts;
  double temperature = 1.0;

  void validate() const;
};

torch::Tensor zero_shot_logits(const UnitEmbedding& images, const UnitEmbedding& texts,
                               double temperature);
torch::Tensor zero_shot_probs(const UnitEmbedding& images, const UnitEmbedding& texts,
                              double temperature);
torch::Tensor zero_shot_probs(const DualEncoder& encoder, const torch::Tensor& images,
                              const ZeroShotHead& head);

// Argmax over the last dimension, lowest index on ties.
torch::Tensor predict_from_probs(const torch::Tensor& probs);
torch::Tensor predict(const DualEncoder& encoder, const torch::Tensor& images,
                      const ZeroShotHead& head);

// Normalized class-text embeddings, recomputed only when the texts change.
class TextEmbeddingCache {
 public:
  const UnitEmbedding& get(const DualEncoder& encoder, const std::vector<TextInput>& texts);
  std::int64_t recomputations() const { return recomputations_; }

 private:
  std::vector<TextInput> texts_;
  std::optional<UnitEmbedding> embedding_;
  std::uint64_t encoder_fingerprint_ = 0;
  std::int64_t recomputations_ = 0;
};

// Backend registry: "tiny" (blob checkpoint) or "clip" (TorchScript module
// plus a JSON vocabulary sidecar).
std::unique_ptr<DualEncoder> load_encoder(const std::string& backend,
                                          const std::filesystem::path& checkpoint,
                                          const std::filesystem::path& sidecar = {});

}  // namespace mma
