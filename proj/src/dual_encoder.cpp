#include "mma/dual_encoder.hpp"

#include <cmath>

#include "mma/clip_encoder.hpp"
#include "mma/errors.hpp"
#include "mma/tiny_encoder.hpp"

namespace mma {

RawEmbedding::RawEmbedding(torch::Tensor values) : values_(std::move(values)) {
  if (values_.dim() < 1 || values_.size(-1) == 0) {
    throw InputContractError("embedding must have a nonempty last dimension");
  }
}

UnitEmbedding UnitEmbedding::adopt(torch::Tensor values) {
  const auto norms = values.detach().norm(2, -1);
  if (!torch::allclose(norms, torch::ones_like(norms), 0.0, 1e-5)) {
    throw InputContractError("UnitEmbedding::adopt given rows that are not unit length");
  }
  return UnitEmbedding(std::move(values));
}

UnitEmbedding UnitEmbedding::index(const torch::Tensor& rows) const {
  return UnitEmbedding(values_.index_select(0, rows));
}

UnitEmbedding normalize(const RawEmbedding& e) {
  const auto& v = e.values();
  auto norms = v.norm(2, -1, /*keepdim=*/true);
  if ((norms.detach() <= 0).any().item<bool>()) {
    throw DegenerateEmbeddingError("cannot normalize a zero embedding");
  }
  return UnitEmbedding(v / norms);
}

torch::Tensor cosine_sim(const UnitEmbedding& a, const UnitEmbedding& b) {
  if (a.values().sizes() != b.values().sizes()) {
    throw InputContractError("cosine_sim: embedding shapes differ");
  }
  return (a.values() * b.values()).sum(-1);
}

torch::Tensor similarity_matrix(const UnitEmbedding& images, const UnitEmbedding& texts) {
  if (images.dim() != texts.dim()) {
    throw InputContractError("similarity_matrix: embedding dimensions differ");
  }
  auto img = images.values().dim() == 1 ? images.values().unsqueeze(0) : images.values();
  return torch::matmul(img, texts.values().to(img.scalar_type()).t());
}

torch::Tensor as_image_batch(const torch::Tensor& images, std::int64_t size) {
  auto batch = images.dim() == 3 ? images.unsqueeze(0) : images;
  if (batch.dim() != 4 || batch.size(1) != 3) {
    throw InputContractError("expected images shaped [B, 3, H, W]");
  }
  if (batch.size(2) != batch.size(3) || (size > 0 && batch.size(2) != size)) {
    throw InputContractError("image size " + std::to_string(batch.size(2)) + "x" +
                             std::to_string(batch.size(3)) + " not accepted (expected " +
                             std::to_string(size) + "x" + std::to_string(size) + ")");
  }
  if (batch.numel() > 0) {
    torch::NoGradGuard no_grad;
    const double lo = batch.min().item<double>();
    const double hi = batch.max().item<double>();
    if (!(lo >= -1e-6 && hi <= 1.0 + 1e-6)) {
      throw InputContractError("pixel values must lie in [0, 1]");
    }
  }
  return batch;
}

void ZeroShotHead::validate() const {
  if (class_texts.size() < 2) {
    throw ConfigurationError("zero-shot head needs at least 2 classes");
  }
  if (!(temperature > 0) || !std::isfinite(temperature)) {
    throw ConfigurationError("zero-shot temperature must be > 0");
  }
}

torch::Tensor zero_shot_logits(const UnitEmbedding& images, const UnitEmbedding& texts,
                               double temperature) {
  if (!(temperature > 0)) throw ConfigurationError("temperature must be > 0");
  return similarity_matrix(images, texts) / temperature;
}

torch::Tensor zero_shot_probs(const UnitEmbedding& images, const UnitEmbedding& texts,
                              double temperature) {
  return torch::softmax(zero_shot_logits(images, texts, temperature), -1);
}

torch::Tensor zero_shot_probs(const DualEncoder& encoder, const torch::Tensor& images,
                              const ZeroShotHead& head) {
  head.validate();
  const auto texts = normalize(encoder.encode_text(head.class_texts));
  const auto imgs = normalize(encoder.encode_image(images));
  return zero_shot_probs(imgs, texts, head.temperature);
}

torch::Tensor predict_from_probs(const torch::Tensor& probs) {
  // torch::argmax returns the first maximal index.
  return torch::argmax(probs, -1);
}

torch::Tensor predict(const DualEncoder& encoder, const torch::Tensor& images,
                      const ZeroShotHead& head) {
  torch::NoGradGuard no_grad;
  return predict_from_probs(zero_shot_probs(encoder, images, head));
}

const UnitEmbedding& TextEmbeddingCache::get(const DualEncoder& encoder,
                                             const std::vector<TextInput>& texts) {
  const auto fp = encoder.fingerprint();
  if (!embedding_ || texts != texts_ || fp != encoder_fingerprint_) {
    torch::NoGradGuard no_grad;
    embedding_ = normalize(encoder.encode_text(texts));
    texts_ = texts;
    encoder_fingerprint_ = fp;
    ++recomputations_;
  }
  return *embedding_;
}

std::unique_ptr<DualEncoder> load_encoder(const std::string& backend,
                                          const std::filesystem::path& checkpoint,
                                          const std::filesystem::path& sidecar) {
  if (backend == "tiny") {
    return std::make_unique<TinyDualEncoder>(TinyDualEncoder::load(checkpoint));
  }
  if (backend == "clip") {
    return std::make_unique<TorchScriptClipEncoder>(checkpoint, sidecar);
  }
  throw ConfigurationError("unknown surrogate backend '" + backend +
                           "' (expected 'tiny' or 'clip')");
}

}  // namespace mma
