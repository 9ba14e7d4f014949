#pragma once

// Attack objective against the frozen surrogate: push the adversarial image
// embedding away from the clean one (feat), toward the least similar class
// text and away from the true class text (tri), and lower the surrogate's
// confidence in the true label (cls).

#include <torch/torch.h>

#include "mma/dual_encoder.hpp"
#include "mma/generator.hpp"

namespace mma {

struct TripletConfig {
  double alpha = 1.0;  // margin, squared-distance units
};

struct ClsConfig {
  double sigma = 0.1;
};

struct AttackConfig {
  TripletConfig triplet;
  ClsConfig cls;
  double feat_weight = 1.0;
  double tri_weight = 1.0;
  double cls_weight = 1.0;
  double learning_rate = 1e-4;

  void validate() const;
};

struct AttackLossReport {
  double feat = 0;
  double tri = 0;
  double cls = 0;
  double total = 0;
};

// -||clean - adv||^2, averaged over rows. Range [-4, 0].
torch::Tensor feat_loss(const UnitEmbedding& clean, const UnitEmbedding& adv);

// Per row, the class whose text is least similar to the clean image
// (lowest index on ties). Returns int64 [B].
torch::Tensor least_similar_label(const UnitEmbedding& clean, const UnitEmbedding& class_texts);

// ||adv - text_far||^2 + max(0, alpha - ||adv - text_true||^2), averaged over rows.
torch::Tensor triplet_loss(const UnitEmbedding& adv, const UnitEmbedding& text_far,
                           const UnitEmbedding& text_true, const TripletConfig& cfg);

// 1 / (sigma + CE(probs, labels)), averaged over rows.
torch::Tensor cls_loss(const torch::Tensor& probs, const torch::Tensor& labels,
                       const ClsConfig& cfg);
// Same quantity with the cross-entropy taken from log-softmax of logits.
torch::Tensor cls_loss_from_logits(const torch::Tensor& logits, const torch::Tensor& labels,
                                   const ClsConfig& cfg);

struct AttackLosses {
  torch::Tensor feat;
  torch::Tensor tri;
  torch::Tensor cls;
  torch::Tensor total;  // weighted sum, differentiable

  AttackLossReport report() const;
};

// Loss of an adversarial batch. Clean-image embeddings (and hence the least
// similar labels) are computed without gradient.
AttackLosses attack_losses(const DualEncoder& surrogate, const torch::Tensor& clean,
                           const torch::Tensor& adversarial, const torch::Tensor& labels,
                           const UnitEmbedding& class_texts, double temperature,
                           const AttackConfig& cfg);

// One optimizer step on the generator parameters. Throws
// TrainingDivergenceError, leaving the parameters untouched, if the loss or
// any gradient is non-finite.
AttackLossReport attack_step(GeneratorState& state, torch::optim::Optimizer& optimizer,
                             const DualEncoder& surrogate, const torch::Tensor& images,
                             const torch::Tensor& labels, const UnitEmbedding& class_texts,
                             double temperature, const AttackConfig& cfg);

torch::optim::Adam make_generator_optimizer(const GeneratorState& state, double learning_rate);

}  // namespace mma
