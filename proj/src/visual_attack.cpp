#include "mma/visual_attack.hpp"

#include <cmath>

#include "mma/errors.hpp"

namespace mma {

void AttackConfig::validate() const {
  if (!(triplet.alpha >= 0)) throw ConfigurationError("alpha must be >= 0");
  if (!(cls.sigma > 0)) throw ConfigurationError("sigma must be > 0");
  if (!(learning_rate >= 0)) throw ConfigurationError("learning rate must be >= 0");
  if (!(feat_weight >= 0 && tri_weight >= 0 && cls_weight >= 0)) {
    throw ConfigurationError("loss weights must be >= 0");
  }
}

torch::Tensor feat_loss(const UnitEmbedding& clean, const UnitEmbedding& adv) {
  if (clean.values().sizes() != adv.values().sizes()) {
    throw InputContractError("feat_loss: embedding shapes differ");
  }
  return -(clean.values() - adv.values()).pow(2).sum(-1).mean();
}

torch::Tensor least_similar_label(const UnitEmbedding& clean, const UnitEmbedding& class_texts) {
  if (class_texts.rows() < 2) throw InputContractError("need at least 2 class texts");
  return torch::argmin(similarity_matrix(clean, class_texts).detach(), -1);
}

torch::Tensor triplet_loss(const UnitEmbedding& adv, const UnitEmbedding& text_far,
                           const UnitEmbedding& text_true, const TripletConfig& cfg) {
  if (adv.values().sizes() != text_far.values().sizes() ||
      adv.values().sizes() != text_true.values().sizes()) {
    throw InputContractError("triplet_loss: embedding shapes differ");
  }
  const auto pull = (adv.values() - text_far.values()).pow(2).sum(-1);
  const auto push = (adv.values() - text_true.values()).pow(2).sum(-1);
  return (pull + torch::clamp_min(cfg.alpha - push, 0.0)).mean();
}

torch::Tensor cls_loss(const torch::Tensor& probs, const torch::Tensor& labels,
                       const ClsConfig& cfg) {
  auto p = probs.dim() == 1 ? probs.unsqueeze(0) : probs;
  auto y = labels.dim() == 0 ? labels.unsqueeze(0) : labels;
  const auto p_true = p.gather(1, y.to(torch::kInt64).view({-1, 1})).squeeze(1);
  return (1.0 / (cfg.sigma - torch::log(p_true))).mean();
}

torch::Tensor cls_loss_from_logits(const torch::Tensor& logits, const torch::Tensor& labels,
                                   const ClsConfig& cfg) {
  const auto log_p = torch::log_softmax(logits, -1);
  const auto ce = -log_p.gather(1, labels.to(torch::kInt64).view({-1, 1})).squeeze(1);
  return (1.0 / (cfg.sigma + ce)).mean();
}

AttackLossReport AttackLosses::report() const {
  AttackLossReport r;
  r.feat = feat.item<double>();
  r.tri = tri.item<double>();
  r.cls = cls.item<double>();
  r.total = total.item<double>();
  return r;
}

AttackLosses attack_losses(const DualEncoder& surrogate, const torch::Tensor& clean,
                           const torch::Tensor& adversarial, const torch::Tensor& labels,
                           const UnitEmbedding& class_texts, double temperature,
                           const AttackConfig& cfg) {
  std::optional<UnitEmbedding> clean_emb;
  {
    torch::NoGradGuard no_grad;
    clean_emb = normalize(surrogate.encode_image(clean));
  }
  const auto adv_emb = normalize(surrogate.encode_image(adversarial));
  const auto far = least_similar_label(*clean_emb, class_texts);
  const auto y = labels.to(torch::kInt64);

  AttackLosses out;
  out.feat = feat_loss(*clean_emb, adv_emb);
  out.tri = triplet_loss(adv_emb, class_texts.index(far), class_texts.index(y), cfg.triplet);
  out.cls = cls_loss_from_logits(zero_shot_logits(adv_emb, class_texts, temperature), y, cfg.cls);
  out.total = cfg.feat_weight * out.feat + cfg.tri_weight * out.tri + cfg.cls_weight * out.cls;
  return out;
}

AttackLossReport attack_step(GeneratorState& state, torch::optim::Optimizer& optimizer,
                             const DualEncoder& surrogate, const torch::Tensor& images,
                             const torch::Tensor& labels, const UnitEmbedding& class_texts,
                             double temperature, const AttackConfig& cfg) {
  state.net->train();
  optimizer.zero_grad();
  const auto adversarial = forward(state, images);
  if (!torch::isfinite(adversarial).all().item<bool>()) {
    throw TrainingDivergenceError("generator produced non-finite pixels; step rejected");
  }
  auto losses = attack_losses(surrogate, images, adversarial, labels, class_texts,
                              temperature, cfg);
  const auto report = losses.report();
  if (!std::isfinite(report.total)) {
    optimizer.zero_grad();
    throw TrainingDivergenceError("attack loss is not finite; step rejected");
  }
  losses.total.backward();
  for (const auto& p : state.net->parameters()) {
    if (p.grad().defined() && !torch::isfinite(p.grad()).all().item<bool>()) {
      optimizer.zero_grad();
      throw TrainingDivergenceError("non-finite generator gradient; step rejected");
    }
  }
  optimizer.step();
  return report;
}

torch::optim::Adam make_generator_optimizer(const GeneratorState& state, double learning_rate) {
  return torch::optim::Adam(state.net->parameters(),
                            torch::optim::AdamOptions(learning_rate));
}

}  // namespace mma
