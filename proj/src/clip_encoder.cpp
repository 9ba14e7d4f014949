#include "mma/clip_encoder.hpp"

#include <fstream>

#include <json.hpp>

#include "mma/blob.hpp"
#include "mma/errors.hpp"

namespace mma {

TorchScriptClipEncoder::TorchScriptClipEncoder(const std::filesystem::path& module_path,
                                               const std::filesystem::path& sidecar_path) {
  if (!std::filesystem::exists(module_path)) {
    throw ExternalDependencyError("CLIP checkpoint not found: " + module_path.string());
  }
  if (sidecar_path.empty() || !std::filesystem::exists(sidecar_path)) {
    throw ExternalDependencyError("CLIP vocabulary sidecar not found: " + sidecar_path.string());
  }
  try {
    module_ = torch::jit::load(module_path.string());
  } catch (const c10::Error& e) {
    throw ExternalDependencyError("cannot load TorchScript module " + module_path.string() +
                                  ": " + e.what_without_backtrace());
  }
  module_.eval();
  for (const char* method : {"encode_image", "encode_text"}) {
    if (!module_.find_method(method)) {
      throw FormatError(module_path.string() + " lacks method '" + method + "'");
    }
  }

  std::ifstream in(sidecar_path);
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(in);
    variant_ = side.at("variant").get<std::string>();
    image_size_ = side.at("image_size");
    context_length_ = side.at("context_length");
    sot_ = side.at("sot");
    eot_ = side.at("eot");
    pad_ = side.value("pad", std::int64_t{0});
    mean_ = torch::tensor(side.at("mean").get<std::vector<double>>(), torch::kFloat32)
                .view({1, 3, 1, 1});
    std_ = torch::tensor(side.at("std").get<std::vector<double>>(), torch::kFloat32)
               .view({1, 3, 1, 1});
    temperature_ = side.value("temperature", 0.01);
    mask_ids_ = side.at("mask").get<std::vector<std::int64_t>>();
    word_ids_ = side.at("words").get<std::map<std::string, std::vector<std::int64_t>>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(sidecar_path.string() + ": bad CLIP sidecar: " + e.what());
  }
  if (variant_.empty()) {
    throw ConfigurationError("CLIP sidecar must name the checkpoint variant explicitly");
  }

  std::vector<std::string> words;
  for (const auto& [w, _] : word_ids_) words.push_back(w);
  vocab_ = Vocabulary(std::move(words));

  std::vector<torch::Tensor> weights;
  for (const auto& p : module_.parameters()) weights.push_back(p);
  fingerprint_ = mma::fingerprint(weights);

  torch::NoGradGuard no_grad;
  TextInput probe{{vocab_.size() > 1 ? vocab_.word(1) : std::string(kMaskToken)}};
  embedding_dim_ = encode_text(std::span<const TextInput>(&probe, 1)).dim();
}

torch::Tensor TorchScriptClipEncoder::token_ids(const TextInput& text) const {
  if (text.tokens.empty()) throw InputContractError("text input must be nonempty");
  std::vector<std::int64_t> ids{sot_};
  for (const auto& token : text.tokens) {
    if (token == kMaskToken) {
      ids.insert(ids.end(), mask_ids_.begin(), mask_ids_.end());
      continue;
    }
    auto it = word_ids_.find(token);
    if (it == word_ids_.end()) throw VocabularyError("unknown token '" + token + "'");
    ids.insert(ids.end(), it->second.begin(), it->second.end());
  }
  ids.push_back(eot_);
  if (static_cast<std::int64_t>(ids.size()) > context_length_) {
    throw InputContractError("text exceeds context length " + std::to_string(context_length_));
  }
  ids.resize(static_cast<std::size_t>(context_length_), pad_);
  return torch::tensor(ids, torch::kInt64);
}

RawEmbedding TorchScriptClipEncoder::encode_image(const torch::Tensor& images) const {
  auto batch = as_image_batch(images, 0).to(torch::kFloat32);
  if (batch.size(2) != image_size_) {
    batch = torch::nn::functional::interpolate(
        batch, torch::nn::functional::InterpolateFuncOptions()
                   .size(std::vector<std::int64_t>{image_size_, image_size_})
                   .mode(torch::kBilinear)
                   .align_corners(false));
  }
  auto x = (batch - mean_) / std_;
  return RawEmbedding(module_.get_method("encode_image")({x}).toTensor());
}

RawEmbedding TorchScriptClipEncoder::encode_text(std::span<const TextInput> texts) const {
  if (texts.empty()) throw InputContractError("encode_text needs at least one text");
  std::vector<torch::Tensor> rows;
  for (const auto& t : texts) rows.push_back(token_ids(t));
  return RawEmbedding(module_.get_method("encode_text")({torch::stack(rows)}).toTensor());
}

}  // namespace mma
