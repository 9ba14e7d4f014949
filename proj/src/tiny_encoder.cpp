#include "mma/tiny_encoder.hpp"

#include "mma/blob.hpp"
#include "mma/errors.hpp"

namespace mma {

namespace {

constexpr std::uint32_t kBlobVersion = 1;
constexpr const char* kBlobKind = "tiny-dual-encoder";

nlohmann::json config_to_json(const TinyEncoderConfig& c) {
  return {{"image_size", c.image_size},       {"conv1_channels", c.conv1_channels},
          {"conv2_channels", c.conv2_channels}, {"embed_dim", c.embed_dim},
          {"token_dim", c.token_dim},         {"text_hidden", c.text_hidden},
          {"max_tokens", c.max_tokens},       {"pixel_mean", c.pixel_mean},
          {"pixel_std", c.pixel_std},         {"temperature", c.temperature},
          {"words", c.words}};
}

TinyEncoderConfig config_from_json(const nlohmann::json& j) {
  TinyEncoderConfig c;
  c.image_size = j.at("image_size");
  c.conv1_channels = j.at("conv1_channels");
  c.conv2_channels = j.at("conv2_channels");
  c.embed_dim = j.at("embed_dim");
  c.token_dim = j.at("token_dim");
  c.text_hidden = j.at("text_hidden");
  c.max_tokens = j.at("max_tokens");
  c.pixel_mean = j.at("pixel_mean");
  c.pixel_std = j.at("pixel_std");
  c.temperature = j.at("temperature");
  c.words = j.at("words").get<std::vector<std::string>>();
  return c;
}

}  // namespace

void TinyEncoderConfig::validate() const {
  if (image_size < 4 || conv1_channels < 1 || conv2_channels < 1 || embed_dim < 1 ||
      token_dim < 1 || text_hidden < 1 || max_tokens < 1) {
    throw ConfigurationError("tiny encoder sizes must be positive (image_size >= 4)");
  }
  for (double s : pixel_std) {
    if (!(s > 0)) throw ConfigurationError("tiny encoder pixel_std must be > 0");
  }
  if (!(temperature > 0)) throw ConfigurationError("tiny encoder temperature must be > 0");
}

TinyDualEncoderNetImpl::TinyDualEncoderNetImpl(TinyEncoderConfig config_in,
                                               std::int64_t vocab_size_in)
    : config(std::move(config_in)), vocab_size(vocab_size_in) {
  reset();
}

void TinyDualEncoderNetImpl::reset() {
  using namespace torch::nn;
  conv1 = register_module(
      "conv1", Conv2d(Conv2dOptions(3, config.conv1_channels, 3).stride(2).padding(1)));
  conv2 = register_module(
      "conv2", Conv2d(Conv2dOptions(config.conv1_channels, config.conv2_channels, 3)
                          .stride(2)
                          .padding(1)));
  image_proj = register_module("image_proj", Linear(config.conv2_channels, config.embed_dim));
  token_embedding = register_module("token_embedding", Embedding(vocab_size, config.token_dim));
  position = register_parameter(
      "position", 0.1 * torch::randn({config.max_tokens, config.token_dim}));
  text_hidden = register_module("text_hidden", Linear(config.token_dim, config.text_hidden));
  text_proj = register_module("text_proj", Linear(config.text_hidden, config.embed_dim));
  pixel_mean = register_buffer(
      "pixel_mean", torch::tensor(std::vector<double>(config.pixel_mean.begin(),
                                                      config.pixel_mean.end()))
                        .to(torch::kFloat32)
                        .view({1, 3, 1, 1}));
  pixel_std = register_buffer(
      "pixel_std", torch::tensor(std::vector<double>(config.pixel_std.begin(),
                                                     config.pixel_std.end()))
                       .to(torch::kFloat32)
                       .view({1, 3, 1, 1}));
}

torch::Tensor TinyDualEncoderNetImpl::image_features(const torch::Tensor& images) {
  auto x = (images - pixel_mean) / pixel_std;
  x = torch::relu(conv1->forward(x));
  x = torch::relu(conv2->forward(x));
  x = x.mean({2, 3});
  return image_proj->forward(x);
}

torch::Tensor TinyDualEncoderNetImpl::text_features(const torch::Tensor& token_vectors) {
  const auto length = token_vectors.size(-2);
  auto h = token_vectors + position.slice(0, 0, length);
  h = torch::tanh(text_hidden->forward(h));
  return text_proj->forward(h.mean(-2));
}

TinyDualEncoder::TinyDualEncoder(TinyEncoderConfig config, std::uint64_t seed)
    : config_(std::move(config)), vocab_(config_.words), net_(nullptr) {
  config_.validate();
  torch::manual_seed(seed);
  net_ = TinyDualEncoderNet(config_, vocab_.size());
}

TinyDualEncoder::TinyDualEncoder(TinyEncoderConfig config, TinyDualEncoderNet net)
    : config_(std::move(config)), vocab_(config_.words), net_(std::move(net)) {}

torch::Tensor TinyDualEncoder::token_vectors(const TextInput& text) const {
  if (text.tokens.empty()) throw InputContractError("text input must be nonempty");
  if (static_cast<std::int64_t>(text.tokens.size()) > config_.max_tokens) {
    throw InputContractError("text input longer than max_tokens=" +
                             std::to_string(config_.max_tokens));
  }
  const auto ids = vocab_.encode(text);
  auto index = torch::tensor(ids, torch::kInt64);
  return net_.ptr()->token_embedding.ptr()->forward(index);
}

RawEmbedding TinyDualEncoder::encode_image(const torch::Tensor& images) const {
  auto batch = as_image_batch(images, config_.image_size);
  const auto dtype = net_->image_proj->weight.scalar_type();
  return RawEmbedding(net_.ptr()->image_features(batch.to(dtype)));
}

RawEmbedding TinyDualEncoder::encode_text(std::span<const TextInput> texts) const {
  if (texts.empty()) throw InputContractError("encode_text needs at least one text");
  std::vector<torch::Tensor> rows;
  rows.reserve(texts.size());
  for (const auto& t : texts) rows.push_back(net_.ptr()->text_features(token_vectors(t)));
  return RawEmbedding(torch::stack(rows));
}

RawEmbedding TinyDualEncoder::encode_token_vectors(const torch::Tensor& token_vectors) const {
  if (token_vectors.dim() != 3 || token_vectors.size(2) != config_.token_dim ||
      token_vectors.size(1) < 1 || token_vectors.size(1) > config_.max_tokens) {
    throw InputContractError("token vectors must be [N, L, token_dim] with 1 <= L <= max_tokens");
  }
  return RawEmbedding(net_.ptr()->text_features(token_vectors));
}

std::uint64_t TinyDualEncoder::fingerprint() const { return mma::fingerprint(*net_); }

void TinyDualEncoder::freeze() {
  for (auto& p : net_->parameters()) p.set_requires_grad(false);
  net_->eval();
}

TinyDualEncoder TinyDualEncoder::to(torch::ScalarType dtype) const {
  auto copy = std::dynamic_pointer_cast<TinyDualEncoderNetImpl>(net_->clone());
  copy->to(dtype);
  TinyDualEncoder out(config_, TinyDualEncoderNet(copy));
  bool frozen = true;
  for (const auto& p : net_->parameters()) frozen = frozen && !p.requires_grad();
  if (frozen) out.freeze();
  return out;
}

void TinyDualEncoder::save(const std::filesystem::path& path) const {
  Blob blob;
  blob.kind = kBlobKind;
  blob.version = kBlobVersion;
  blob.header = {{"config", config_to_json(config_)}};
  blob.tensors = module_state(*net_);
  write_blob(path, blob);
}

TinyDualEncoder TinyDualEncoder::load(const std::filesystem::path& path) {
  const auto blob = read_blob(path, kBlobKind, kBlobVersion);
  TinyEncoderConfig config;
  try {
    config = config_from_json(blob.header.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad tiny encoder header: " + e.what());
  }
  TinyDualEncoder out(config, 0);
  load_module_state(*out.net_, blob);
  out.freeze();
  return out;
}

}  // namespace mma
