#include "mma/generator.hpp"

#include <cmath>

#include "mma/blob.hpp"
#include "mma/errors.hpp"

namespace mma {

namespace {
constexpr const char* kBlobKind = "perturbation-generator";
constexpr std::uint32_t kBlobVersion = 1;

torch::nn::Conv2dOptions conv3(std::int64_t in, std::int64_t out) {
  return torch::nn::Conv2dOptions(in, out, 3).padding(1);
}
}  // namespace

void GeneratorConfig::validate() const {
  if (channels < 1 || blocks < 0) {
    throw ConfigurationError("generator needs channels >= 1 and blocks >= 0");
  }
  if (!(output_scale > 0)) throw ConfigurationError("generator output_scale must be > 0");
}

ResidualBlockImpl::ResidualBlockImpl(std::int64_t channels) : channels_(channels) { reset(); }

void ResidualBlockImpl::reset() {
  const auto channels = channels_;
  conv1_ = register_module("conv1", torch::nn::Conv2d(conv3(channels, channels)));
  conv2_ = register_module("conv2", torch::nn::Conv2d(conv3(channels, channels)));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  return x + conv2_->forward(torch::leaky_relu(conv1_->forward(x), 0.2));
}

PerturbationNetImpl::PerturbationNetImpl(GeneratorConfig config_in)
    : config(config_in) {
  reset();
}

void PerturbationNetImpl::reset() {
  const auto ch = config.channels;
  stem = register_module("stem", torch::nn::Conv2d(conv3(3, ch)));
  down = register_module("down", torch::nn::Conv2d(conv3(ch, ch).stride(2)));
  body = register_module("body", torch::nn::Sequential());
  for (std::int64_t i = 0; i < config.blocks; ++i) body->push_back(ResidualBlock(ch));
  up = register_module("up", torch::nn::Conv2d(conv3(ch, ch)));
  head = register_module("head", torch::nn::Conv2d(conv3(ch, 3)));
  if (config.zero_init_head) {
    torch::NoGradGuard no_grad;
    head->weight.zero_();
    head->bias.zero_();
  }
}

torch::Tensor PerturbationNetImpl::forward(const torch::Tensor& images, double epsilon) {
  const auto h = images.size(2);
  const auto w = images.size(3);
  auto x = torch::leaky_relu(stem->forward(images), 0.2);
  x = torch::leaky_relu(down->forward(x), 0.2);
  if (!body->is_empty()) x = body->forward(x);
  x = torch::nn::functional::interpolate(
      x, torch::nn::functional::InterpolateFuncOptions()
             .size(std::vector<std::int64_t>{h, w})
             .mode(torch::kNearest));
  x = torch::leaky_relu(up->forward(x), 0.2);
  // Per-image, per-channel standardization keeps the head's output out of
  // tanh's flat tails, where the generator would stop receiving gradient.
  auto z = head->forward(x);
  const auto mean = z.mean({2, 3}, true);
  const auto var = (z - mean).pow(2).mean({2, 3}, true);
  z = (z - mean) / torch::sqrt(var + 1e-5);
  return images + config.output_scale * epsilon * torch::tanh(z);
}

GeneratorState GeneratorState::create(const GeneratorConfig& config, double epsilon,
                                      std::uint64_t seed) {
  config.validate();
  if (!(epsilon >= 0) || !std::isfinite(epsilon)) {
    throw ConfigurationError("epsilon must be finite and nonnegative");
  }
  torch::manual_seed(seed);
  GeneratorState state;
  state.config = config;
  state.epsilon = epsilon;
  state.net = PerturbationNet(config);
  return state;
}

GeneratorState GeneratorState::clone() const {
  GeneratorState copy;
  copy.config = config;
  copy.epsilon = epsilon;
  copy.iteration = iteration;
  copy.net = PerturbationNet(std::dynamic_pointer_cast<PerturbationNetImpl>(net->clone()));
  return copy;
}

std::uint64_t GeneratorState::fingerprint() const { return mma::fingerprint(*net); }

namespace {
torch::Tensor as_batch(const torch::Tensor& images) {
  auto batch = images.dim() == 3 ? images.unsqueeze(0) : images;
  if (batch.dim() != 4 || batch.size(1) != 3) {
    throw InputContractError("generator expects images shaped [B, 3, H, W]");
  }
  return batch;
}
}  // namespace

torch::Tensor generate_raw(const GeneratorState& state, const torch::Tensor& images) {
  auto batch = as_batch(images);
  const auto dtype = state.net->head->weight.scalar_type();
  auto out = state.net.ptr()->forward(batch.to(dtype), state.epsilon);
  return images.dim() == 3 ? out.squeeze(0) : out;
}

torch::Tensor bound(const torch::Tensor& raw, const torch::Tensor& clean, double epsilon) {
  if (raw.sizes() != clean.sizes()) {
    throw InputContractError("bound: raw and clean shapes differ");
  }
  if (!(epsilon >= 0) || !std::isfinite(epsilon)) {
    throw ConfigurationError("bound: epsilon must be finite and nonnegative");
  }
  auto c = clean.detach().to(raw.scalar_type());
  // Edges are formed in float64 and rounded once to the working dtype; an
  // edge that rounding put outside the ball is pulled back one ulp so the
  // bound holds exactly when checked in float64.
  const auto c64 = c.to(torch::kFloat64);
  auto hi = (c64 + epsilon).to(raw.scalar_type());
  auto lo = (c64 - epsilon).to(raw.scalar_type());
  for (int step = 0; step < 4; ++step) {
    const auto hi_out = hi.to(torch::kFloat64) - c64 > epsilon;
    const auto lo_out = c64 - lo.to(torch::kFloat64) > epsilon;
    if (!hi_out.any().item<bool>() && !lo_out.any().item<bool>()) break;
    hi = torch::where(hi_out, torch::nextafter(hi, c), hi);
    lo = torch::where(lo_out, torch::nextafter(lo, c), lo);
  }
  auto projected = torch::min(hi, torch::max(raw, lo));
  return projected.clamp(0.0, 1.0);
}

torch::Tensor forward(const GeneratorState& state, const torch::Tensor& images) {
  return bound(generate_raw(state, images), images, state.epsilon);
}

double linf_distance(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.numel() == 0) return 0.0;
  return (a.detach().to(torch::kFloat64) - b.detach().to(torch::kFloat64))
      .abs()
      .max()
      .item<double>();
}

void save_generator(const GeneratorState& state, const std::filesystem::path& path) {
  Blob blob;
  blob.kind = kBlobKind;
  blob.version = kBlobVersion;
  blob.header = {{"channels", state.config.channels},
                 {"blocks", state.config.blocks},
                 {"output_scale", state.config.output_scale},
                 {"epsilon", state.epsilon},
                 {"iteration", state.iteration}};
  blob.tensors = module_state(*state.net);
  write_blob(path, blob);
}

GeneratorState load_generator(const std::filesystem::path& path) {
  const auto blob = read_blob(path, kBlobKind, kBlobVersion);
  GeneratorConfig config;
  double epsilon = 0;
  std::int64_t iteration = 0;
  try {
    config.channels = blob.header.at("channels");
    config.blocks = blob.header.at("blocks");
    config.output_scale = blob.header.at("output_scale");
    epsilon = blob.header.at("epsilon");
    iteration = blob.header.at("iteration");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad generator header: " + e.what());
  }
  auto state = GeneratorState::create(config, epsilon, 0);
  state.iteration = iteration;
  load_module_state(*state.net, blob);
  return state;
}

}  // namespace mma
