#include "mma/classifiers.hpp"

#include "mma/blob.hpp"
#include "mma/errors.hpp"

namespace mma {

namespace {
constexpr const char* kBlobKind = "target-classifier";
constexpr std::uint32_t kBlobVersion = 1;

using torch::nn::Conv2d;
using torch::nn::Conv2dOptions;
using torch::nn::Linear;

class ResidualStageImpl : public torch::nn::Module {
 public:
  ResidualStageImpl(std::int64_t in, std::int64_t out) {
    conv1_ = register_module("conv1", Conv2d(Conv2dOptions(in, out, 3).stride(2).padding(1)));
    conv2_ = register_module("conv2", Conv2d(Conv2dOptions(out, out, 3).padding(1)));
    skip_ = register_module("skip", Conv2d(Conv2dOptions(in, out, 1).stride(2)));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    return torch::relu(skip_->forward(x) + conv2_->forward(torch::relu(conv1_->forward(x))));
  }

 private:
  Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
};
TORCH_MODULE(ResidualStage);

}  // namespace

ClassifierNetImpl::ClassifierNetImpl(std::string family_in, std::int64_t classes_in,
                                     std::int64_t image_size_in)
    : family(std::move(family_in)), classes(classes_in), image_size(image_size_in) {
  reset();
}

void ClassifierNetImpl::reset() {
  torch::nn::Sequential seq;
  if (family == "vgg") {
    const auto pooled = image_size / 4;
    seq->push_back(Conv2d(Conv2dOptions(3, 16, 3).padding(1)));
    seq->push_back(torch::nn::ReLU());
    seq->push_back(Conv2d(Conv2dOptions(16, 16, 3).padding(1)));
    seq->push_back(torch::nn::ReLU());
    seq->push_back(torch::nn::MaxPool2d(2));
    seq->push_back(Conv2d(Conv2dOptions(16, 32, 3).padding(1)));
    seq->push_back(torch::nn::ReLU());
    seq->push_back(Conv2d(Conv2dOptions(32, 32, 3).padding(1)));
    seq->push_back(torch::nn::ReLU());
    seq->push_back(torch::nn::MaxPool2d(2));
    seq->push_back(torch::nn::Flatten());
    seq->push_back(Linear(32 * pooled * pooled, 64));
    seq->push_back(torch::nn::ReLU());
    seq->push_back(Linear(64, classes));
  } else if (family == "mlp") {
    seq->push_back(torch::nn::Flatten());
    seq->push_back(Linear(3 * image_size * image_size, 256));
    seq->push_back(torch::nn::ReLU());
    seq->push_back(Linear(256, 128));
    seq->push_back(torch::nn::ReLU());
    seq->push_back(Linear(128, classes));
  } else if (family == "resnet") {
    seq->push_back(Conv2d(Conv2dOptions(3, 16, 3).padding(1)));
    seq->push_back(torch::nn::ReLU());
    seq->push_back(ResidualStage(16, 24));
    seq->push_back(ResidualStage(24, 32));
    seq->push_back(torch::nn::AdaptiveAvgPool2d(1));
    seq->push_back(torch::nn::Flatten());
    seq->push_back(Linear(32, classes));
  } else {
    throw ConfigurationError("unknown classifier family '" + family +
                             "' (expected vgg, mlp or resnet)");
  }
  layers = register_module("layers", seq);
}

torch::Tensor ClassifierNetImpl::forward(const torch::Tensor& images) {
  return layers->forward((images - 0.5) / 0.25);
}

ClassifierNet make_classifier(const std::string& family, std::int64_t classes,
                              std::int64_t image_size, std::uint64_t seed) {
  torch::manual_seed(seed);
  return ClassifierNet(family, classes, image_size);
}

ClassifierNet train_classifier(const std::string& family, const ImageDataset& train,
                               const ClassifierTrainConfig& cfg) {
  train.validate();
  auto net = make_classifier(family, train.num_classes(), train.images.size(2), cfg.seed);
  torch::optim::Adam optimizer(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(cfg.seed + 1);
  net->train();
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = torch::randperm(train.size(), gen, torch::kInt64);
    for (std::int64_t start = 0; start < train.size(); start += cfg.batch_size) {
      const auto idx = order.slice(0, start, std::min(start + cfg.batch_size, train.size()));
      optimizer.zero_grad();
      auto loss = torch::cross_entropy_loss(net->forward(train.images.index_select(0, idx)),
                                            train.labels.index_select(0, idx));
      loss.backward();
      optimizer.step();
    }
  }
  net->eval();
  for (auto& p : net->parameters()) p.set_requires_grad(false);
  return net;
}

torch::Tensor classify(const ClassifierNet& net, const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  return torch::argmax(net.ptr()->forward(images), -1);
}

double accuracy(const ClassifierNet& net, const ImageDataset& data) {
  const auto pred = classify(net, data.images);
  return pred.eq(data.labels).to(torch::kFloat64).mean().item<double>();
}

void save_classifier(const ClassifierNet& net, const std::filesystem::path& path) {
  Blob blob;
  blob.kind = kBlobKind;
  blob.version = kBlobVersion;
  blob.header = {{"family", net->family}, {"classes", net->classes}, {"image_size", net->image_size}};
  blob.tensors = module_state(*net);
  write_blob(path, blob);
}

ClassifierNet load_classifier(const std::filesystem::path& path) {
  const auto blob = read_blob(path, kBlobKind, kBlobVersion);
  ClassifierNet net(nullptr);
  try {
    net = ClassifierNet(blob.header.at("family").get<std::string>(),
                        blob.header.at("classes").get<std::int64_t>(),
                        blob.header.at("image_size").get<std::int64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad classifier header: " + e.what());
  }
  load_module_state(*net, blob);
  net->eval();
  for (auto& p : net->parameters()) p.set_requires_grad(false);
  return net;
}

}  // namespace mma
