#include "mma/desk.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mma/config.hpp"
#include "mma/errors.hpp"
#include "mma/prompt.hpp"

namespace mma {

namespace {

const std::vector<std::string> kShapeNames = {"circle", "square", "triangle", "cross",
                                              "ring",   "diamond", "bar",     "dots"};

// Signed inside-test for a shape centred at the origin with radius r.
bool inside(std::int64_t cls, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (cls) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return ax <= 0.8 * r && ay <= 0.8 * r;
    case 2: return dy <= 0.7 * r && dy >= -r + 2.0 * ax * 0.85;  // apex up
    case 3: return (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r);
    case 4: {
      const double d = std::sqrt(dx * dx + dy * dy);
      return d <= r && d >= 0.55 * r;
    }
    case 5: return ax + ay <= r;
    case 6: return ax <= r && ay <= 0.3 * r;
    case 7: {
      const double s = 0.5 * r;
      const double px = std::abs(ax - s), py = std::abs(ay - s);
      return px * px + py * py <= 0.16 * r * r;
    }
  }
  return false;
}

torch::Tensor render(std::int64_t cls, std::int64_t size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.03);
  double bg[3], fg[3];
  for (auto& c : bg) c = 0.15 + 0.7 * u(rng);
  // Foreground differs from background by at least 0.35 in some channel.
  for (int attempt = 0;; ++attempt) {
    double gap = 0;
    for (int c = 0; c < 3; ++c) {
      fg[c] = 0.05 + 0.9 * u(rng);
      gap = std::max(gap, std::abs(fg[c] - bg[c]));
    }
    if (gap >= 0.35 || attempt > 50) break;
  }
  const double half = static_cast<double>(size) / 2.0;
  const double r = (0.28 + 0.12 * u(rng)) * static_cast<double>(size);
  const double cx = half + (u(rng) - 0.5) * 0.25 * static_cast<double>(size);
  const double cy = half + (u(rng) - 0.5) * 0.25 * static_cast<double>(size);
  const double gx = (u(rng) - 0.5) * 0.2, gy = (u(rng) - 0.5) * 0.2;

  auto img = torch::empty({3, size, size}, torch::kFloat32);
  auto a = img.accessor<float, 3>();
  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const bool in = inside(cls, px - cx, py - cy, r);
      const double shade = gx * (px / size - 0.5) + gy * (py / size - 0.5);
      for (int c = 0; c < 3; ++c) {
        const double v = (in ? fg[c] : bg[c] + shade) + noise(rng);
        a[c][y][x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

ImageDataset make_split(const std::vector<std::string>& names, std::int64_t per_class,
                        std::int64_t size, std::mt19937_64& rng) {
  const auto classes = static_cast<std::int64_t>(names.size());
  std::vector<std::int64_t> labels;
  for (std::int64_t c = 0; c < classes; ++c) labels.insert(labels.end(), per_class, c);
  std::shuffle(labels.begin(), labels.end(), rng);
  std::vector<torch::Tensor> images;
  images.reserve(labels.size());
  for (auto c : labels) images.push_back(render(c, size, rng));
  return {torch::stack(images), torch::tensor(labels, torch::kInt64), names};
}

}  // namespace

std::vector<std::string> synthetic_class_names(std::int64_t classes) {
  if (classes < 2 || classes > static_cast<std::int64_t>(kShapeNames.size())) {
    throw ConfigurationError("synthetic dataset supports 2..8 classes");
  }
  return {kShapeNames.begin(), kShapeNames.begin() + classes};
}

std::pair<ImageDataset, ImageDataset> make_synthetic_dataset(const SyntheticConfig& cfg) {
  if (cfg.train_per_class < 1 || cfg.val_per_class < 1 || cfg.image_size < 8) {
    throw ConfigurationError("synthetic dataset sizes too small");
  }
  const auto names = synthetic_class_names(cfg.classes);
  std::mt19937_64 rng(cfg.seed);
  auto train = make_split(names, cfg.train_per_class, cfg.image_size, rng);
  auto val = make_split(names, cfg.val_per_class, cfg.image_size, rng);
  return {std::move(train), std::move(val)};
}

std::vector<std::string> prompt_word_pool() {
  return {"a",     "photo", "of",    "the",    "picture", "image",  "clean", "bad",
          "small", "large", "drawing", "an",   "good",    "blurry", "bright", "dark",
          "shape", "icon",  "sketch", "simple", "toy",    "big",    "nice",   "plain"};
}

TinyEncoderConfig desk_encoder_config(const std::vector<std::string>& class_names,
                                      std::int64_t image_size) {
  TinyEncoderConfig cfg;
  cfg.image_size = image_size;
  cfg.words = class_names;
  for (const auto& w : prompt_word_pool()) cfg.words.push_back(w);
  return cfg;
}

TinyDualEncoder pretrain_tiny_surrogate(const ImageDataset& train,
                                        const SurrogatePretrainConfig& cfg) {
  train.validate();
  auto config = desk_encoder_config(train.class_names, train.images.size(2));
  config.temperature = cfg.train_temperature;
  TinyDualEncoder encoder(config, cfg.seed);
  auto& net = encoder.net();
  torch::optim::Adam optimizer(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(cfg.seed + 1);
  std::mt19937_64 rng(cfg.seed + 2);
  const auto pool = prompt_word_pool();
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);

  net->train();
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = torch::randperm(train.size(), gen, torch::kInt64);
    for (std::int64_t s = 0; s < train.size(); s += cfg.batch_size) {
      const auto idx = order.slice(0, s, std::min(s + cfg.batch_size, train.size()));
      PromptTemplate prompt;
      if (!cfg.fixed_prompt.empty()) prompt = parse_prompt(cfg.fixed_prompt);
      else for (std::int64_t i = 0; i < cfg.prompt_length; ++i) prompt.tokens.push_back(pool[pick(rng)]);
      optimizer.zero_grad();
      const auto texts = normalize(encoder.encode_text(build_class_texts(train.class_names, prompt)));
      const auto imgs = normalize(encoder.encode_image(train.images.index_select(0, idx)));
      const auto logits = zero_shot_logits(imgs, texts, cfg.train_temperature);
      auto loss = torch::cross_entropy_loss(logits, train.labels.index_select(0, idx));
      loss.backward();
      optimizer.step();
    }
  }
  encoder.freeze();
  return encoder;
}

double desk_zero_shot_accuracy(const DualEncoder& encoder, const ImageDataset& data) {
  torch::NoGradGuard no_grad;
  const ZeroShotHead head{build_class_texts(data.class_names, parse_prompt("a photo of a")),
                          encoder.default_temperature()};
  return predict(encoder, data.images, head).eq(data.labels).to(torch::kFloat64).mean().item<double>();
}

std::filesystem::path prepare_desk(const std::filesystem::path& dir, const DeskConfig& cfg,
                                   std::ostream& log) {
  auto [train, val] = make_synthetic_dataset(cfg.data);
  export_dataset(dir / "manifest.txt", {{"train", train}, {"val", val}});
  log << "dataset: " << train.size() << " train / " << val.size() << " val images, "
      << train.num_classes() << " classes\n";

  // Train from the exported files so every model sees exactly what a run loads.
  const auto manifest = DatasetManifest::load(dir / "manifest.txt");
  train = load_split(manifest, "train");
  val = load_split(manifest, "val");

  const auto encoder = pretrain_tiny_surrogate(train, cfg.surrogate);
  encoder.save(dir / "surrogate.bin");
  log << "surrogate: zero-shot accuracy train " << desk_zero_shot_accuracy(encoder, train)
      << ", val " << desk_zero_shot_accuracy(encoder, val) << '\n';

  RunConfig run;
  run.surrogate_checkpoint = "surrogate.bin";
  run.dataset_manifest = "manifest.txt";
  for (const std::string family : {"vgg", "mlp", "resnet"}) {
    const auto net = train_classifier(family, train, cfg.targets);
    const auto file = "target_" + family + ".bin";
    save_classifier(net, dir / file);
    run.targets.emplace_back(family, file);
    log << "target " << family << ": accuracy train " << accuracy(net, train) << ", val "
        << accuracy(net, val) << '\n';
  }
  run.monitor_target = "resnet";
  run.output_dir = (dir / "run").string();
  save_config(run, dir / "run.cfg");
  return dir / "run.cfg";
}

}  // namespace mma
