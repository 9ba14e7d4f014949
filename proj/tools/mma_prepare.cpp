// Desk-scale preparation: synthetic dataset export, surrogate pretraining,
// target classifier training, and a ready-to-run config.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mma/classifiers.hpp"
#include "mma/config.hpp"
#include "mma/dataset.hpp"
#include "mma/desk.hpp"
#include "mma/dual_encoder.hpp"
#include "mma/prompt.hpp"

namespace fs = std::filesystem;

namespace {

void export_synthetic(const fs::path& dir, const mma::SyntheticConfig& cfg) {
  auto [train, val] = mma::make_synthetic_dataset(cfg);
  mma::export_dataset(dir / "manifest.txt", {{"train", train}, {"val", val}});
  std::cout << "dataset: " << train.size() << " train / " << val.size() << " val images, "
            << train.num_classes() << " classes -> " << (dir / "manifest.txt").string() << '\n';
}

void pretrain(const fs::path& manifest, const fs::path& out, const mma::SurrogatePretrainConfig& cfg) {
  const auto m = mma::DatasetManifest::load(manifest);
  const auto train = mma::load_split(m, "train");
  const auto encoder = mma::pretrain_tiny_surrogate(train, cfg);
  encoder.save(out);
  std::cout << "surrogate: zero-shot train accuracy " << mma::desk_zero_shot_accuracy(encoder, train);
  if (m.splits.count("val")) std::cout << ", val " << mma::desk_zero_shot_accuracy(encoder, mma::load_split(m, "val"));
  std::cout << " -> " << out.string() << '\n';
}

void train_target(const fs::path& manifest, const std::string& family, const fs::path& out,
                  const mma::ClassifierTrainConfig& cfg) {
  const auto m = mma::DatasetManifest::load(manifest);
  const auto train = mma::load_split(m, "train");
  const auto net = mma::train_classifier(family, train, cfg);
  mma::save_classifier(net, out);
  std::cout << "target " << family << ": train accuracy " << mma::accuracy(net, train);
  if (m.splits.count("val")) std::cout << ", val " << mma::accuracy(net, mma::load_split(m, "val"));
  std::cout << " -> " << out.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prepare desk-scale datasets, surrogates and targets", "mma-prepare"};
  app.require_subcommand(1);

  mma::SyntheticConfig synth;
  mma::SurrogatePretrainConfig pre;
  mma::ClassifierTrainConfig cls;
  std::string out, manifest, family = "vgg";

  auto* dataset = app.add_subcommand("dataset", "render the synthetic shapes dataset");
  dataset->add_option("--out", out, "output directory")->required();
  dataset->add_option("--classes", synth.classes, "number of classes (2-8)");
  dataset->add_option("--train-per-class", synth.train_per_class);
  dataset->add_option("--val-per-class", synth.val_per_class);
  dataset->add_option("--size", synth.image_size, "image side in pixels");
  dataset->add_option("--seed", synth.seed);

  auto* surrogate = app.add_subcommand("surrogate", "pretrain the tiny dual encoder");
  surrogate->add_option("--manifest", manifest)->required();
  surrogate->add_option("--out", out, "checkpoint path")->required();
  surrogate->add_option("--epochs", pre.epochs);
  surrogate->add_option("--seed", pre.seed);
  surrogate->add_option("--fixed-prompt", pre.fixed_prompt, "training prompt (empty: random pool prompts)");

  auto* target = app.add_subcommand("target", "train a target classifier");
  target->add_option("--manifest", manifest)->required();
  target->add_option("--family", family, "vgg, mlp or resnet");
  target->add_option("--out", out, "checkpoint path")->required();
  target->add_option("--epochs", cls.epochs);
  target->add_option("--seed", cls.seed);

  auto* desk = app.add_subcommand("desk", "dataset, surrogate, three targets and run.cfg in one go");
  desk->add_option("--out", out, "output directory")->required();
  desk->add_option("--seed", synth.seed, "dataset seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*dataset) export_synthetic(out, synth);
    if (*surrogate) pretrain(manifest, out, pre);
    if (*target) train_target(manifest, family, out, cls);
    if (*desk) {
      const auto cfg = mma::prepare_desk(out, {synth, pre, cls}, std::cout);
      std::cout << "config -> " << cfg.string() << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
