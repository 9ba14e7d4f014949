#pragma once

// Labeled image sets and the on-disk manifest format.
//
// Manifest (paths relative to the manifest's directory):
//   # mma-dataset 1
//   classes circle square triangle
//   train images/train/00000.ppm 0
//   val images/val/00000.ppm 2
//   pair adv/00000.ppm images/val/00000.ppm 2     (adversarial, clean, label)

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace mma {

struct ImageDataset {
  torch::Tensor images;  // [N, 3, H, W] float32 in [0, 1]
  torch::Tensor labels;  // [N] int64
  std::vector<std::string> class_names;

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
  std::int64_t num_classes() const { return static_cast<std::int64_t>(class_names.size()); }
  ImageDataset subset(const torch::Tensor& indices) const;
  ImageDataset slice(std::int64_t begin, std::int64_t end) const;
  void validate() const;
};

// Clean images paired with externally produced adversarial counterparts.
struct AdversarialSet {
  torch::Tensor clean;
  torch::Tensor adversarial;
  torch::Tensor labels;
  std::vector<std::string> class_names;

  std::int64_t size() const { return clean.defined() ? clean.size(0) : 0; }
};

struct ManifestEntry {
  std::filesystem::path image;
  std::int64_t label = 0;
};

struct PairEntry {
  std::filesystem::path adversarial;
  std::filesystem::path clean;
  std::int64_t label = 0;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<std::string> class_names;
  std::map<std::string, std::vector<ManifestEntry>> splits;
  std::vector<PairEntry> pairs;

  // Validates labels and that every listed file exists.
  static DatasetManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

ImageDataset load_split(const DatasetManifest& manifest, const std::string& split);
AdversarialSet load_pairs(const DatasetManifest& manifest);

// Binary PPM (P6), 8- or 16-bit; returns [3, H, W] float32 in [0, 1].
torch::Tensor read_ppm(const std::filesystem::path& path);
// Writes 8-bit P6 from [3, H, W] in [0, 1].
void write_ppm(const std::filesystem::path& path, const torch::Tensor& image);

// Writes a dataset as PPM files plus a manifest with the given split name(s).
void export_dataset(const std::filesystem::path& manifest_path,
                    const std::map<std::string, ImageDataset>& splits);

// Writes adversarial/clean PPM pairs. Adversarial pixels are quantized and
// then projected into the 8-bit epsilon ball of the quantized clean pixel,
// so the bound still holds after reloading.
void export_adversarial_pairs(const std::filesystem::path& manifest_path,
                              const AdversarialSet& set, double epsilon);

}  // namespace mma
