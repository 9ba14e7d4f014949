#include "mma/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mma/errors.hpp"
#include "mma/text.hpp"

namespace mma {

ImageDataset ImageDataset::subset(const torch::Tensor& indices) const {
  return {images.index_select(0, indices), labels.index_select(0, indices), class_names};
}

ImageDataset ImageDataset::slice(std::int64_t begin, std::int64_t end) const {
  return {images.slice(0, begin, end), labels.slice(0, begin, end), class_names};
}

void ImageDataset::validate() const {
  if (size() == 0) throw ConfigurationError("dataset is empty");
  if (images.dim() != 4 || images.size(1) != 3) {
    throw ConfigurationError("dataset images must be [N, 3, H, W]");
  }
  if (labels.dim() != 1 || labels.size(0) != images.size(0)) {
    throw ConfigurationError("dataset labels must be [N]");
  }
  if (class_names.size() < 2) throw ConfigurationError("dataset needs at least 2 classes");
  if (labels.min().item<std::int64_t>() < 0 || labels.max().item<std::int64_t>() >= num_classes()) {
    throw ConfigurationError("dataset label outside [0, C)");
  }
}

namespace {

std::string next_token(std::istream& in) {
  std::string tok;
  while (in >> tok) {
    if (tok.front() == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    return tok;
  }
  throw FormatError("truncated PPM header");
}

std::filesystem::path resolve(const std::filesystem::path& root, const std::string& rel) {
  std::filesystem::path p(rel);
  return p.is_absolute() ? p : root / p;
}

std::int64_t parse_label(const std::string& text, std::size_t classes, const std::string& where) {
  std::int64_t label = 0;
  try {
    std::size_t used = 0;
    label = std::stoll(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
  } catch (const std::exception&) {
    throw FormatError(where + ": bad label '" + text + "'");
  }
  if (label < 0 || label >= static_cast<std::int64_t>(classes)) {
    throw FormatError(where + ": label " + text + " outside [0, " + std::to_string(classes) + ")");
  }
  return label;
}

void require_file(const std::filesystem::path& p, const std::string& where) {
  if (!std::filesystem::is_regular_file(p)) {
    throw FormatError(where + ": missing image file " + p.string());
  }
}

std::string relative_string(const std::filesystem::path& p, const std::filesystem::path& root) {
  return std::filesystem::relative(p, root).generic_string();
}

}  // namespace

torch::Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image " + path.string());
  if (next_token(in) != "P6") throw FormatError(path.string() + ": not a binary PPM (P6)");
  const int width = std::stoi(next_token(in));
  const int height = std::stoi(next_token(in));
  const int maxval = std::stoi(next_token(in));
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535) {
    throw FormatError(path.string() + ": bad PPM dimensions");
  }
  in.get();
  const int bytes_per = maxval < 256 ? 1 : 2;
  std::vector<unsigned char> raw(static_cast<std::size_t>(width) * height * 3 * bytes_per);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw FormatError(path.string() + ": truncated pixel data");
  auto image = torch::empty({3, height, width}, torch::kFloat32);
  auto acc = image.accessor<float, 3>();
  std::size_t i = 0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < 3; ++c) {
        int v = raw[i++];
        if (bytes_per == 2) v = (v << 8) | raw[i++];
        acc[c][y][x] = static_cast<float>(v) / static_cast<float>(maxval);
      }
    }
  }
  return image;
}

void write_ppm(const std::filesystem::path& path, const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) throw InputContractError("write_ppm expects [3, H, W]");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto q = (image.detach().to(torch::kFloat64).clamp(0, 1) * 255.0).round().to(torch::kUInt8);
  q = q.permute({1, 2, 0}).contiguous();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write image " + path.string());
  out << "P6\n" << image.size(2) << ' ' << image.size(1) << "\n255\n";
  out.write(reinterpret_cast<const char*>(q.data_ptr<std::uint8_t>()),
            static_cast<std::streamsize>(q.numel()));
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot open dataset manifest: " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  for (int line_no = 1; std::getline(in, line); ++line_no) {
    const auto where = path.string() + ":" + std::to_string(line_no);
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto words = split_words(line);
    if (words.empty()) continue;
    const auto& kind = words.front();
    if (kind == "classes") {
      m.class_names.assign(words.begin() + 1, words.end());
    } else if (kind == "pair") {
      if (words.size() != 4) throw FormatError(where + ": expected 'pair adv clean label'");
      if (m.class_names.empty()) throw FormatError(where + ": 'classes' must come first");
      PairEntry e{resolve(m.root, words[1]), resolve(m.root, words[2]),
                  parse_label(words[3], m.class_names.size(), where)};
      require_file(e.adversarial, where);
      require_file(e.clean, where);
      m.pairs.push_back(std::move(e));
    } else {
      if (words.size() != 3) throw FormatError(where + ": expected 'split path label'");
      if (m.class_names.empty()) throw FormatError(where + ": 'classes' must come first");
      ManifestEntry e{resolve(m.root, words[1]), parse_label(words[2], m.class_names.size(), where)};
      require_file(e.image, where);
      m.splits[kind].push_back(std::move(e));
    }
  }
  if (m.class_names.size() < 2) throw FormatError(path.string() + ": need at least 2 classes");
  return m;
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto base = path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write manifest " + path.string());
  out << "# mma-dataset 1\nclasses " << join_words(class_names) << "\n";
  for (const auto& [split, entries] : splits) {
    for (const auto& e : entries) {
      out << split << ' ' << relative_string(e.image, base) << ' ' << e.label << '\n';
    }
  }
  for (const auto& p : pairs) {
    out << "pair " << relative_string(p.adversarial, base) << ' '
        << relative_string(p.clean, base) << ' ' << p.label << '\n';
  }
}

ImageDataset load_split(const DatasetManifest& manifest, const std::string& split) {
  auto it = manifest.splits.find(split);
  if (it == manifest.splits.end() || it->second.empty()) {
    throw ConfigurationError("dataset has no '" + split + "' split");
  }
  std::vector<torch::Tensor> images;
  std::vector<std::int64_t> labels;
  for (const auto& e : it->second) {
    images.push_back(read_ppm(e.image));
    labels.push_back(e.label);
    if (images.back().sizes() != images.front().sizes()) {
      throw ConfigurationError("images in split '" + split + "' differ in size: " + e.image.string());
    }
  }
  return {torch::stack(images), torch::tensor(labels, torch::kInt64), manifest.class_names};
}

AdversarialSet load_pairs(const DatasetManifest& manifest) {
  if (manifest.pairs.empty()) throw ConfigurationError("manifest lists no adversarial pairs");
  std::vector<torch::Tensor> adv, clean;
  std::vector<std::int64_t> labels;
  for (const auto& p : manifest.pairs) {
    adv.push_back(read_ppm(p.adversarial));
    clean.push_back(read_ppm(p.clean));
    if (adv.back().sizes() != clean.back().sizes() || adv.back().sizes() != adv.front().sizes()) {
      throw ConfigurationError("adversarial/clean image shapes differ: " + p.adversarial.string());
    }
    labels.push_back(p.label);
  }
  return {torch::stack(clean), torch::stack(adv), torch::tensor(labels, torch::kInt64),
          manifest.class_names};
}

namespace {
std::string numbered(std::int64_t i) {
  std::ostringstream os;
  os << std::setw(5) << std::setfill('0') << i << ".ppm";
  return os.str();
}
}  // namespace

void export_dataset(const std::filesystem::path& manifest_path,
                    const std::map<std::string, ImageDataset>& splits) {
  DatasetManifest m;
  const auto base = manifest_path.parent_path().empty() ? std::filesystem::path(".")
                                                        : manifest_path.parent_path();
  for (const auto& [name, data] : splits) {
    data.validate();
    if (m.class_names.empty()) m.class_names = data.class_names;
    auto& entries = m.splits[name];
    for (std::int64_t i = 0; i < data.size(); ++i) {
      const auto file = base / "images" / name / numbered(i);
      write_ppm(file, data.images[i]);
      entries.push_back({file, data.labels[i].item<std::int64_t>()});
    }
  }
  m.save(manifest_path);
}

void export_adversarial_pairs(const std::filesystem::path& manifest_path,
                              const AdversarialSet& set, double epsilon) {
  DatasetManifest m;
  m.class_names = set.class_names;
  const auto base = manifest_path.parent_path().empty() ? std::filesystem::path(".")
                                                        : manifest_path.parent_path();
  const auto clean_q = (set.clean.to(torch::kFloat64).clamp(0, 1) * 255.0).round();
  auto adv_q = (set.adversarial.to(torch::kFloat64).clamp(0, 1) * 255.0).round();
  // 1e-9 absorbs representation error of epsilon * 255.
  const double budget = std::floor(epsilon * 255.0 + 1e-9);
  adv_q = torch::min(torch::max(adv_q, clean_q - budget), clean_q + budget).clamp(0, 255);
  for (std::int64_t i = 0; i < set.size(); ++i) {
    const auto adv_file = base / "adv" / numbered(i);
    const auto clean_file = base / "clean" / numbered(i);
    write_ppm(adv_file, adv_q[i] / 255.0);
    write_ppm(clean_file, clean_q[i] / 255.0);
    m.pairs.push_back({adv_file, clean_file, set.labels[i].item<std::int64_t>()});
  }
  m.save(manifest_path);
}

}  // namespace mma
