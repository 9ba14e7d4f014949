#include "mma/eval_harness.hpp"

#include <algorithm>
#include <iomanip>
#include <set>
#include <sstream>

#include "mma/errors.hpp"
#include "mma/text.hpp"

namespace mma {

namespace {

constexpr std::int64_t kEvalChunk = 256;

void check_size(const TargetModel& target, const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3) {
    throw ConfigurationError("target '" + target.name + "' needs images shaped [B, 3, H, W]");
  }
  if (target.image_size > 0 &&
      (images.size(2) != target.image_size || images.size(3) != target.image_size)) {
    throw ConfigurationError("target '" + target.name + "' expects " +
                             std::to_string(target.image_size) + "px images, dataset has " +
                             std::to_string(images.size(2)) + "px");
  }
}

torch::Tensor predictions(const TargetModel& target, const torch::Tensor& images) {
  check_size(target, images);
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (std::int64_t s = 0; s < images.size(0); s += kEvalChunk) {
    parts.push_back(target.classify(images.slice(0, s, std::min(s + kEvalChunk, images.size(0)))));
  }
  return torch::cat(parts).to(torch::kInt64);
}

torch::Tensor adversarial_images(const GeneratorState& generator, const torch::Tensor& clean) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (std::int64_t s = 0; s < clean.size(0); s += kEvalChunk) {
    parts.push_back(forward(generator, clean.slice(0, s, std::min(s + kEvalChunk, clean.size(0))))
                        .to(clean.scalar_type()));
  }
  auto adv = torch::cat(parts);
  if (linf_distance(adv, clean) > generator.epsilon + 1e-6) {
    throw InputContractError("generator output violates the epsilon bound");
  }
  return adv;
}

}  // namespace

TargetModel make_target(std::string name, std::string group, ClassifierNet net) {
  TargetModel t;
  t.name = std::move(name);
  t.group = std::move(group);
  t.image_size = net->image_size;
  t.classify = [net](const torch::Tensor& images) { return mma::classify(net, images); };
  return t;
}

double attack_success_rate(std::span<const std::int64_t> predictions,
                           std::span<const std::int64_t> labels) {
  if (predictions.size() != labels.size()) {
    throw InputContractError("predictions and labels differ in length");
  }
  if (labels.empty()) throw InputContractError("attack success rate of an empty set");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) wrong += predictions[i] != labels[i];
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

double attack_success_rate(const torch::Tensor& predictions, const torch::Tensor& labels) {
  auto p = predictions.to(torch::kInt64).contiguous();
  auto l = labels.to(torch::kInt64).contiguous();
  return attack_success_rate(
      std::span<const std::int64_t>(p.data_ptr<std::int64_t>(), static_cast<std::size_t>(p.numel())),
      std::span<const std::int64_t>(l.data_ptr<std::int64_t>(), static_cast<std::size_t>(l.numel())));
}

double target_accuracy(const TargetModel& target, const torch::Tensor& images,
                       const torch::Tensor& labels) {
  return 1.0 - attack_success_rate(predictions(target, images), labels);
}

TargetAccuracy evaluate_target(const TargetModel& target, const ImageDataset& data,
                               const GeneratorState* generator) {
  data.validate();
  TargetAccuracy acc;
  acc.clean_acc = target_accuracy(target, data.images, data.labels);
  acc.adv_acc = generator == nullptr
                    ? acc.clean_acc
                    : target_accuracy(target, adversarial_images(*generator, data.images),
                                      data.labels);
  return acc;
}

GroupMap GroupMap::from_targets(const std::vector<TargetModel>& targets) {
  GroupMap map;
  for (const auto& t : targets) {
    auto it = std::find_if(map.groups.begin(), map.groups.end(),
                           [&](const auto& g) { return g.first == t.group; });
    if (it == map.groups.end()) {
      map.groups.push_back({t.group, {t.name}});
    } else {
      it->second.push_back(t.name);
    }
  }
  return map;
}

GroupMap GroupMap::parse(const std::string& text) {
  GroupMap map;
  std::stringstream groups(text);
  for (std::string entry; std::getline(groups, entry, ';');) {
    if (entry.find_first_not_of(" \t") == std::string::npos) continue;
    const auto colon = entry.find(':');
    if (colon == std::string::npos) {
      throw ConfigurationError("group entry '" + entry + "' must look like group:target,target");
    }
    auto name = split_words(entry.substr(0, colon));
    if (name.size() != 1) throw ConfigurationError("bad group name in '" + entry + "'");
    std::vector<std::string> members;
    std::stringstream list(entry.substr(colon + 1));
    for (std::string m; std::getline(list, m, ',');) {
      auto w = split_words(m);
      if (w.size() == 1) members.push_back(w.front());
      else if (!w.empty()) throw ConfigurationError("bad target name '" + m + "'");
    }
    map.groups.emplace_back(name.front(), std::move(members));
  }
  return map;
}

std::string GroupMap::to_string() const {
  std::string out;
  for (const auto& [name, members] : groups) {
    if (!out.empty()) out += ';';
    out += name + ':';
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (i) out += ',';
      out += members[i];
    }
  }
  return out;
}

void GroupMap::validate(const std::vector<std::string>& names) const {
  std::map<std::string, int> seen;
  std::set<std::string> group_names;
  for (const auto& [group, members] : groups) {
    if (!group_names.insert(group).second) {
      throw ConfigurationError("group '" + group + "' declared twice");
    }
    if (members.empty()) throw ConfigurationError("group '" + group + "' has no targets");
    for (const auto& m : members) ++seen[m];
  }
  for (const auto& n : names) {
    auto it = seen.find(n);
    if (it == seen.end()) throw ConfigurationError("target '" + n + "' is not in any group");
    if (it->second != 1) throw ConfigurationError("target '" + n + "' is in more than one group");
  }
  if (seen.size() != names.size()) {
    for (const auto& [m, _] : seen) {
      if (std::find(names.begin(), names.end(), m) == names.end()) {
        throw ConfigurationError("group member '" + m + "' is not a known target");
      }
    }
  }
}

double group_overall(const std::map<std::string, double>& per_target, const GroupMap& groups) {
  std::vector<std::string> names;
  for (const auto& [n, _] : per_target) names.push_back(n);
  groups.validate(names);
  // Sorted accumulation keeps the result bit-identical under permutation.
  auto sorted_groups = groups.groups;
  std::sort(sorted_groups.begin(), sorted_groups.end());
  double total = 0;
  for (auto& [_, members] : sorted_groups) {
    std::sort(members.begin(), members.end());
    double sum = 0;
    for (const auto& m : members) sum += per_target.at(m);
    total += sum / static_cast<double>(members.size());
  }
  return total / static_cast<double>(sorted_groups.size());
}

nlohmann::json TransferReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& t : targets) {
    rows.push_back({{"name", t.name},
                    {"group", t.group},
                    {"clean_acc", t.clean_acc},
                    {"adv_acc", t.adv_acc},
                    {"attack_success_rate", t.attack_success_rate}});
  }
  nlohmann::json g = nlohmann::json::array();
  for (const auto& [name, members] : groups.groups) g.push_back({{"group", name}, {"targets", members}});
  return {{"source", source},
          {"targets", rows},
          {"groups", g},
          {"overall_clean", overall_clean},
          {"overall_adv", overall_adv}};
}

TransferReport TransferReport::from_json(const nlohmann::json& j) {
  TransferReport r;
  try {
    r.source = j.at("source");
    for (const auto& row : j.at("targets")) {
      r.targets.push_back({row.at("name"), row.at("group"), row.at("clean_acc"), row.at("adv_acc"),
                           row.at("attack_success_rate")});
    }
    for (const auto& g : j.at("groups")) {
      r.groups.groups.emplace_back(g.at("group"), g.at("targets").get<std::vector<std::string>>());
    }
    r.overall_clean = j.at("overall_clean");
    r.overall_adv = j.at("overall_adv");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad transfer report: ") + e.what());
  }
  return r;
}

std::string TransferReport::to_csv() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "target,group,clean_acc,adv_acc,attack_success_rate\n";
  for (const auto& t : targets) {
    os << t.name << ',' << t.group << ',' << t.clean_acc << ',' << t.adv_acc << ','
       << t.attack_success_rate << '\n';
  }
  os << "overall,," << overall_clean << ',' << overall_adv << ',' << 1.0 - overall_adv << '\n';
  return os.str();
}

std::pair<double, double> TransferReport::recompute_overall() const {
  std::map<std::string, double> clean, adv;
  for (const auto& t : targets) {
    clean[t.name] = t.clean_acc;
    adv[t.name] = t.adv_acc;
  }
  return {group_overall(clean, groups), group_overall(adv, groups)};
}

namespace {

TransferReport assemble(std::string source, std::vector<TargetReport> rows, const GroupMap& groups) {
  TransferReport report;
  report.source = std::move(source);
  report.targets = std::move(rows);
  report.groups = groups;
  std::tie(report.overall_clean, report.overall_adv) = report.recompute_overall();
  return report;
}

void check_targets(const std::vector<TargetModel>& targets, const GroupMap& groups) {
  if (targets.empty()) throw ConfigurationError("transfer evaluation needs at least one target");
  std::vector<std::string> names;
  for (const auto& t : targets) names.push_back(t.name);
  groups.validate(names);
}

std::string group_of(const GroupMap& groups, const std::string& name) {
  for (const auto& [g, members] : groups.groups) {
    if (std::find(members.begin(), members.end(), name) != members.end()) return g;
  }
  return {};
}

}  // namespace

TransferReport transfer_matrix(const GeneratorState* generator,
                               const std::vector<TargetModel>& targets,
                               const ImageDataset& data, const GroupMap& groups) {
  check_targets(targets, groups);
  data.validate();
  const auto adv = generator ? adversarial_images(*generator, data.images) : data.images;
  std::vector<TargetReport> rows;
  for (const auto& t : targets) {
    TargetReport row{t.name, group_of(groups, t.name)};
    row.clean_acc = target_accuracy(t, data.images, data.labels);
    row.attack_success_rate = attack_success_rate(predictions(t, adv), data.labels);
    row.adv_acc = 1.0 - row.attack_success_rate;
    rows.push_back(std::move(row));
  }
  return assemble(generator ? "generator" : "clean", std::move(rows), groups);
}

TransferReport transfer_matrix(const AdversarialSet& set, double epsilon,
                               const std::vector<TargetModel>& targets, const GroupMap& groups) {
  check_targets(targets, groups);
  if (set.size() == 0) throw ConfigurationError("adversarial set is empty");
  if (set.clean.sizes() != set.adversarial.sizes()) {
    throw ConfigurationError("adversarial and clean images differ in shape");
  }
  for (std::int64_t i = 0; i < set.size(); ++i) {
    if (linf_distance(set.adversarial[i], set.clean[i]) > epsilon + 1e-6) {
      throw InputContractError("adversarial image " + std::to_string(i) +
                               " exceeds the epsilon bound");
    }
  }
  std::vector<TargetReport> rows;
  for (const auto& t : targets) {
    TargetReport row{t.name, group_of(groups, t.name)};
    row.clean_acc = target_accuracy(t, set.clean, set.labels);
    row.attack_success_rate = attack_success_rate(predictions(t, set.adversarial), set.labels);
    row.adv_acc = 1.0 - row.attack_success_rate;
    rows.push_back(std::move(row));
  }
  return assemble("external", std::move(rows), groups);
}

}  // namespace mma
