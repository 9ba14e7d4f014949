#include "mma/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "mma/errors.hpp"
#include "mma/text.hpp"

namespace mma {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

double parse_double(const std::string& key, const std::string& value) {
  double out = 0;
  auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || end != value.data() + value.size() || !std::isfinite(out)) {
    throw ConfigurationError("'" + key + "': expected a number, got '" + value + "'");
  }
  return out;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& value) {
  Int out = 0;
  auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || end != value.data() + value.size()) {
    throw ConfigurationError("'" + key + "': expected an integer, got '" + value + "'");
  }
  return out;
}

std::string format_rho(const RhoPolicy& rho) {
  return rho.kind == RhoPolicy::Kind::kPercentile ? "percentile:" + format_double(rho.value)
                                                  : format_double(rho.value);
}

RhoPolicy parse_rho(const std::string& value) {
  constexpr std::string_view prefix = "percentile:";
  if (value.starts_with(prefix)) {
    return {RhoPolicy::Kind::kPercentile, parse_double("rho", trim(value.substr(prefix.size())))};
  }
  return {RhoPolicy::Kind::kAbsolute, parse_double("rho", value)};
}

std::string format_targets(const std::vector<std::pair<std::string, std::string>>& targets) {
  std::string out;
  for (const auto& [name, path] : targets) {
    if (!out.empty()) out += ", ";
    out += name + "=" + path;
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> parse_targets(const std::string& value) {
  std::vector<std::pair<std::string, std::string>> out;
  std::stringstream ss(value);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos || trim(item.substr(0, eq)).empty() ||
        trim(item.substr(eq + 1)).empty()) {
      throw ConfigurationError("'targets': expected name=checkpoint, got '" + item + "'");
    }
    out.emplace_back(trim(item.substr(0, eq)), trim(item.substr(eq + 1)));
  }
  return out;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define MMA_STRING(key, member)                                              \
  {key, {[](const RunConfig& c) { return c.member; },                        \
         [](RunConfig& c, const std::string& v) { c.member = v; }}}
#define MMA_DOUBLE(key, member)                                              \
  {key, {[](const RunConfig& c) { return format_double(c.member); },         \
         [](RunConfig& c, const std::string& v) { c.member = parse_double(key, v); }}}
#define MMA_INT(key, member, type)                                           \
  {key, {[](const RunConfig& c) { return std::to_string(c.member); },        \
         [](RunConfig& c, const std::string& v) { c.member = parse_int<type>(key, v); }}}

// Order here is the order format_config writes.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      MMA_STRING("surrogate.backend", surrogate_backend),
      MMA_STRING("surrogate.checkpoint", surrogate_checkpoint),
      MMA_STRING("surrogate.sidecar", surrogate_sidecar),
      MMA_STRING("surrogate.variant", surrogate_variant),
      MMA_STRING("dataset.manifest", dataset_manifest),
      MMA_STRING("dataset.train_split", train_split),
      MMA_STRING("dataset.eval_split", eval_split),
      {"classes",
       {[](const RunConfig& c) {
          std::string out;
          for (const auto& name : c.classes) out += (out.empty() ? "" : ", ") + name;
          return out;
        },
        [](RunConfig& c, const std::string& v) {
          c.classes.clear();
          std::stringstream ss(v);
          for (std::string item; std::getline(ss, item, ',');) {
            if (!trim(item).empty()) c.classes.push_back(trim(item));
          }
        }}},
      MMA_DOUBLE("epsilon", epsilon),
      MMA_DOUBLE("lr", learning_rate),
      {"tau",
       {[](const RunConfig& c) { return c.temperature ? format_double(*c.temperature) : ""; },
        [](RunConfig& c, const std::string& v) {
          if (v.empty()) c.temperature.reset();
          else c.temperature = parse_double("tau", v);
        }}},
      MMA_DOUBLE("alpha", alpha),
      MMA_DOUBLE("sigma", sigma),
      MMA_DOUBLE("weights.feat", feat_weight),
      MMA_DOUBLE("weights.tri", tri_weight),
      MMA_DOUBLE("weights.cls", cls_weight),
      {"rho",
       {[](const RunConfig& c) { return format_rho(c.rho); },
        [](RunConfig& c, const std::string& v) { c.rho = parse_rho(v); }}},
      MMA_INT("k", k, std::int64_t),
      MMA_STRING("prompt", prompt),
      MMA_INT("schedule.outer_iterations", schedule.outer_iterations, std::int64_t),
      MMA_INT("schedule.num_g", schedule.num_g, std::int64_t),
      MMA_INT("schedule.batch_size", schedule.batch_size, std::int64_t),
      MMA_INT("schedule.defense_batch_size", schedule.defense_batch_size, std::int64_t),
      MMA_INT("seed", schedule.seed, std::uint64_t),
      MMA_INT("generator.channels", generator.channels, std::int64_t),
      MMA_INT("generator.blocks", generator.blocks, std::int64_t),
      MMA_DOUBLE("generator.output_scale", generator.output_scale),
      MMA_STRING("candidates.provider", candidates_provider),
      MMA_STRING("candidates.table", candidates_table),
      MMA_STRING("candidates.model", candidates_model),
      MMA_STRING("candidates.sidecar", candidates_sidecar),
      {"targets",
       {[](const RunConfig& c) { return format_targets(c.targets); },
        [](RunConfig& c, const std::string& v) { c.targets = parse_targets(v); }}},
      {"groups",
       {[](const RunConfig& c) { return c.groups.to_string(); },
        [](RunConfig& c, const std::string& v) { c.groups = GroupMap::parse(v); }}},
      MMA_STRING("monitor_target", monitor_target),
      MMA_STRING("output_dir", output_dir),
      MMA_STRING("device", device),
  };
  return table;
}

#undef MMA_STRING
#undef MMA_DOUBLE
#undef MMA_INT

void range_error(const std::string& key, const std::string& rule) {
  throw ConfigurationError("'" + key + "' out of range: must be " + rule);
}

}  // namespace

void RunConfig::validate() const {
  if (surrogate_backend != "tiny" && surrogate_backend != "clip") {
    throw ConfigurationError("'surrogate.backend' must be 'tiny' or 'clip'");
  }
  if (surrogate_backend == "clip" && surrogate_variant.empty()) {
    throw ConfigurationError("missing required field 'surrogate.variant' for the clip backend");
  }
  if (!(epsilon > 0 && epsilon <= 1)) range_error("epsilon", "in (0, 1]");
  if (!(learning_rate >= 0)) range_error("lr", ">= 0");
  if (temperature && !(*temperature > 0)) range_error("tau", "> 0");
  if (!(alpha >= 0)) range_error("alpha", ">= 0");
  if (!(sigma > 0)) range_error("sigma", "> 0");
  if (!(feat_weight >= 0)) range_error("weights.feat", ">= 0");
  if (!(tri_weight >= 0)) range_error("weights.tri", ">= 0");
  if (!(cls_weight >= 0)) range_error("weights.cls", ">= 0");
  if (rho.kind == RhoPolicy::Kind::kAbsolute && !(rho.value >= 0)) range_error("rho", ">= 0");
  if (rho.kind == RhoPolicy::Kind::kPercentile && !(rho.value >= 0 && rho.value <= 100)) {
    range_error("rho", "a percentile in [0, 100]");
  }
  if (k < 1) range_error("k", ">= 1");
  if (split_words(prompt).empty()) range_error("prompt", "at least one word");
  if (schedule.outer_iterations < 1) range_error("schedule.outer_iterations", ">= 1");
  if (schedule.num_g < 1) range_error("schedule.num_g", ">= 1");
  if (schedule.batch_size < 1) range_error("schedule.batch_size", ">= 1");
  if (schedule.defense_batch_size < 1) range_error("schedule.defense_batch_size", ">= 1");
  if (generator.channels < 1) range_error("generator.channels", ">= 1");
  if (generator.blocks < 0) range_error("generator.blocks", ">= 0");
  if (!(generator.output_scale > 0)) range_error("generator.output_scale", "> 0");
  if (candidates_provider != "static" && candidates_provider != "lm") {
    throw ConfigurationError("'candidates.provider' must be 'static' or 'lm'");
  }
  if (!groups.groups.empty()) {
    std::vector<std::string> names;
    for (const auto& [n, _] : targets) names.push_back(n);
    groups.validate(names);
  }
  if (!monitor_target.empty()) {
    bool found = false;
    for (const auto& [n, _] : targets) found = found || n == monitor_target;
    if (!found) throw ConfigurationError("'monitor_target' names an unknown target");
  }
}

void RunConfig::require(const std::vector<std::string>& keys) const {
  for (const auto& key : keys) {
    for (const auto& [name, field] : fields()) {
      if (name == key && field.get(*this).empty()) {
        throw ConfigurationError("missing required field '" + key + "'");
      }
    }
  }
}

AttackConfig RunConfig::attack_config() const {
  AttackConfig a;
  a.triplet.alpha = alpha;
  a.cls.sigma = sigma;
  a.feat_weight = feat_weight;
  a.tri_weight = tri_weight;
  a.cls_weight = cls_weight;
  a.learning_rate = learning_rate;
  return a;
}

DefenseConfig RunConfig::defense_config() const {
  return {rho, static_cast<std::size_t>(k)};
}

RunConfig parse_config(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::map<std::string, int> seen;
  for (int line_no = 1; std::getline(in, line); ++line_no) {
    const auto where = source + ":" + std::to_string(line_no);
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigurationError(where + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (seen[key]++) throw ConfigurationError(where + ": duplicate key '" + key + "'");
    if (key == "schema") {
      if (value != std::to_string(kConfigSchema)) {
        throw ConfigurationError(where + ": unsupported schema '" + value + "'");
      }
      continue;
    }
    bool known = false;
    for (const auto& [name, field] : fields()) {
      if (name != key) continue;
      known = true;
      try {
        field.set(cfg, value);
      } catch (const ConfigurationError& e) {
        throw ConfigurationError(where + ": " + e.what());
      }
    }
    if (!known) throw ConfigurationError(where + ": unknown key '" + key + "'");
  }
  try {
    cfg.validate();
  } catch (const ConfigurationError& e) {
    throw ConfigurationError(source + ": " + e.what());
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string format_config(const RunConfig& cfg) {
  std::string out = "schema = " + std::to_string(kConfigSchema) + "\n";
  for (const auto& [name, field] : fields()) out += name + " = " + field.get(cfg) + "\n";
  return out;
}

void save_config(const RunConfig& cfg, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigurationError("cannot write config file '" + path.string() + "'");
  out << format_config(cfg);
}

void apply_environment(RunConfig& cfg) {
  if (const char* dir = std::getenv("MMA_OUTPUT_DIR"); dir && *dir) cfg.output_dir = dir;
  if (const char* dev = std::getenv("MMA_DEVICE"); dev && *dev) cfg.device = dev;
}

}  // namespace mma
