#include "mma/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <optional>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "mma/classifiers.hpp"
#include "mma/config.hpp"
#include "mma/errors.hpp"
#include "mma/eval_harness.hpp"
#include "mma/mutual_trainer.hpp"
#include "mma/report.hpp"
#include "mma/selfcheck.hpp"

namespace mma {

RunDirLock::RunDirLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
  std::filesystem::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw ConfigurationError("run directory '" + dir.string() +
                             "' is locked by another run (remove " + path_.string() +
                             " if it is stale)");
  }
  const auto pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto written = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunDirLock::~RunDirLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

namespace {

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output;
};

// Everything a subcommand needs, resolved from one config file. Relative
// paths inside the config are taken relative to the config's directory.
struct Workspace {
  RunConfig cfg;
  std::filesystem::path base;
  DatasetManifest manifest;
  std::vector<std::string> classes;
  std::unique_ptr<DualEncoder> surrogate;
  double temperature = 1.0;
  std::vector<TargetModel> targets;
  GroupMap groups;

  std::filesystem::path resolve(const std::string& p) const {
    if (p.empty()) return {};
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
  }
};

RunConfig read_config(const CommonArgs& args) {
  if (args.config.empty()) throw ConfigurationError("--config is required");
  if (!std::filesystem::exists(args.config)) {
    throw ConfigurationError("config file '" + args.config + "' does not exist");
  }
  auto cfg = load_config(args.config);
  apply_environment(cfg);
  if (args.seed) cfg.schedule.seed = *args.seed;
  if (!args.output.empty()) cfg.output_dir = args.output;
  if (cfg.device != "cpu") {
    throw ConfigurationError("device '" + cfg.device + "' is not available in this build");
  }
  return cfg;
}

ImageDataset with_classes(ImageDataset data, const std::vector<std::string>& classes) {
  data.class_names = classes;
  return data;
}

void load_targets(Workspace& ws) {
  std::map<std::string, std::string> group_of;
  for (const auto& [group, members] : ws.cfg.groups.groups) {
    for (const auto& m : members) group_of[m] = group;
  }
  for (const auto& [name, path] : ws.cfg.targets) {
    auto net = load_classifier(ws.resolve(path));
    if (net->classes != static_cast<std::int64_t>(ws.classes.size())) {
      throw ConfigurationError("target '" + name + "' predicts " + std::to_string(net->classes) +
                               " classes, dataset has " + std::to_string(ws.classes.size()));
    }
    const auto group = group_of.count(name) ? group_of[name] : net->family;
    ws.targets.push_back(make_target(name, group, net));
  }
  ws.groups = ws.cfg.groups.groups.empty() ? GroupMap::from_targets(ws.targets) : ws.cfg.groups;
}

Workspace open_workspace(const CommonArgs& args, bool need_surrogate,
                         const std::string& manifest_override = {}) {
  Workspace ws;
  ws.cfg = read_config(args);
  ws.base = std::filesystem::absolute(args.config).parent_path();
  if (manifest_override.empty()) {
    ws.cfg.require({"dataset.manifest"});
    ws.manifest = DatasetManifest::load(ws.resolve(ws.cfg.dataset_manifest));
  } else {
    ws.manifest = DatasetManifest::load(manifest_override);
  }
  ws.classes = ws.cfg.classes.empty() ? ws.manifest.class_names : ws.cfg.classes;
  if (ws.classes.size() != ws.manifest.class_names.size()) {
    throw ConfigurationError("'classes' lists " + std::to_string(ws.classes.size()) +
                             " names but the manifest has " +
                             std::to_string(ws.manifest.class_names.size()) + " classes");
  }
  if (need_surrogate) {
    ws.cfg.require({"surrogate.checkpoint"});
    ws.surrogate = load_encoder(ws.cfg.surrogate_backend, ws.resolve(ws.cfg.surrogate_checkpoint),
                                ws.resolve(ws.cfg.surrogate_sidecar));
    if (ws.cfg.surrogate_backend == "clip" &&
        ws.surrogate->name() != "clip:" + ws.cfg.surrogate_variant) {
      throw ConfigurationError("checkpoint is '" + ws.surrogate->name() +
                               "' but the config names variant '" + ws.cfg.surrogate_variant + "'");
    }
    ws.temperature = ws.cfg.temperature.value_or(ws.surrogate->default_temperature());
  }
  load_targets(ws);
  return ws;
}

std::unique_ptr<CandidateProvider> make_provider(const Workspace& ws) {
  // Fill-ins must be words the surrogate can encode, and never class labels.
  const std::set<std::string> labels(ws.classes.begin(), ws.classes.end());
  const auto& vocab = ws.surrogate->vocabulary();
  const auto allowed = [&](const std::string& w) {
    return w != kMaskToken && vocab.contains(w) && !labels.count(w);
  };
  if (ws.cfg.candidates_provider == "lm") {
    ws.cfg.require({"candidates.model", "candidates.sidecar"});
    auto lm = std::make_unique<LanguageModelProvider>(ws.resolve(ws.cfg.candidates_model),
                                                      ws.resolve(ws.cfg.candidates_sidecar));
    lm->restrict_to(allowed);
    return lm;
  }
  if (!ws.cfg.candidates_table.empty()) {
    return std::make_unique<StaticSynonymProvider>(
        StaticSynonymProvider::load(ws.resolve(ws.cfg.candidates_table)).restricted_to(allowed));
  }
  // Default pool: every allowed vocabulary word.
  std::vector<std::string> pool;
  for (const auto& w : vocab.words()) {
    if (allowed(w)) pool.push_back(w);
  }
  return std::make_unique<StaticSynonymProvider>(StaticSynonymProvider::from_pool(pool));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

int cmd_train(const CommonArgs& args, bool defense, std::ostream& out, std::ostream& err) {
  auto ws = open_workspace(args, true);
  const std::filesystem::path run_dir = ws.cfg.output_dir;
  RunDirLock lock(run_dir);
  save_config(ws.cfg, run_dir / "config.txt");

  const auto train = with_classes(load_split(ws.manifest, ws.cfg.train_split), ws.classes);
  const auto eval = with_classes(load_split(ws.manifest, ws.cfg.eval_split), ws.classes);
  const auto provider = make_provider(ws);
  const TargetModel* monitor = nullptr;
  for (const auto& t : ws.targets) {
    if (t.name == ws.cfg.monitor_target) monitor = &t;
  }

  TrainerOptions options;
  options.schedule = ws.cfg.schedule;
  options.attack = ws.cfg.attack_config();
  options.defense = ws.cfg.defense_config();
  options.temperature = ws.temperature;
  options.run_dir = run_dir;
  const TrainerSetup setup{*ws.surrogate, train, eval, *provider, monitor};
  auto generator = GeneratorState::create(ws.cfg.generator, ws.cfg.epsilon, ws.cfg.schedule.seed);
  const auto prompt = parse_prompt(ws.cfg.prompt);
  auto result = defense ? run(setup, options, std::move(generator), prompt)
                        : run_attack_only(setup, options, std::move(generator), prompt);

  if (!result.records.empty()) {
    write_text(run_dir / "iterations.csv", iterations_csv(result.records));
    write_text(run_dir / "accuracy.svg",
               accuracy_plot_svg(result.records, defense ? "train" : "attack-only"));
  }
  if (result.aborted) {
    err << "training aborted after " << result.records.size()
        << " iterations: " << result.abort_reason << '\n';
    return 3;
  }
  save_generator(result.generator, run_dir / "generator.bin");
  write_text(run_dir / "prompt.txt", to_string(result.prompt) + "\n");
  if (!ws.targets.empty()) {
    auto report = transfer_matrix(&result.generator, ws.targets, eval, ws.groups);
    report.source = (run_dir / "generator.bin").string();
    write_text(run_dir / "report.json", report.to_json().dump(2) + "\n");
    write_text(run_dir / "report.csv", report.to_csv());
    out << render_report_table(report);
  }
  const auto& last = result.records.back();
  out << "iterations " << result.records.size() << ", final prompt \"" << last.prompt
      << "\", surrogate clean " << last.surrogate_clean_acc << " adversarial "
      << last.surrogate_adv_acc << "\nrun directory " << run_dir.string() << '\n';
  return 0;
}

int cmd_defend(const CommonArgs& args, const std::string& generator_path,
               const std::string& prompt_text, const std::string& split,
               const std::string& out_path, std::ostream& out) {
  auto ws = open_workspace(args, true);
  const auto generator = load_generator(generator_path);
  const auto data = with_classes(load_split(ws.manifest, split.empty() ? ws.cfg.train_split : split),
                                 ws.classes);
  auto rng = at::make_generator<at::CPUGeneratorImpl>(ws.cfg.schedule.seed);
  const auto count = std::min(ws.cfg.schedule.defense_batch_size, data.size());
  const auto batch = data.subset(torch::randperm(data.size(), rng, torch::kInt64).slice(0, 0, count));
  torch::Tensor adv;
  {
    torch::NoGradGuard no_grad;
    adv = forward(generator, batch.images).to(torch::kFloat32);
  }
  const auto prompt = parse_prompt(prompt_text.empty() ? ws.cfg.prompt : prompt_text);
  const auto provider = make_provider(ws);
  const auto result = defend(prompt, *ws.surrogate, adv, batch.labels, ws.classes, ws.temperature,
                             *provider, ws.cfg.defense_config());
  nlohmann::json j = {{"prompt_before", to_string(prompt)},
                      {"prompt_after", to_string(result.prompt)},
                      {"saliency", result.saliency.scores},
                      {"threshold", result.saliency.threshold},
                      {"update_set", result.saliency.update_set},
                      {"replacements", result.replacements},
                      {"fooled", result.fooled},
                      {"true_prob_before", result.true_prob_before},
                      {"true_prob_after", result.true_prob_after}};
  out << j.dump(2) << '\n';
  if (!out_path.empty()) write_text(out_path, to_string(result.prompt) + "\n");
  return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& generator_path,
                 const std::string& adversarial_manifest, const std::string& dataset_override,
                 std::vector<std::string> splits, const std::string& out_dir, std::ostream& out) {
  auto ws = open_workspace(args, false, dataset_override);
  if (ws.targets.empty()) throw ConfigurationError("evaluate needs at least one entry in 'targets'");
  const std::filesystem::path dir = out_dir.empty() ? std::filesystem::path(ws.cfg.output_dir) / "eval"
                                                    : std::filesystem::path(out_dir);
  RunDirLock lock(dir);
  std::vector<std::pair<std::string, TransferReport>> reports;
  if (!adversarial_manifest.empty()) {
    const auto pairs = load_pairs(DatasetManifest::load(adversarial_manifest));
    auto report = transfer_matrix(pairs, ws.cfg.epsilon, ws.targets, ws.groups);
    report.source = adversarial_manifest;
    reports.emplace_back("pairs", std::move(report));
  } else {
    std::optional<GeneratorState> generator;
    if (!generator_path.empty()) generator = load_generator(generator_path);
    if (splits.empty()) {
      for (const auto& s : {ws.cfg.train_split, ws.cfg.eval_split}) {
        if (ws.manifest.splits.count(s) &&
            std::find(splits.begin(), splits.end(), s) == splits.end()) {
          splits.push_back(s);
        }
      }
    }
    if (splits.empty()) throw ConfigurationError("the manifest has none of the configured splits");
    for (const auto& split : splits) {
      const auto data = with_classes(load_split(ws.manifest, split), ws.classes);
      auto report = transfer_matrix(generator ? &*generator : nullptr, ws.targets, data, ws.groups);
      report.source = generator_path.empty() ? "clean" : generator_path;
      reports.emplace_back(split, std::move(report));
    }
  }
  for (const auto& [name, report] : reports) {
    write_text(dir / ("report_" + name + ".json"), report.to_json().dump(2) + "\n");
    write_text(dir / ("report_" + name + ".csv"), report.to_csv());
    out << "[" << name << "]\n" << render_report_table(report);
  }
  return 0;
}

int cmd_report(const std::string& input, const std::string& out_dir, std::ostream& out) {
  std::filesystem::path path(input);
  if (!std::filesystem::exists(path)) throw ConfigurationError("'" + input + "' does not exist");
  std::vector<std::filesystem::path> reports;
  std::optional<std::filesystem::path> log;
  if (std::filesystem::is_directory(path)) {
    if (std::filesystem::exists(path / "iterations.jsonl")) log = path / "iterations.jsonl";
    std::vector<std::filesystem::path> found;
    for (const auto& entry : std::filesystem::directory_iterator(path)) {
      const auto name = entry.path().filename().string();
      if (name.starts_with("report") && entry.path().extension() == ".json") found.push_back(entry.path());
    }
    std::sort(found.begin(), found.end());
    reports = found;
  } else if (path.extension() == ".jsonl") {
    log = path;
  } else {
    reports.push_back(path);
  }
  if (!log && reports.empty()) throw ConfigurationError("no reports or iteration logs under '" + input + "'");
  const std::filesystem::path dir =
      out_dir.empty() ? (std::filesystem::is_directory(path) ? path : path.parent_path()) : std::filesystem::path(out_dir);

  for (const auto& r : reports) {
    std::ifstream in(r);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(r.string() + ": " + e.what());
    }
    const auto report = TransferReport::from_json(j);
    const auto table = render_report_table(report);
    out << table;
    write_text(dir / (r.stem().string() + "_table.txt"), table);
  }
  if (log) {
    const auto records = read_iteration_log(*log);
    const auto csv = iterations_csv(records);
    out << csv;
    write_text(dir / "iterations.csv", csv);
    write_text(dir / "accuracy.svg", accuracy_plot_svg(records, log->parent_path().filename().string()));
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mutual-modality adversarial attack toolkit", "mma"};
  app.require_subcommand(1);

  CommonArgs common;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "run configuration file")->required();
    sub->add_option("--seed", common.seed, "override the configured seed");
    sub->add_option("--output", common.output, "override the output directory");
  };
  auto* train = app.add_subcommand("train", "alternate generator training and prompt defense");
  add_common(train);
  auto* attack_only = app.add_subcommand("attack-only", "train the generator with a fixed prompt");
  add_common(attack_only);

  std::string generator_path, prompt_text, split, out_path;
  auto* defend_cmd = app.add_subcommand("defend", "run one prompt-defense pass against a generator");
  add_common(defend_cmd);
  defend_cmd->add_option("--generator", generator_path, "generator checkpoint")->required();
  defend_cmd->add_option("--prompt", prompt_text, "prompt to defend (default: configured prompt)");
  defend_cmd->add_option("--split", split, "dataset split to draw the defense batch from");
  defend_cmd->add_option("--out", out_path, "write the defended prompt here");

  std::string adversarial, dataset_override, eval_out;
  std::vector<std::string> splits;
  auto* evaluate = app.add_subcommand("evaluate", "transfer report against the configured targets");
  add_common(evaluate);
  auto* gen_opt = evaluate->add_option("--generator", generator_path, "generator checkpoint");
  evaluate->add_option("--adversarial", adversarial, "manifest of adversarial/clean pairs")
      ->excludes(gen_opt);
  evaluate->add_option("--dataset", dataset_override, "evaluate on another dataset manifest");
  evaluate->add_option("--split", splits, "split(s) to evaluate (default: train and eval splits)");
  evaluate->add_option("--out", eval_out, "report directory (default: <output_dir>/eval)");

  std::string report_input, report_out;
  auto* report = app.add_subcommand("report", "render tables and plots from reports or logs");
  report->add_option("input", report_input, "report JSON, iterations.jsonl, or a run directory")
      ->required();
  report->add_option("--out", report_out, "output directory (default: next to the input)");

  auto* selfcheck = app.add_subcommand("selfcheck", "run the invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*train) return cmd_train(common, true, out, err);
    if (*attack_only) return cmd_train(common, false, out, err);
    if (*defend_cmd) return cmd_defend(common, generator_path, prompt_text, split, out_path, out);
    if (*evaluate) {
      return cmd_evaluate(common, generator_path, adversarial, dataset_override, splits, eval_out, out);
    }
    if (*report) return cmd_report(report_input, report_out, out);
    if (*selfcheck) return report_checks(run_invariant_suite(), out) ? 0 : 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  err << app.help();
  return 2;
}

}  // namespace mma
