#include "mma/mutual_trainer.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "mma/blob.hpp"
#include "mma/errors.hpp"

namespace mma {

void TrainSchedule::validate() const {
  if (outer_iterations < 1) throw ConfigurationError("outer_iterations must be >= 1");
  if (num_g < 1) throw ConfigurationError("num_g must be >= 1");
  if (batch_size < 1 || defense_batch_size < 1) {
    throw ConfigurationError("batch sizes must be >= 1");
  }
}

nlohmann::json StepRecord::to_json() const {
  return {{"iteration", iteration}, {"step", step},   {"feat", loss.feat},
          {"tri", loss.tri},         {"cls", loss.cls}, {"total", loss.total}};
}

nlohmann::json IterationRecord::to_json() const {
  nlohmann::json j = {{"iteration", iteration},
                      {"steps", steps},
                      {"loss",
                       {{"feat", mean_loss.feat},
                        {"tri", mean_loss.tri},
                        {"cls", mean_loss.cls},
                        {"total", mean_loss.total}}},
                      {"surrogate_clean_acc", surrogate_clean_acc},
                      {"surrogate_adv_acc", surrogate_adv_acc},
                      {"surrogate_clean_acc_initial", surrogate_clean_acc_initial},
                      {"surrogate_adv_acc_initial", surrogate_adv_acc_initial},
                      {"target_clean_acc", nullptr},
                      {"target_adv_acc", nullptr},
                      {"attack_prompt", attack_prompt},
                      {"attack_text_hash", attack_text_hash},
                      {"prompt", prompt},
                      {"defense_true_prob_before", defense_true_prob_before},
                      {"defense_true_prob_after", defense_true_prob_after},
                      {"saliency", nullptr}};
  if (target_clean_acc) j["target_clean_acc"] = *target_clean_acc;
  if (target_adv_acc) j["target_adv_acc"] = *target_adv_acc;
  if (saliency) {
    j["saliency"] = {{"scores", saliency->scores},
                     {"threshold", saliency->threshold},
                     {"update_set", saliency->update_set}};
  }
  nlohmann::json rep = nlohmann::json::array();
  for (const auto& [n, w] : replacements) rep.push_back({{"position", n}, {"word", w}});
  j["replacements"] = rep;
  return j;
}

IterationRecord IterationRecord::from_json(const nlohmann::json& j) {
  IterationRecord r;
  try {
    r.iteration = j.at("iteration");
    r.steps = j.at("steps");
    const auto& l = j.at("loss");
    r.mean_loss = {l.at("feat"), l.at("tri"), l.at("cls"), l.at("total")};
    r.surrogate_clean_acc = j.at("surrogate_clean_acc");
    r.surrogate_adv_acc = j.at("surrogate_adv_acc");
    r.surrogate_clean_acc_initial = j.at("surrogate_clean_acc_initial");
    r.surrogate_adv_acc_initial = j.at("surrogate_adv_acc_initial");
    if (!j.at("target_clean_acc").is_null()) r.target_clean_acc = j.at("target_clean_acc").get<double>();
    if (!j.at("target_adv_acc").is_null()) r.target_adv_acc = j.at("target_adv_acc").get<double>();
    r.attack_prompt = j.at("attack_prompt");
    r.attack_text_hash = j.at("attack_text_hash");
    r.prompt = j.at("prompt");
    r.defense_true_prob_before = j.at("defense_true_prob_before");
    r.defense_true_prob_after = j.at("defense_true_prob_after");
    if (!j.at("saliency").is_null()) {
      const auto& s = j.at("saliency");
      r.saliency = SaliencyReport{s.at("scores").get<std::vector<double>>(), s.at("threshold").get<double>(),
                                  s.at("update_set").get<std::vector<std::size_t>>()};
    }
    for (const auto& rep : j.at("replacements")) {
      r.replacements.emplace_back(rep.at("position").get<std::size_t>(),
                                  rep.at("word").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad iteration record: ") + e.what());
  }
  return r;
}

std::string text_embedding_hash(const DualEncoder& surrogate,
                                const std::vector<std::string>& class_names,
                                const PromptTemplate& prompt) {
  torch::NoGradGuard no_grad;
  const auto emb = normalize(surrogate.encode_text(build_class_texts(class_names, prompt)));
  return hex64(fingerprint({emb.values()}));
}

namespace {

constexpr std::int64_t kEvalChunk = 256;

class RunLog {
 public:
  explicit RunLog(const std::filesystem::path& dir) : dir_(dir) {
    if (dir_.empty()) return;
    std::filesystem::create_directories(dir_ / "checkpoints");
    std::filesystem::create_directories(dir_ / "prompts");
    steps_.open(dir_ / "train_log.jsonl", std::ios::trunc);
    iterations_.open(dir_ / "iterations.jsonl", std::ios::trunc);
    history_.open(dir_ / "prompt_history.jsonl", std::ios::trunc);
    if (!steps_ || !iterations_ || !history_) {
      throw FormatError("cannot create run logs under " + dir_.string());
    }
  }

  void step(const StepRecord& r) {
    if (dir_.empty()) return;
    steps_ << r.to_json().dump() << '\n';
  }

  void iteration(const IterationRecord& r, const GeneratorState& g) {
    if (dir_.empty()) return;
    iterations_ << r.to_json().dump() << '\n';
    iterations_.flush();
    steps_.flush();
    nlohmann::json h = {{"iteration", r.iteration}, {"prompt", r.prompt}, {"saliency", nullptr}};
    if (r.saliency) {
      h["saliency"] = {{"scores", r.saliency->scores}, {"threshold", r.saliency->threshold},
                       {"update_set", r.saliency->update_set}};
    }
    history_ << h.dump() << '\n';
    history_.flush();
    std::ostringstream name;
    name << "iter_" << std::setw(2) << std::setfill('0') << r.iteration;
    save_generator(g, dir_ / "checkpoints" / (name.str() + ".bin"));
    std::ofstream(dir_ / "prompts" / (name.str() + ".txt"), std::ios::trunc) << r.prompt << '\n';
  }

  void flush() {
    if (dir_.empty()) return;
    steps_.flush();
    iterations_.flush();
  }

 private:
  std::filesystem::path dir_;
  std::ofstream steps_, iterations_, history_;
};

double surrogate_accuracy(const DualEncoder& surrogate, const torch::Tensor& images,
                          const torch::Tensor& labels, const UnitEmbedding& texts,
                          double temperature) {
  torch::NoGradGuard no_grad;
  std::int64_t correct = 0;
  for (std::int64_t s = 0; s < images.size(0); s += kEvalChunk) {
    const auto e = std::min(s + kEvalChunk, images.size(0));
    const auto emb = normalize(surrogate.encode_image(images.slice(0, s, e)));
    const auto pred = predict_from_probs(zero_shot_probs(emb, texts, temperature));
    correct += pred.eq(labels.slice(0, s, e)).sum().item<std::int64_t>();
  }
  return static_cast<double>(correct) / static_cast<double>(images.size(0));
}

torch::Tensor adversarial_batch(const GeneratorState& g, const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (std::int64_t s = 0; s < images.size(0); s += kEvalChunk) {
    parts.push_back(forward(g, images.slice(0, s, std::min(s + kEvalChunk, images.size(0))))
                        .to(images.scalar_type()));
  }
  return torch::cat(parts);
}

}  // namespace

TrainResult run(const TrainerSetup& setup, const TrainerOptions& options, GeneratorState generator,
                PromptTemplate prompt) {
  const auto& schedule = options.schedule;
  schedule.validate();
  options.attack.validate();
  options.defense.validate();
  setup.train.validate();
  setup.eval.validate();
  if (!(options.temperature > 0)) throw ConfigurationError("temperature must be > 0");
  const auto& classes = setup.train.class_names;
  const auto& surrogate = setup.surrogate;
  const auto surrogate_before = surrogate.fingerprint();

  RunLog log(options.run_dir);
  torch::manual_seed(schedule.seed);
  auto shuffle_rng = at::make_generator<at::CPUGeneratorImpl>(schedule.seed * 2 + 1);
  auto defense_rng = at::make_generator<at::CPUGeneratorImpl>(schedule.seed * 2 + 2);

  auto optimizer = make_generator_optimizer(generator, options.attack.learning_rate);
  TextEmbeddingCache cache;
  const auto initial_prompt = prompt;
  const auto initial_texts = [&] {
    torch::NoGradGuard no_grad;
    return normalize(surrogate.encode_text(build_class_texts(classes, initial_prompt)));
  }();

  TrainResult result{generator, prompt};
  const auto n_train = setup.train.size();
  std::int64_t global_step = 0;

  for (std::int64_t it = 1; it <= schedule.outer_iterations; ++it) {
    IterationRecord record;
    record.iteration = it;
    record.attack_prompt = to_string(prompt);
    const auto& texts = cache.get(surrogate, build_class_texts(classes, prompt));
    record.attack_text_hash = hex64(fingerprint({texts.values()}));

    AttackLossReport sum;
    try {
      for (std::int64_t epoch = 0; epoch < schedule.num_g; ++epoch) {
        const auto order = torch::randperm(n_train, shuffle_rng, torch::kInt64);
        for (std::int64_t s = 0; s < n_train; s += schedule.batch_size) {
          const auto idx = order.slice(0, s, std::min(s + schedule.batch_size, n_train));
          const auto batch = setup.train.subset(idx);
          const auto loss = attack_step(generator, optimizer, surrogate, batch.images, batch.labels,
                                        texts, options.temperature, options.attack);
          ++global_step;
          ++record.steps;
          sum.feat += loss.feat;
          sum.tri += loss.tri;
          sum.cls += loss.cls;
          sum.total += loss.total;
          log.step({it, global_step, loss});
        }
        ++result.generator_epochs;
      }
    } catch (const TrainingDivergenceError& e) {
      log.flush();
      result.aborted = true;
      result.abort_reason = e.what();
      break;
    }
    generator.iteration = it;
    generator.net->eval();
    const double steps = static_cast<double>(std::max<std::int64_t>(record.steps, 1));
    record.mean_loss = {sum.feat / steps, sum.tri / steps, sum.cls / steps, sum.total / steps};

    if (options.defense_enabled) {
      const auto count = std::min(schedule.defense_batch_size, n_train);
      const auto idx = torch::randperm(n_train, defense_rng, torch::kInt64).slice(0, 0, count);
      const auto batch = setup.train.subset(idx);
      const auto adv = adversarial_batch(generator, batch.images);
      auto defense = defend(prompt, surrogate, adv, batch.labels, classes, options.temperature,
                            setup.candidates, options.defense);
      if (defense.true_prob_after < defense.true_prob_before - 1e-6) {
        throw std::logic_error("defense lowered the mean true-label probability");
      }
      record.saliency = defense.saliency;
      record.replacements = defense.replacements;
      record.defense_true_prob_before = defense.true_prob_before;
      record.defense_true_prob_after = defense.true_prob_after;
      prompt = defense.prompt;
      ++result.defense_passes;
    }
    record.prompt = to_string(prompt);

    {
      torch::NoGradGuard no_grad;
      const auto& eval = setup.eval;
      const auto adv = adversarial_batch(generator, eval.images);
      const auto& current = cache.get(surrogate, build_class_texts(classes, prompt));
      record.surrogate_clean_acc =
          surrogate_accuracy(surrogate, eval.images, eval.labels, current, options.temperature);
      record.surrogate_adv_acc =
          surrogate_accuracy(surrogate, adv, eval.labels, current, options.temperature);
      record.surrogate_clean_acc_initial =
          surrogate_accuracy(surrogate, eval.images, eval.labels, initial_texts, options.temperature);
      record.surrogate_adv_acc_initial =
          surrogate_accuracy(surrogate, adv, eval.labels, initial_texts, options.temperature);
      if (setup.monitor) {
        record.target_clean_acc = target_accuracy(*setup.monitor, eval.images, eval.labels);
        record.target_adv_acc = target_accuracy(*setup.monitor, adv, eval.labels);
      }
    }
    log.iteration(record, generator);
    result.records.push_back(std::move(record));
  }

  if (surrogate.fingerprint() != surrogate_before) {
    throw std::logic_error("surrogate weights changed during training");
  }
  result.generator = std::move(generator);
  result.prompt = std::move(prompt);
  return result;
}

TrainResult run_attack_only(const TrainerSetup& setup, TrainerOptions options,
                            GeneratorState generator, PromptTemplate prompt) {
  options.defense_enabled = false;
  return run(setup, options, std::move(generator), std::move(prompt));
}

std::vector<IterationRecord> read_iteration_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open iteration log " + path.string());
  std::vector<IterationRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(IterationRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mma
