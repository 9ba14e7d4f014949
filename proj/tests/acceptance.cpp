// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   mma_acceptance [--work DIR] [--keep]
//
// Criteria 6 and 7 build the desk-scale workspace (dataset, surrogate,
// targets) under DIR and drive the same `train` / `attack-only` commands a
// user would run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "mma/cli.hpp"
#include "mma/desk.hpp"
#include "mma/eval_harness.hpp"
#include "mma/generator.hpp"
#include "mma/mutual_trainer.hpp"
#include "mma/prompt.hpp"
#include "mma/selfcheck.hpp"
#include "mma/textual_defense.hpp"
#include "mma/tiny_encoder.hpp"
#include "mma/visual_attack.hpp"

namespace fs = std::filesystem;
using namespace mma;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- 1

Outcome group_overall_fixture() {
  const auto groups =
      GroupMap::parse("clip:clip; resnet:r18,r34,r50; vgg:v16,v19; light:shuffle,mobile; vit:vit");
  auto row = [](std::vector<double> v) {
    const std::vector<std::string> names{"clip", "r18", "r34", "r50", "v16",
                                         "v19",  "shuffle", "mobile", "vit"};
    std::map<std::string, double> m;
    for (std::size_t i = 0; i < names.size(); ++i) m[names[i]] = v[i];
    return m;
  };
  const double ours = group_overall(row({7.2, 38.5, 40.2, 41.8, 64.5, 38.9, 45.2, 20.0, 20.6}), groups);
  const double uan = group_overall(row({64.2, 19.6, 23.9, 13.4, 71.7, 38.7, 58.2, 15.3, 31.7}), groups);
  const bool ok = std::abs(ours - 30.5) <= 0.05 && std::abs(uan - 41.4) <= 0.05;
  return {ok, "Ours-Clip " + fmt(ours) + " (published 30.5), UAN-Res " + fmt(uan) + " (published 41.4), tol 0.05"};
}

// ---------------------------------------------------------------- 2

Outcome loss_identities() {
  auto unit = [](std::vector<std::vector<double>> rows) {
    std::vector<torch::Tensor> t;
    for (auto& r : rows) t.push_back(torch::tensor(r, torch::kFloat64));
    return normalize(RawEmbedding(torch::stack(t)));
  };
  const double cls = cls_loss(torch::tensor({{1.0, 0.0, 0.0}}, torch::kFloat64),
                              torch::tensor(std::vector<std::int64_t>{0}), ClsConfig{0.1})
                         .item<double>();
  const auto a = unit({{1, 0, 0}, {0, 0, 1}});
  const auto b = unit({{0, 1, 0}, {1, 0, 0}});
  const auto neg = unit({{-1, 0, 0}, {0, 0, -1}});
  const double ortho = feat_loss(a, b).item<double>();
  const double anti = feat_loss(a, neg).item<double>();
  const double tri = triplet_loss(a, a, neg, TripletConfig{1.0}).item<double>();
  const bool ok = std::abs(cls - 10.0) <= 1e-6 && std::abs(ortho + 2.0) <= 1e-6 &&
                  std::abs(anti + 4.0) <= 1e-6 && std::abs(tri) <= 1e-6;
  return {ok, "cls(CE=0) " + fmt(cls, 9) + ", feat orthonormal " + fmt(ortho, 9) + ", antipodal " +
                  fmt(anti, 9) + ", triplet zero case " + fmt(tri, 9)};
}

// ---------------------------------------------------------------- 3

Outcome invariant_suite() {
  const auto results = run_invariant_suite();
  std::size_t failed = 0;
  std::string first;
  for (const auto& r : results) {
    if (!r.passed) {
      ++failed;
      if (first.empty()) first = r.name + ": " + r.detail;
    }
  }
  return {failed == 0 && !results.empty(),
          std::to_string(results.size() - failed) + "/" + std::to_string(results.size()) +
              " checks" + (first.empty() ? "" : ", first failure " + first)};
}

// ---------------------------------------------------------------- 4

TinyDualEncoder tiny_f64(const std::vector<std::string>& classes, std::int64_t size, std::uint64_t seed) {
  auto cfg = desk_encoder_config(classes, size);
  TinyDualEncoder enc(cfg, seed);
  enc.freeze();
  return enc.to(torch::kFloat64);
}

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

Outcome gradient_checks() {
  torch::manual_seed(21);
  const std::vector<std::string> classes{"circle", "square", "triangle", "cross", "ring"};
  const auto surrogate = tiny_f64(classes, 16, 4);
  const auto texts = normalize(surrogate.encode_text(build_class_texts(classes, parse_prompt("a photo of a"))));
  const auto clean = torch::rand({4, 3, 16, 16}, torch::kFloat64) * 0.8 + 0.1;
  const auto labels = torch::tensor(std::vector<std::int64_t>{0, 1, 2, 3});
  const AttackConfig cfg;
  const double h = 1e-6;

  // Attack loss with respect to the adversarial image.
  const auto adv0 = (clean + (torch::rand_like(clean) * 2 - 1) * 0.04).detach();
  auto loss_at = [&](const torch::Tensor& adv) {
    return attack_losses(surrogate, clean, adv, labels, texts, 0.1, cfg).total.item<double>();
  };
  auto adv = adv0.clone().requires_grad_(true);
  attack_losses(surrogate, clean, adv, labels, texts, 0.1, cfg).total.backward();
  const auto grad = adv.grad();
  double worst_image = 0;
  std::mt19937_64 rng(5);
  for (int probe = 0; probe < 10; ++probe) {
    const auto i = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(adv0.numel()));
    auto plus = adv0.clone(), minus = adv0.clone();
    plus.view(-1)[i] += h;
    minus.view(-1)[i] -= h;
    const double numeric = (loss_at(plus) - loss_at(minus)) / (2 * h);
    worst_image = std::max(worst_image, rel_error(grad.view(-1)[i].item<double>(), numeric));
  }

  // Bounded generator output with respect to its parameters.
  GeneratorConfig gcfg;
  gcfg.channels = 8;
  gcfg.blocks = 1;
  auto state = GeneratorState::create(gcfg, 0.04, 8);
  state.net->to(torch::kFloat64);
  const auto images = torch::rand({2, 3, 16, 16}, torch::kFloat64);
  const auto weights = torch::randn({2, 3, 16, 16}, torch::kFloat64);
  // Which branch of the projection/clamp each pixel takes.
  auto regime = [&] {
    torch::NoGradGuard no_grad;
    const auto raw = generate_raw(state, images);
    const auto lo = (images - state.epsilon).clamp_min(0.0);
    const auto hi = (images + state.epsilon).clamp_max(1.0);
    return (raw < lo).to(torch::kInt8) - (raw > hi).to(torch::kInt8);
  };
  auto objective = [&] {
    torch::NoGradGuard no_grad;
    return (forward(state, images) * weights).sum().item<double>();
  };
  state.net->zero_grad();
  (forward(state, images) * weights).sum().backward();
  std::vector<torch::Tensor> params;
  for (auto& p : state.net->parameters()) params.push_back(p);
  double worst_param = 0;
  int probes = 0, skipped = 0;
  while (probes < 10 && skipped < 200) {
    auto& p = params[rng() % params.size()];
    const auto i = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(p.numel()));
    const double analytic = p.grad().view(-1)[i].item<double>();
    torch::NoGradGuard no_grad;
    const auto base_regime = regime();
    const double original = p.view(-1)[i].item<double>();
    p.view(-1)[i] = original + h;
    const bool same_plus = torch::equal(regime(), base_regime);
    const double f_plus = objective();
    p.view(-1)[i] = original - h;
    const bool same_minus = torch::equal(regime(), base_regime);
    const double f_minus = objective();
    p.view(-1)[i] = original;
    if (!same_plus || !same_minus) {
      ++skipped;  // a pixel crossed a clamp boundary inside the stencil
      continue;
    }
    worst_param = std::max(worst_param, rel_error(analytic, (f_plus - f_minus) / (2 * h)));
    ++probes;
  }
  const bool ok = worst_image < 1e-3 && worst_param < 1e-3 && probes == 10;
  return {ok, "max rel err: attack loss vs image " + fmt(worst_image, 8) + ", forward vs generator params " +
                  fmt(worst_param, 8) + " (" + std::to_string(probes) + " probes, " +
                  std::to_string(skipped) + " boundary skips)"};
}

// ---------------------------------------------------------------- 5

// Probabilities that are multiples of 1/16, so batch means are exact and
// ties between candidates are frequent.
class DyadicModel final : public PromptProbabilities {
 public:
  DyadicModel(std::int64_t batch, std::int64_t classes, std::uint64_t seed)
      : batch_(batch), classes_(classes), seed_(seed) {}
  torch::Tensor probs(const PromptTemplate& prompt) const override {
    std::mt19937_64 rng(std::hash<std::string>{}(to_string(prompt)) ^ seed_);
    auto p = torch::zeros({batch_, classes_}, torch::kFloat64);
    for (std::int64_t b = 0; b < batch_; ++b) {
      for (int unit = 0; unit < 16; ++unit) {
        const auto c = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(classes_));
        p[b][c] += 1.0 / 16;
      }
    }
    return p;
  }

 private:
  std::int64_t batch_, classes_;
  std::uint64_t seed_;
};

double oracle_mean(const torch::Tensor& probs, const std::vector<std::int64_t>& y) {
  double s = 0;
  for (std::size_t b = 0; b < y.size(); ++b) s += probs[static_cast<std::int64_t>(b)][y[b]].item<double>();
  return s / static_cast<double>(y.size());
}

// Exhaustive argmax of the replacement objective with the documented tie rule.
std::string oracle_replace(std::size_t n, const PromptProbabilities& m, const PromptTemplate& p,
                           const std::vector<std::int64_t>& y, const std::vector<std::string>& cands) {
  const double base = oracle_mean(m.probs(masked_prompt(p, n)), y);
  std::vector<double> gain;
  for (const auto& w : cands) gain.push_back(oracle_mean(m.probs(with_token(p, n, w)), y) - base);
  const double best = *std::max_element(gain.begin(), gain.end());
  std::vector<std::string> tied;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (gain[i] == best) tied.push_back(cands[i]);
  }
  const auto& original = p.tokens[n - 1];
  if (std::find(tied.begin(), tied.end(), original) != tied.end()) return original;
  return *std::min_element(tied.begin(), tied.end());
}

PromptTemplate oracle_defend(const PromptTemplate& prompt, const PromptProbabilities& m,
                             const std::vector<std::int64_t>& y, const std::vector<std::string>& pool,
                             std::size_t k, double rho_percentile) {
  const auto base = m.probs(prompt);
  std::vector<std::int64_t> y_prime(y.size());
  for (std::size_t b = 0; b < y.size(); ++b) {
    const auto row = base[static_cast<std::int64_t>(b)];
    std::int64_t arg = 0;
    for (std::int64_t c = 1; c < row.size(0); ++c) {
      if (row[c].item<double>() > row[arg].item<double>()) arg = c;
    }
    y_prime[b] = arg == y[b] ? -1 : arg;
  }
  std::vector<double> scores;
  for (std::size_t n = 1; n <= prompt.size(); ++n) {
    const auto masked = m.probs(masked_prompt(prompt, n));
    double s = 0;
    for (std::size_t b = 0; b < y.size(); ++b) {
      if (y_prime[b] < 0) continue;
      const auto bi = static_cast<std::int64_t>(b);
      s += std::max(base[bi][y_prime[b]].item<double>() - masked[bi][y_prime[b]].item<double>(), 0.0);
    }
    scores.push_back(s / static_cast<double>(y.size()));
  }
  auto sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  const double pos = rho_percentile / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double rho = std::max(sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]), 0.0);

  auto out = prompt;
  for (std::size_t n = 1; n <= prompt.size(); ++n) {
    if (!(scores[n - 1] > rho)) continue;
    // Candidates: the current word, then the first k other pool words in pool order.
    std::vector<std::string> cands{out.tokens[n - 1]};
    for (const auto& w : pool) {
      if (cands.size() > k) break;
      if (std::find(cands.begin(), cands.end(), w) == cands.end()) cands.push_back(w);
    }
    out.tokens[n - 1] = oracle_replace(n, m, out, y, cands);
  }
  return out;
}

Outcome prompt_update_oracle() {
  std::vector<std::string> pool = prompt_word_pool();
  pool.resize(std::min<std::size_t>(pool.size(), 20));
  const auto provider = StaticSynonymProvider::from_pool(pool);
  const std::vector<std::string> classes{"circle", "square", "triangle", "cross"};
  std::mt19937_64 rng(77);
  int replace_ok = 0, defend_ok = 0, changed = 0, ties = 0;
  const int instances = 50;
  for (int inst = 0; inst < instances; ++inst) {
    const auto batch = static_cast<std::int64_t>(1 + rng() % 8);
    const std::size_t m = 1 + rng() % 6;
    PromptTemplate prompt;
    for (std::size_t i = 0; i < m; ++i) prompt.tokens.push_back(pool[rng() % pool.size()]);
    std::vector<std::int64_t> y(static_cast<std::size_t>(batch));
    for (auto& v : y) v = static_cast<std::int64_t>(rng() % classes.size());

    std::unique_ptr<PromptProbabilities> model;
    std::optional<TinyDualEncoder> encoder;
    if (inst % 2 == 0) {
      model = std::make_unique<DyadicModel>(batch, static_cast<std::int64_t>(classes.size()), rng());
    } else {
      encoder.emplace(desk_encoder_config(classes, 8), rng() % 1000);
      encoder->freeze();
      torch::manual_seed(static_cast<std::uint64_t>(inst));
      model = std::make_unique<EncoderPromptProbabilities>(*encoder, torch::rand({batch, 3, 8, 8}),
                                                           classes, 0.05);
    }

    // replace_token over the full candidate set.
    const std::size_t n = 1 + rng() % m;
    const auto cands = candidates(provider, prompt, n, pool.size());
    const auto got = replace_token(n, *model, prompt, y, cands);
    const auto want = oracle_replace(n, *model, prompt, y, cands.words);
    replace_ok += got == want;
    {
      const double base = oracle_mean(model->probs(masked_prompt(prompt, n)), y);
      std::map<double, int> seen;
      for (const auto& w : cands.words) ++seen[oracle_mean(model->probs(with_token(prompt, n, w)), y) - base];
      ties += seen.rbegin()->second > 1;
    }

    DefenseConfig cfg;
    cfg.k = pool.size();
    const auto result = defend(prompt, *model, y, provider, cfg);
    const auto expected = oracle_defend(prompt, *model, y, pool, cfg.k, cfg.rho.value);
    defend_ok += result.prompt == expected;
    changed += result.prompt != prompt;
  }
  const bool ok = replace_ok == instances && defend_ok == instances;
  return {ok, "replace_token " + std::to_string(replace_ok) + "/50, defend " + std::to_string(defend_ok) +
                  "/50 exact; " + std::to_string(ties) + " instances with tied maxima, " +
                  std::to_string(changed) + " prompts changed"};
}

// ---------------------------------------------------------------- 6, 7

struct RunOutput {
  int code = 0;
  std::vector<IterationRecord> records;
};

RunOutput cli_run(const std::string& command, const fs::path& config, int seed, const fs::path& out) {
  fs::remove_all(out);
  const std::string seed_text = std::to_string(seed), out_text = out.string(), cfg_text = config.string();
  const char* argv[] = {"mma", command.c_str(), "--config", cfg_text.c_str(), "--seed", seed_text.c_str(),
                        "--output", out_text.c_str()};
  std::ostringstream sink;
  RunOutput r;
  r.code = run_cli(8, argv, sink, std::cerr);
  if (r.code == 0) r.records = read_iteration_log(out / "iterations.jsonl");
  return r;
}

struct DeskResults {
  bool ready = false;
  std::string error;
  fs::path config;
  std::map<std::pair<std::string, int>, RunOutput> runs;
};

DeskResults run_desk(const fs::path& work) {
  DeskResults d;
  fs::create_directories(work);
  std::ostringstream log;
  d.config = prepare_desk(work / "desk", DeskConfig{}, log);
  std::cout << log.str();
  for (int seed : {1, 2, 3}) {
    for (const std::string arm : {"train", "attack-only"}) {
      const auto t0 = std::chrono::steady_clock::now();
      auto r = cli_run(arm, d.config, seed, work / (arm + "_" + std::to_string(seed)));
      const auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cout << "  " << arm << " seed " << seed << ": exit " << r.code << ", " << fmt(secs, 1) << " s\n";
      if (r.code != 0 || r.records.size() != 10) {
        d.error = arm + " seed " + std::to_string(seed) + " did not finish 10 iterations";
        return d;
      }
      d.runs[{arm, seed}] = std::move(r);
    }
  }
  d.ready = true;
  return d;
}

Outcome desk_end_to_end(const DeskResults& d) {
  if (!d.ready) return {false, d.error};
  bool drop_ok = true;
  int wins = 0;
  std::ostringstream os;
  os << "surrogate drop (initial prompt)";
  for (int seed : {1, 2, 3}) {
    const auto& last = d.runs.at({"train", seed}).records.back();
    const double drop = 1.0 - last.surrogate_adv_acc_initial / last.surrogate_clean_acc_initial;
    drop_ok = drop_ok && drop >= 0.5;
    os << " s" << seed << " " << fmt(last.surrogate_clean_acc_initial, 3) << "->"
       << fmt(last.surrogate_adv_acc_initial, 3) << " (" << fmt(100 * drop, 1) << "%)";
  }
  os << "; held-out resnet adv acc iterative vs attack-only";
  for (int seed : {1, 2, 3}) {
    const double iter = d.runs.at({"train", seed}).records.back().target_adv_acc.value_or(1.0);
    const double base = d.runs.at({"attack-only", seed}).records.back().target_adv_acc.value_or(0.0);
    wins += iter <= base;
    os << " s" << seed << " " << fmt(iter, 4) << " vs " << fmt(base, 4);
  }
  os << " -> " << wins << "/3 (need 2)";
  return {drop_ok && wins >= 2, os.str()};
}

Outcome reproducibility(const DeskResults& d, const fs::path& work) {
  if (!d.ready) return {false, d.error};
  const auto first = work / "train_1";
  const auto again = work / "train_1_repeat";
  const auto r = cli_run("train", d.config, 1, again);
  if (r.code != 0) return {false, "repeat run failed with exit " + std::to_string(r.code)};
  bool logs_equal = true;
  for (const auto* f : {"iterations.jsonl", "train_log.jsonl", "prompt_history.jsonl", "prompt.txt"}) {
    logs_equal = logs_equal && read_file(first / f) == read_file(again / f) && !read_file(first / f).empty();
  }
  const auto a = load_generator(first / "generator.bin");
  const auto b = load_generator(again / "generator.bin");
  torch::manual_seed(123);
  const auto probe = torch::rand({8, 3, 32, 32});
  const bool outputs_equal = torch::equal(forward(a, probe), forward(b, probe));
  const bool bytes_equal = read_file(first / "generator.bin") == read_file(again / "generator.bin");
  return {logs_equal && outputs_equal,
          std::string("iteration/step/prompt logs ") + (logs_equal ? "byte-identical" : "DIFFER") +
              ", probe outputs " + (outputs_equal ? "identical" : "DIFFER") + ", checkpoint bytes " +
              (bytes_equal ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria", "mma_acceptance"};
  std::string work = (fs::temp_directory_path() / "mma-acceptance").string();
  bool keep = false;
  app.add_option("--work", work, "scratch directory for the desk-scale runs");
  app.add_flag("--keep", keep, "leave the scratch directory in place");
  CLI11_PARSE(app, argc, argv);
  torch::set_num_threads(1);

  std::vector<std::pair<std::string, std::function<Outcome()>>> criteria;
  criteria.emplace_back("group overall fixture", group_overall_fixture);
  criteria.emplace_back("loss identities", loss_identities);
  criteria.emplace_back("invariant suite", invariant_suite);
  criteria.emplace_back("gradient checks", gradient_checks);
  criteria.emplace_back("prompt-update oracle", prompt_update_oracle);

  std::vector<std::string> lines;
  bool all = true;
  auto record = [&](std::size_t index, const std::string& name, const Outcome& o, double secs) {
    std::ostringstream os;
    os << "criterion " << index << " " << (o.passed ? "PASS" : "FAIL") << " " << name << ": " << o.detail
       << " [" << fmt(secs, 1) << " s]";
    lines.push_back(os.str());
    std::cout << os.str() << std::endl;
    all = all && o.passed;
  };
  auto timed = [](const std::function<Outcome()>& f) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    return std::pair{o, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
  };

  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto [o, secs] = timed(criteria[i].second);
    record(i + 1, criteria[i].first, o, secs);
  }

  DeskResults desk;
  const auto [o6, s6] = timed([&] {
    try {
      desk = run_desk(work);
    } catch (const std::exception& e) {
      desk.error = std::string("desk setup failed: ") + e.what();
    }
    return desk_end_to_end(desk);
  });
  record(6, "desk-scale end-to-end", o6, s6);
  const auto [o7, s7] = timed([&] { return reproducibility(desk, work); });
  record(7, "reproducibility", o7, s7);

  std::cout << "\nsummary\n";
  for (const auto& l : lines) std::cout << l.substr(0, l.find(':')) << '\n';
  if (!keep) {
    std::error_code ec;
    fs::remove_all(work, ec);
  }
  return all ? 0 : 1;
}
