#include "mma/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include <torch/torch.h>

#include "mma/candidates.hpp"
#include "mma/desk.hpp"
#include "mma/dual_encoder.hpp"
#include "mma/generator.hpp"
#include "mma/textual_defense.hpp"
#include "mma/tiny_encoder.hpp"

namespace mma {

namespace {

template <typename... Args>
std::string cat(const Args&... args) {
  std::ostringstream ss;
  ss.precision(17);
  (ss << ... << args);
  return ss.str();
}

struct Fixture {
  std::vector<std::string> classes{"circle", "square", "triangle", "cross", "ring"};
  TinyDualEncoder encoder;

  explicit Fixture(std::uint64_t seed) : encoder(desk_encoder_config(classes, 16), seed) {
    encoder.freeze();
  }
};

PromptTemplate random_prompt(std::mt19937_64& rng, std::size_t m) {
  const auto pool = prompt_word_pool();
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  PromptTemplate p;
  for (std::size_t i = 0; i < m; ++i) p.tokens.push_back(pool[pick(rng)]);
  return p;
}

CheckResult check_bound(const SelfCheckOptions& opt) {
  CheckResult r{"bound: epsilon compliance and idempotence", true, ""};
  std::mt19937_64 rng(opt.seed);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(opt.seed);
  std::uniform_int_distribution<std::int64_t> dim(1, 6);
  std::uniform_real_distribution<double> eps_dist(1e-4, 0.25);
  for (std::int64_t i = 0; i < opt.bound_cases && r.passed; ++i) {
    const auto dtype = i % 2 == 0 ? torch::kFloat32 : torch::kFloat64;
    const std::vector<std::int64_t> shape{dim(rng), 3, dim(rng), dim(rng)};
    auto clean = torch::rand(shape, gen, torch::TensorOptions().dtype(dtype));
    if (i % 7 == 0) clean = clean.round();  // pixels sitting on the [0, 1] walls
    const auto raw = torch::rand(shape, gen, torch::TensorOptions().dtype(dtype)) * 3.0 - 1.0;
    const double eps = eps_dist(rng);
    const auto once = bound(raw, clean, eps);
    const auto twice = bound(once, clean, eps);
    const double dist = linf_distance(once, clean);
    if (dist > eps) r = {r.name, false, cat("case ", i, ": distance ", dist, " > eps ", eps)};
    else if (once.min().item<double>() < 0 || once.max().item<double>() > 1)
      r = {r.name, false, cat("case ", i, ": pixel outside [0, 1]")};
    else if (!torch::equal(once, twice))
      r = {r.name, false, cat("case ", i, ": second projection changed the image")};
  }
  if (r.passed) r.detail = cat(opt.bound_cases, " random cases");
  return r;
}

CheckResult check_normalization(const Fixture& fx, std::uint64_t seed) {
  CheckResult r{"embedding normalization", true, ""};
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const auto images = torch::rand({8, 3, 16, 16}, gen);
  const auto img = normalize(fx.encoder.encode_image(images));
  const auto txt = normalize(
      fx.encoder.encode_text(build_class_texts(fx.classes, parse_prompt("a photo of a"))));
  for (const auto* e : {&img, &txt}) {
    const auto err =
        (e->values().to(torch::kFloat64).norm(2, -1) - 1.0).abs().max().item<double>();
    if (err > 1e-5) return {r.name, false, cat("row norm off by ", err)};
  }
  const auto self = cosine_sim(img, img);
  if ((self.to(torch::kFloat64) - 1.0).abs().max().item<double>() > 1e-5) {
    return {r.name, false, "cosine similarity of a row with itself is not 1"};
  }
  r.detail = "unit rows within 1e-5";
  return r;
}

CheckResult check_simplex_and_temperature(const Fixture& fx, std::uint64_t seed) {
  CheckResult r{"probability simplex and temperature-argmax invariance", true, ""};
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const auto images = torch::rand({16, 3, 16, 16}, gen);
  const auto img = normalize(fx.encoder.encode_image(images));
  const auto txt = normalize(
      fx.encoder.encode_text(build_class_texts(fx.classes, parse_prompt("a photo of a"))));
  torch::Tensor reference;
  for (double tau : {0.01, 0.1, 1.0, 10.0}) {
    const auto probs = zero_shot_probs(img, txt, tau).to(torch::kFloat64);
    if (probs.min().item<double>() < 0) return {r.name, false, cat("negative probability at tau ", tau)};
    const auto err = (probs.sum(-1) - 1.0).abs().max().item<double>();
    if (err > 1e-5) return {r.name, false, cat("rows sum off by ", err, " at tau ", tau)};
    const auto pred = predict_from_probs(zero_shot_logits(img, txt, tau));
    if (!reference.defined()) reference = pred;
    else if (!torch::equal(pred, reference))
      return {r.name, false, cat("argmax changed at tau ", tau)};
  }
  r.detail = "tau in {0.01, 0.1, 1, 10}";
  return r;
}

struct DefenseCase {
  PromptTemplate prompt;
  torch::Tensor images;
  std::vector<std::int64_t> labels;
  DefenseConfig cfg;
};

DefenseCase make_defense_case(const Fixture& fx, std::mt19937_64& rng, at::Generator& gen) {
  std::uniform_int_distribution<std::size_t> m(1, 6), k(1, 8), b(1, 8);
  std::uniform_int_distribution<std::int64_t> label(0, static_cast<std::int64_t>(fx.classes.size()) - 1);
  std::uniform_real_distribution<double> rho(0.0, 100.0);
  DefenseCase c;
  c.prompt = random_prompt(rng, m(rng));
  const auto batch = static_cast<std::int64_t>(b(rng));
  c.images = torch::rand({batch, 3, 16, 16}, gen);
  for (std::int64_t i = 0; i < batch; ++i) c.labels.push_back(label(rng));
  c.cfg.rho = rng() % 2 ? RhoPolicy{RhoPolicy::Kind::kPercentile, rho(rng)}
                        : RhoPolicy{RhoPolicy::Kind::kAbsolute, 0.0};
  c.cfg.k = k(rng);
  return c;
}

std::vector<CheckResult> check_defense(const Fixture& fx, const SelfCheckOptions& opt) {
  CheckResult saliency_check{"saliency nonnegativity", true, ""};
  CheckResult regression_check{"defense non-regression of mean p(y_true)", true, ""};
  CheckResult label_check{"label-token immutability under defend", true, ""};
  std::mt19937_64 rng(opt.seed + 17);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(opt.seed + 17);
  const auto provider = StaticSynonymProvider::from_pool(prompt_word_pool());
  const double tau = 0.05;
  for (std::int64_t i = 0; i < opt.defense_cases; ++i) {
    const auto c = make_defense_case(fx, rng, gen);
    const EncoderPromptProbabilities model(fx.encoder, c.images, fx.classes, tau);
    const auto y_prime = wrong_predictions(model.probs(c.prompt), c.labels);
    for (double s : saliency_scores(model, c.prompt, y_prime)) {
      if (!(s >= 0) && saliency_check.passed) {
        saliency_check = {saliency_check.name, false, cat("case ", i, ": score ", s)};
      }
    }
    const auto labels = torch::tensor(c.labels, torch::kInt64);
    const auto result =
        defend(c.prompt, fx.encoder, c.images, labels, fx.classes, tau, provider, c.cfg);
    const double before = mean_label_probability(model.probs(c.prompt), c.labels);
    const double after = mean_label_probability(model.probs(result.prompt), c.labels);
    if (after < before && regression_check.passed) {
      regression_check = {regression_check.name, false,
                          cat("case ", i, ": ", before, " -> ", after)};
    }
    if (result.prompt.size() != c.prompt.size() && label_check.passed) {
      label_check = {label_check.name, false, cat("case ", i, ": prompt length changed")};
    }
    const auto texts = build_class_texts(fx.classes, result.prompt);
    for (std::size_t cls = 0; cls < fx.classes.size(); ++cls) {
      if (texts[cls].tokens.front() != fx.classes[cls] && label_check.passed) {
        label_check = {label_check.name, false, cat("case ", i, ": label of class ", cls, " changed")};
      }
    }
    for (const auto& w : result.prompt.tokens) {
      if (std::find(fx.classes.begin(), fx.classes.end(), w) != fx.classes.end() &&
          label_check.passed) {
        label_check = {label_check.name, false, cat("case ", i, ": class word '", w, "' entered the prompt")};
      }
    }
  }
  for (auto* r : {&saliency_check, &regression_check, &label_check}) {
    if (r->passed) r->detail = cat(opt.defense_cases, " random defense instances");
  }
  return {saliency_check, regression_check, label_check};
}

}  // namespace

std::vector<CheckResult> run_invariant_suite(const SelfCheckOptions& options) {
  torch::NoGradGuard no_grad;
  const Fixture fx(options.seed);
  std::vector<CheckResult> out;
  out.push_back(check_bound(options));
  out.push_back(check_normalization(fx, options.seed + 1));
  out.push_back(check_simplex_and_temperature(fx, options.seed + 2));
  for (auto& r : check_defense(fx, options)) out.push_back(std::move(r));
  return out;
}

bool report_checks(const std::vector<CheckResult>& results, std::ostream& out) {
  bool ok = true;
  for (const auto& r : results) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name;
    if (!r.detail.empty()) out << " (" << r.detail << ")";
    out << '\n';
    ok = ok && r.passed;
  }
  return ok;
}

}  // namespace mma
