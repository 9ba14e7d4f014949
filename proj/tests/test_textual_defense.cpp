#include "doctest_torch.hpp"

#include <algorithm>
#include <map>
#include <random>

#include <json.hpp>
#include <torch/script.h>

#include "mma/errors.hpp"
#include "mma/textual_defense.hpp"
#include "test_util.hpp"

using namespace mma;

namespace {

// Probabilities looked up by the prompt's text; unknown prompts fall back.
class TableModel final : public PromptProbabilities {
 public:
  TableModel(std::map<std::string, torch::Tensor> table, torch::Tensor fallback)
      : table_(std::move(table)), fallback_(std::move(fallback)) {}
  torch::Tensor probs(const PromptTemplate& prompt) const override {
    ++calls;
    auto it = table_.find(to_string(prompt));
    return it == table_.end() ? fallback_ : it->second;
  }
  mutable int calls = 0;

 private:
  std::map<std::string, torch::Tensor> table_;
  torch::Tensor fallback_;
};

// Deterministic pseudo-random probabilities per prompt, quantized so that
// ties between candidates actually happen.
class HashedModel final : public PromptProbabilities {
 public:
  HashedModel(std::int64_t batch, std::int64_t classes, std::uint64_t seed, int levels)
      : batch_(batch), classes_(classes), seed_(seed), levels_(levels) {}
  torch::Tensor probs(const PromptTemplate& prompt) const override {
    const auto h = std::hash<std::string>{}(to_string(prompt)) ^ seed_;
    std::mt19937_64 rng(h);
    std::uniform_int_distribution<int> level(1, levels_);
    auto p = torch::empty({batch_, classes_}, torch::kFloat64);
    for (std::int64_t b = 0; b < batch_; ++b) {
      for (std::int64_t c = 0; c < classes_; ++c) p[b][c] = static_cast<double>(level(rng));
    }
    return p / p.sum(-1, true);
  }

 private:
  std::int64_t batch_, classes_;
  std::uint64_t seed_;
  int levels_;
};

torch::Tensor rows(std::vector<std::vector<double>> r) {
  std::vector<torch::Tensor> t;
  for (auto& v : r) t.push_back(torch::tensor(v, torch::kFloat64));
  return torch::stack(t);
}

double mean_true(const PromptProbabilities& m, const PromptTemplate& p,
                 const std::vector<std::int64_t>& y) {
  const auto probs = m.probs(p);
  double s = 0;
  for (std::size_t b = 0; b < y.size(); ++b) s += probs[b][y[b]].item<double>();
  return s / static_cast<double>(y.size());
}

// Independent argmax of the replacement objective over every candidate.
std::string brute_force_choice(std::size_t n, const PromptProbabilities& m, const PromptTemplate& p,
                               const std::vector<std::int64_t>& y, const CandidateSet& cands) {
  const double base = mean_true(m, masked_prompt(p, n), y);
  const auto& original = p.tokens[n - 1];
  double best = -1e300;
  for (const auto& w : cands.words) best = std::max(best, mean_true(m, with_token(p, n, w), y) - base);
  std::vector<std::string> tied;
  for (const auto& w : cands.words) {
    if (mean_true(m, with_token(p, n, w), y) - base == best) tied.push_back(w);
  }
  if (std::find(tied.begin(), tied.end(), original) != tied.end()) return original;
  return *std::min_element(tied.begin(), tied.end());
}

std::vector<std::string> pool20() {
  return {"a",    "an",    "the",   "photo", "picture", "image", "of",    "clean",  "small", "big",
          "blurry", "good", "bad",  "close", "cropped", "dark",  "bright", "nice", "weird", "plain"};
}

}  // namespace

TEST_CASE("prompt assembly and masking") {
  const auto p = parse_prompt("a photo");
  const auto t = build_text_input("horse", p);
  const auto [cls, back] = parse_text_input(t);
  CHECK(cls == "horse");
  CHECK(back == p);
  CHECK_THROWS_AS(build_text_input("", p), ConfigurationError);

  const auto m = masked_prompt(p, 1);
  CHECK(m.tokens == std::vector<std::string>{std::string(kMaskToken), "photo"});
  CHECK(with_token(m, 1, "a") == p);
  CHECK(masked_prompt(p, 1) != masked_prompt(p, 2));
  CHECK_THROWS_AS(masked_prompt(p, 0), InputContractError);
  CHECK_THROWS_AS(masked_prompt(p, 3), InputContractError);
}

TEST_CASE("saliency examples") {
  const auto p = parse_prompt("a photo");
  const std::vector<std::int64_t> y_prime{1, 1};
  const auto base = rows({{0.2, 0.8}, {0.2, 0.8}});

  SUBCASE("masking changes nothing") {
    TableModel m({}, base);
    CHECK(saliency(1, m, p, y_prime) == 0.0);
  }
  SUBCASE("drop from 0.8 to 0.5 on every sample") {
    TableModel m({{to_string(masked_prompt(p, 1)), rows({{0.5, 0.5}, {0.5, 0.5}})}}, base);
    CHECK(saliency(1, m, p, y_prime) == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(saliency(2, m, p, y_prime) == 0.0);
  }
  SUBCASE("rise is clipped to zero") {
    TableModel m({{to_string(masked_prompt(p, 2)), rows({{0.1, 0.9}, {0.1, 0.9}})}}, base);
    CHECK(saliency(2, m, p, y_prime) == 0.0);
  }
  SUBCASE("samples that are not fooled count as zero in the mean") {
    TableModel m({{to_string(masked_prompt(p, 1)), rows({{0.5, 0.5}, {0.5, 0.5}})}}, base);
    const std::vector<std::int64_t> one{1, kNotFooled};
    CHECK(saliency(1, m, p, one) == doctest::Approx(0.15).epsilon(1e-12));
  }
}

TEST_CASE("saliency scores are nonnegative") {
  const auto p = parse_prompt("a clean photo of a");
  for (std::uint64_t s = 0; s < 30; ++s) {
    HashedModel m(6, 4, s, 50);
    const auto y_prime = wrong_predictions(m.probs(p), std::vector<std::int64_t>{0, 1, 2, 3, 0, 1});
    for (double v : saliency_scores(m, p, y_prime)) CHECK(v >= 0.0);
  }
}

TEST_CASE("wrong predictions") {
  const auto probs = rows({{0.7, 0.3}, {0.4, 0.6}, {0.5, 0.5}});
  const std::vector<std::int64_t> y{0, 0, 1};
  CHECK(wrong_predictions(probs, y) == std::vector<std::int64_t>{kNotFooled, 1, 0});
}

TEST_CASE("update set selection") {
  const std::vector<double> scores{0.4, 0.0, 0.2};
  CHECK(select_update_set(scores, 0.1) == std::vector<std::size_t>{1, 3});
  CHECK(select_update_set(scores, 0.5).empty());
  const std::vector<double> zeros{0, 0, 0};
  CHECK(select_update_set(zeros, 0.0).empty());
}

TEST_CASE("percentile and rho policy") {
  const std::vector<double> v{4, 1, 3, 2};
  CHECK(percentile(v, 0) == 1.0);
  CHECK(percentile(v, 100) == 4.0);
  CHECK(percentile(v, 50) == doctest::Approx(2.5));
  // rank = 0.6 * 3 = 1.8 between 2 and 3
  CHECK(percentile(v, 60) == doctest::Approx(2.8));
  CHECK_THROWS(percentile(std::vector<double>{}, 50));

  RhoPolicy rho;
  CHECK(rho.threshold(v) == doctest::Approx(2.8));
  rho.kind = RhoPolicy::Kind::kAbsolute;
  rho.value = 0.25;
  CHECK(rho.threshold(v) == 0.25);
  rho.value = -1;
  CHECK_THROWS_AS(rho.validate(), ConfigurationError);
}

TEST_CASE("candidate sets from the static provider") {
  const auto provider = StaticSynonymProvider::from_pool({"a", "an", "the", "one"});
  const auto p = parse_prompt("a photo");
  const auto one = candidates(provider, p, 1, 1);
  CHECK(one.words == std::vector<std::string>{"a", "an"});
  const auto all = candidates(provider, p, 1, 10);
  CHECK(all.words.front() == "a");
  CHECK(all.words.size() == 4);
  CHECK(candidates(provider, p, 1, 3).words == candidates(provider, p, 1, 3).words);
  // A word outside the table still yields its own candidate set.
  CHECK(candidates(provider, p, 2, 5).words == std::vector<std::string>{"photo"});
}

TEST_CASE("static provider file format") {
  mma::testing::TempDir dir;
  mma::testing::write_file(dir / "syn.txt", "# synonyms\nphoto: picture image\n\na: an the\n");
  const auto provider = StaticSynonymProvider::load(dir / "syn.txt");
  CHECK(provider.fill_ins(parse_prompt("a photo"), 2, 5) == std::vector<std::string>{"picture", "image"});
  CHECK(provider.fill_ins(parse_prompt("a photo"), 1, 1) == std::vector<std::string>{"an"});
  CHECK_THROWS(StaticSynonymProvider::load(dir / "missing.txt"));

  const auto narrowed = provider.restricted_to([](const std::string& w) { return w != "picture"; });
  CHECK(narrowed.fill_ins(parse_prompt("a photo"), 2, 5) == std::vector<std::string>{"image"});
  CHECK(provider.fill_ins(parse_prompt("a photo"), 2, 5).size() == 2);
}

TEST_CASE("replace_token examples") {
  const auto p = parse_prompt("a photo");
  const std::vector<std::int64_t> y{0, 0};
  const auto low = rows({{0.2, 0.8}, {0.2, 0.8}});

  CHECK(replace_token(1, TableModel({}, low), p, y, CandidateSet{{"a"}}) == "a");
  CHECK_THROWS_AS(replace_token(1, TableModel({}, low), p, y, CandidateSet{}), ConfigurationError);

  const auto high = rows({{0.9, 0.1}, {0.7, 0.3}});
  TableModel better({{"the photo", high}}, low);
  CHECK(replace_token(1, better, p, y, CandidateSet{{"a", "the", "an"}}) == "the");

  TableModel original_best({{"a photo", high}}, low);
  CHECK(replace_token(1, original_best, p, y, CandidateSet{{"a", "the", "an"}}) == "a");

  // Two non-original words tie: lexicographic order decides.
  TableModel tie({{"the photo", high}, {"an photo", high}}, low);
  CHECK(replace_token(1, tie, p, y, CandidateSet{{"a", "the", "an"}}) == "an");
  // The original tying with the best keeps the original.
  TableModel tie_orig({{"the photo", high}, {"a photo", high}}, low);
  CHECK(replace_token(1, tie_orig, p, y, CandidateSet{{"a", "the", "an"}}) == "a");
}

TEST_CASE("replace_token matches brute force on a 20-word vocabulary") {
  const auto provider = StaticSynonymProvider::from_pool(pool20());
  std::mt19937_64 rng(99);
  for (int inst = 0; inst < 60; ++inst) {
    const std::int64_t batch = 1 + static_cast<std::int64_t>(rng() % 8);
    const std::int64_t classes = 2 + static_cast<std::int64_t>(rng() % 4);
    HashedModel m(batch, classes, rng(), inst % 2 ? 3 : 1000);
    std::vector<std::int64_t> y(batch);
    for (auto& v : y) v = static_cast<std::int64_t>(rng() % classes);
    std::vector<std::string> words;
    const std::size_t len = 1 + rng() % 5;
    for (std::size_t i = 0; i < len; ++i) words.push_back(pool20()[rng() % 20]);
    const PromptTemplate p{words};
    const std::size_t n = 1 + rng() % len;
    const auto cands = candidates(provider, p, n, 1 + rng() % 19);
    CHECK(replace_token(n, m, p, y, cands) == brute_force_choice(n, m, p, y, cands));
  }
}

TEST_CASE("defend") {
  const auto provider = StaticSynonymProvider::from_pool(pool20());
  const auto p = parse_prompt("a clean photo of a");

  SUBCASE("empty update set leaves the prompt unchanged") {
    HashedModel m(4, 3, 5, 100);
    DefenseConfig cfg;
    cfg.rho = {RhoPolicy::Kind::kAbsolute, 10.0};
    const auto r = defend(p, m, std::vector<std::int64_t>{0, 1, 2, 0}, provider, cfg);
    CHECK(r.prompt == p);
    CHECK(r.saliency.update_set.empty());
    CHECK(r.replacements.empty());
  }
  SUBCASE("only update-set positions change, and p(y_true) never drops") {
    for (std::uint64_t s = 0; s < 40; ++s) {
      HashedModel m(6, 3, s, 20);
      const std::vector<std::int64_t> y{0, 1, 2, 0, 1, 2};
      DefenseConfig cfg;
      cfg.k = 6;
      const auto r = defend(p, m, y, provider, cfg);
      CHECK(r.prompt.size() == p.size());
      for (std::size_t i = 1; i <= p.size(); ++i) {
        const bool selected = std::find(r.saliency.update_set.begin(), r.saliency.update_set.end(),
                                        i) != r.saliency.update_set.end();
        if (!selected) CHECK(r.prompt.tokens[i - 1] == p.tokens[i - 1]);
      }
      CHECK(r.true_prob_after >= r.true_prob_before - 1e-6);
      CHECK(mean_true(m, r.prompt, y) >= mean_true(m, p, y) - 1e-6);
      CHECK(r.saliency.scores.size() == p.size());
    }
  }
  SUBCASE("update set of size two") {
    // Masking words 2 and 4 lowers the wrong-label probability; the best
    // candidates there restore the true label.
    const auto base = rows({{0.3, 0.7}});
    const auto masked = rows({{0.6, 0.4}});
    std::map<std::string, torch::Tensor> t{{to_string(masked_prompt(p, 2)), masked},
                                           {to_string(masked_prompt(p, 4)), masked},
                                           {"a nice photo of a", rows({{0.8, 0.2}})},
                                           {"a nice photo bright a", rows({{0.9, 0.1}})}};
    TableModel m(t, base);
    DefenseConfig cfg;
    cfg.rho = {RhoPolicy::Kind::kAbsolute, 0.1};
    cfg.k = 19;
    const auto r = defend(p, m, std::vector<std::int64_t>{0}, provider, cfg);
    CHECK(r.saliency.update_set == std::vector<std::size_t>{2, 4});
    CHECK(to_string(r.prompt) == "a nice photo bright a");
    CHECK(r.true_prob_after == doctest::Approx(0.9));
  }
}

TEST_CASE("defend with the tiny encoder never lowers the true-label probability") {
  auto enc = mma::testing::tiny_encoder(8, 11);
  const auto provider = StaticSynonymProvider::from_pool(prompt_word_pool());
  for (int s = 0; s < 5; ++s) {
    torch::manual_seed(s);
    const auto images = torch::rand({5, 3, 8, 8});
    const auto labels = torch::randint(0, 4, {5}, torch::kInt64);
    const auto r = defend(parse_prompt("a photo of a"), enc, images, labels,
                          mma::testing::shape_classes(), 0.05, provider, DefenseConfig{});
    CHECK(r.true_prob_after >= r.true_prob_before - 1e-6);
  }
}

TEST_CASE("language-model provider") {
  mma::testing::TempDir dir;
  // Next-token logits favour id + 1, so "a b c d" style ascending runs score highest.
  torch::jit::Module lm("lm");
  lm.define(R"(
def forward(self, ids):
    v = torch.arange(8).float()
    x = ids[0].float().unsqueeze(1)
    return (-(v.unsqueeze(0) - x - 1.0).abs()).unsqueeze(0)
)");
  lm.save((dir / "lm.pt").string());
  nlohmann::json side = {{"bos", 0},
                         {"words", {{"a", {1}}, {"b", {2}}, {"c", {3}}, {"d", {4}}, {"ef", {5, 6}}}}};
  mma::testing::write_file(dir / "lm.json", side.dump());

  LanguageModelProvider provider(dir / "lm.pt", dir / "lm.json");
  CHECK(provider.name() == "lm");

  // Oracle: log-likelihood of a token sequence under the rule above.
  auto oracle = [](std::vector<std::int64_t> ids) {
    double total = 0;
    for (std::size_t t = 1; t < ids.size(); ++t) {
      double z = 0;
      for (int v = 0; v < 8; ++v) z += std::exp(-std::abs(v - ids[t - 1] - 1.0));
      total += -std::abs(ids[t] - ids[t - 1] - 1.0) - std::log(z);
    }
    return total;
  };
  CHECK(provider.sequence_log_likelihood({"a", "b"}) == doctest::Approx(oracle({0, 1, 2})));
  CHECK(provider.sequence_log_likelihood({"ef", "a"}) == doctest::Approx(oracle({0, 5, 6, 1})));

  const auto p = parse_prompt("a d c");
  const auto fill = provider.fill_ins(p, 2, 10);
  CHECK(fill.front() == "b");
  CHECK(std::find(fill.begin(), fill.end(), "d") == fill.end());
  CHECK(fill.size() == 4);
  for (std::size_t i = 1; i < fill.size(); ++i) {
    auto wi = p.tokens, wj = p.tokens;
    wi[1] = fill[i - 1];
    wj[1] = fill[i];
    CHECK(provider.sequence_log_likelihood(wi) >= provider.sequence_log_likelihood(wj));
  }
  CHECK(provider.fill_ins(p, 2, 2) == provider.fill_ins(p, 2, 2));
  CHECK(provider.fill_ins(p, 2, 2).size() == 2);
  CHECK_THROWS_AS(provider.sequence_log_likelihood({"zzz"}), VocabularyError);

  // Restriction narrows the fill-ins but the rest of the prompt still scores.
  provider.restrict_to([](const std::string& w) { return w != "b"; });
  const auto narrowed = provider.fill_ins(p, 2, 10);
  CHECK(narrowed.size() == 3);
  CHECK(std::find(narrowed.begin(), narrowed.end(), "b") == narrowed.end());
  CHECK(provider.sequence_log_likelihood({"a", "b"}) == doctest::Approx(oracle({0, 1, 2})));

  CHECK_THROWS_AS(LanguageModelProvider(dir / "nope.pt", dir / "lm.json"), ExternalDependencyError);
  CHECK_THROWS_AS(LanguageModelProvider(dir / "lm.pt", dir / "nope.json"), ExternalDependencyError);
}
