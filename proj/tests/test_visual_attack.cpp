#include "doctest_torch.hpp"

#include <cmath>

#include "mma/errors.hpp"
#include "mma/prompt.hpp"
#include "mma/visual_attack.hpp"
#include "test_util.hpp"

using namespace mma;
using mma::testing::tiny_encoder;

namespace {

UnitEmbedding rows(std::vector<std::vector<double>> values) {
  std::vector<torch::Tensor> r;
  for (const auto& v : values) r.push_back(torch::tensor(v, torch::kFloat64));
  return normalize(RawEmbedding(torch::stack(r)));
}

double sq_dist(const torch::Tensor& a, const torch::Tensor& b) {
  double s = 0;
  for (std::int64_t i = 0; i < a.size(0); ++i) {
    const double d = a[i].item<double>() - b[i].item<double>();
    s += d * d;
  }
  return s;
}

GeneratorConfig small_config() {
  GeneratorConfig c;
  c.channels = 4;
  c.blocks = 1;
  return c;
}

}  // namespace

TEST_CASE("feat loss identities") {
  const auto a = rows({{1, 0, 0}, {0, 1, 0}});
  const auto b = rows({{0, 1, 0}, {0, 0, 1}});
  CHECK(feat_loss(a, a).item<double>() == 0.0);
  CHECK(feat_loss(a, b).item<double>() == doctest::Approx(-2.0).epsilon(1e-12));
  const auto neg = normalize(RawEmbedding(-a.values()));
  CHECK(feat_loss(a, neg).item<double>() == doctest::Approx(-4.0).epsilon(1e-12));
  CHECK_THROWS_AS(feat_loss(a, rows({{1, 0}})), InputContractError);
}

TEST_CASE("least similar label") {
  const auto img = rows({{1, 0}});
  // Texts with cosine similarities 0.9, 0.1, 0.5 to the image.
  const auto texts = rows({{0.9, std::sqrt(1 - 0.81)},
                           {0.1, std::sqrt(1 - 0.01)},
                           {0.5, std::sqrt(1 - 0.25)}});
  CHECK(least_similar_label(img, texts).item<std::int64_t>() == 1);
  const auto same = rows({{0, 1}, {0, 1}, {0, 1}});
  CHECK(least_similar_label(img, same).item<std::int64_t>() == 0);

  const auto images = normalize(RawEmbedding(torch::randn({20, 5}, torch::kFloat64)));
  const auto classes = normalize(RawEmbedding(torch::randn({6, 5}, torch::kFloat64)));
  const auto got = least_similar_label(images, classes);
  for (int b = 0; b < 20; ++b) {
    std::int64_t best = 0;
    double lowest = 2;
    for (std::int64_t c = 0; c < 6; ++c) {
      const double s = (images.values()[b] * classes.values()[c]).sum().item<double>();
      if (s < lowest) lowest = s, best = c;
    }
    CHECK(got[b].item<std::int64_t>() == best);
  }
}

TEST_CASE("triplet loss") {
  const TripletConfig cfg{1.0};
  const auto far = rows({{1, 0}});
  const auto truth = rows({{-1, 0}});
  CHECK(triplet_loss(far, far, truth, cfg).item<double>() == 0.0);
  // Adversarial embedding sitting on the true-class text.
  CHECK(triplet_loss(truth, far, truth, cfg).item<double>() == doctest::Approx(4.0 + 1.0));

  for (int i = 0; i < 10; ++i) {
    const auto adv = normalize(RawEmbedding(torch::randn({1, 4}, torch::kFloat64)));
    const auto f = normalize(RawEmbedding(torch::randn({1, 4}, torch::kFloat64)));
    const auto t = normalize(RawEmbedding(torch::randn({1, 4}, torch::kFloat64)));
    const double pull = sq_dist(adv.values()[0], f.values()[0]);
    const double push = sq_dist(adv.values()[0], t.values()[0]);
    const double want = pull + std::max(0.0, 1.0 - push);
    CHECK(triplet_loss(adv, f, t, cfg).item<double>() == doctest::Approx(want).epsilon(1e-12));
    CHECK(triplet_loss(adv, f, t, cfg).item<double>() >= 0.0);
  }
}

TEST_CASE("cls loss values and range") {
  const ClsConfig cfg{0.1};
  const auto y = torch::tensor(std::vector<std::int64_t>{0});
  CHECK(cls_loss(torch::tensor({{1.0, 0.0}}, torch::kFloat64), y, cfg).item<double>() ==
        doctest::Approx(10.0).epsilon(1e-12));
  const auto uniform = torch::full({1, 10}, 0.1, torch::kFloat64);
  CHECK(cls_loss(uniform, y, cfg).item<double>() ==
        doctest::Approx(1.0 / (0.1 + std::log(10.0))).epsilon(1e-12));
  CHECK(cls_loss(torch::tensor({{1e-300, 1.0}}, torch::kFloat64), y, cfg).item<double>() < 0.002);

  const auto logits = torch::randn({32, 5}, torch::kFloat64) * 4;
  const auto labels = torch::randint(0, 5, {32}, torch::kInt64);
  const auto from_logits = cls_loss_from_logits(logits, labels, cfg).item<double>();
  const auto from_probs = cls_loss(torch::softmax(logits, -1), labels, cfg).item<double>();
  CHECK(from_logits == doctest::Approx(from_probs).epsilon(1e-10));
  CHECK(from_logits > 0.0);
  CHECK(from_logits <= 10.0);
}

TEST_CASE("attack step contract") {
  auto surrogate = tiny_encoder(8);
  const auto classes = mma::testing::shape_classes();
  const auto texts = normalize(surrogate.encode_text(build_class_texts(classes, parse_prompt("a photo of a"))));
  const auto images = torch::rand({6, 3, 8, 8});
  const auto labels = torch::randint(0, 4, {6}, torch::kInt64);
  const auto surrogate_before = surrogate.fingerprint();

  SUBCASE("report components add up") {
    auto state = GeneratorState::create(small_config(), 0.04, 1);
    auto opt = make_generator_optimizer(state, 1e-4);
    const auto r = attack_step(state, opt, surrogate, images, labels, texts, 0.1, AttackConfig{});
    CHECK(r.total == doctest::Approx(r.feat + r.tri + r.cls).epsilon(1e-6));
    CHECK(r.cls > 0.0);
    CHECK(r.cls <= 10.0 + 1e-9);
    CHECK(surrogate.fingerprint() == surrogate_before);
  }
  SUBCASE("zero learning rate leaves parameters unchanged") {
    auto state = GeneratorState::create(small_config(), 0.04, 1);
    const auto before = state.fingerprint();
    auto opt = make_generator_optimizer(state, 0.0);
    attack_step(state, opt, surrogate, images, labels, texts, 0.1, AttackConfig{});
    CHECK(state.fingerprint() == before);
  }
  SUBCASE("non-finite loss is rejected without a step") {
    auto state = GeneratorState::create(small_config(), 0.04, 1);
    {
      torch::NoGradGuard no_grad;
      state.net->head->bias.fill_(std::nan(""));
    }
    const auto before = state.fingerprint();
    auto opt = make_generator_optimizer(state, 1e-3);
    CHECK_THROWS_AS(attack_step(state, opt, surrogate, images, labels, texts, 0.1, AttackConfig{}),
                    TrainingDivergenceError);
    CHECK(state.fingerprint() == before);
  }
}

TEST_CASE("a step at lr 1e-4 lowers the batch loss in most trials") {
  const auto classes = mma::testing::shape_classes();
  int decreased = 0;
  const int trials = 50;
  for (int t = 0; t < trials; ++t) {
    auto surrogate = tiny_encoder(8, 100 + t);
    const auto texts =
        normalize(surrogate.encode_text(build_class_texts(classes, parse_prompt("a photo of a"))));
    const auto images = torch::rand({8, 3, 8, 8});
    const auto labels = torch::randint(0, 4, {8}, torch::kInt64);
    auto state = GeneratorState::create(small_config(), 0.04, 200 + t);
    auto opt = make_generator_optimizer(state, 1e-4);
    const AttackConfig cfg;
    const auto before = attack_step(state, opt, surrogate, images, labels, texts, 0.1, cfg).total;
    torch::NoGradGuard no_grad;
    const auto after =
        attack_losses(surrogate, images, forward(state, images), labels, texts, 0.1, cfg).report().total;
    if (after <= before) ++decreased;
  }
  CHECK(decreased >= 45);
}
