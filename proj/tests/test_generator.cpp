#include "doctest_torch.hpp"

#include "mma/errors.hpp"
#include "mma/generator.hpp"
#include "test_util.hpp"

using namespace mma;

namespace {
GeneratorConfig small_config() {
  GeneratorConfig c;
  c.channels = 4;
  c.blocks = 1;
  return c;
}
}  // namespace

TEST_CASE("bound applies the per-element projection rule") {
  const double eps = 0.04;
  const auto clean = torch::tensor({0.5, 0.5, 0.5}, torch::kFloat64);
  const auto raw = clean + torch::tensor({2 * eps, -2 * eps, 0.5 * eps}, torch::kFloat64);
  const auto out = bound(raw, clean, eps);
  CHECK(out[0].item<double>() == doctest::Approx(0.5 + eps));
  CHECK(out[1].item<double>() == doctest::Approx(0.5 - eps));
  CHECK(out[2].item<double>() == doctest::Approx(0.5 + 0.5 * eps));
  CHECK(torch::equal(bound(clean, clean, eps), clean));

  const auto all_up = bound(clean + 2 * eps, clean, eps);
  CHECK((all_up - (clean + eps)).abs().max().item<double>() < 1e-12);

  // Pixels near the wall are clamped into [0, 1] after the projection.
  const auto edge = torch::tensor({0.99, 0.01}, torch::kFloat64);
  const auto clamped = bound(edge + torch::tensor({0.1, -0.1}, torch::kFloat64), edge, eps);
  CHECK(clamped[0].item<double>() == 1.0);
  CHECK(clamped[1].item<double>() == 0.0);
}

TEST_CASE("bound is an idempotent projection inside the epsilon ball") {
  for (int i = 0; i < 200; ++i) {
    const auto clean = torch::rand({2, 3, 5, 5});
    const auto raw = torch::rand({2, 3, 5, 5}) * 2 - 0.5;
    const double eps = 0.001 + 0.1 * (i % 10);
    const auto once = bound(raw, clean, eps);
    CHECK(torch::equal(bound(once, clean, eps), once));
    CHECK(linf_distance(once, clean) <= eps);
    CHECK(once.min().item<double>() >= 0.0);
    CHECK(once.max().item<double>() <= 1.0);
  }
}

TEST_CASE("bound contract errors") {
  CHECK_THROWS_AS(bound(torch::rand({3}), torch::rand({4}), 0.04), InputContractError);
  CHECK_THROWS_AS(bound(torch::rand({3}), torch::rand({3}), -0.01), ConfigurationError);
  CHECK_THROWS_AS(bound(torch::rand({3}), torch::rand({3}), std::nan("")), ConfigurationError);
}

TEST_CASE("gradient flows through the unclamped region only") {
  const auto clean = torch::full({4}, 0.5, torch::kFloat64);
  auto raw = torch::tensor({0.5, 0.6, 0.4, 0.51}, torch::kFloat64).requires_grad_(true);
  bound(raw, clean, 0.04).sum().backward();
  const auto g = raw.grad();
  CHECK(g[0].item<double>() == 1.0);
  CHECK(g[1].item<double>() == 0.0);
  CHECK(g[2].item<double>() == 0.0);
  CHECK(g[3].item<double>() == 1.0);
}

TEST_CASE("generator forward keeps shape and budget") {
  auto state = GeneratorState::create(small_config(), 0.04, 5);
  for (int i = 0; i < 20; ++i) {
    const auto images = torch::rand({3, 3, 12, 12});
    const auto raw = generate_raw(state, images);
    CHECK(raw.sizes() == images.sizes());
    CHECK(torch::isfinite(raw).all().item<bool>());
    const auto adv = forward(state, images);
    CHECK(linf_distance(adv, images) <= 0.04);
  }
  const auto images = torch::rand({2, 3, 10, 10});
  CHECK(torch::equal(forward(state, images), forward(state, images)));
  CHECK_THROWS_AS(generate_raw(state, torch::rand({2, 1, 10, 10})), InputContractError);
}

TEST_CASE("batch forward equals per-sample forward") {
  auto state = GeneratorState::create(small_config(), 0.04, 6);
  const auto images = torch::rand({4, 3, 8, 8}, torch::kFloat64);
  state.net->to(torch::kFloat64);
  const auto batch = forward(state, images);
  for (int b = 0; b < 4; ++b) {
    const auto single = forward(state, images[b]);
    CHECK((single - batch[b]).abs().max().item<double>() < 1e-12);
  }
}

TEST_CASE("zero budget and zero-initialized head leave the image unchanged") {
  auto zero_eps = GeneratorState::create(small_config(), 0.0, 1);
  const auto images = torch::rand({2, 3, 8, 8});
  CHECK(torch::equal(forward(zero_eps, images), images));

  auto cfg = small_config();
  cfg.zero_init_head = true;
  auto identity = GeneratorState::create(cfg, 0.04, 1);
  CHECK(torch::equal(generate_raw(identity, images), images));
  CHECK_THROWS_AS(GeneratorState::create(small_config(), -0.1, 1), ConfigurationError);
}

TEST_CASE("generator checkpoints reload to identical behavior") {
  mma::testing::TempDir dir;
  auto state = GeneratorState::create(small_config(), 0.03, 8);
  state.iteration = 7;
  save_generator(state, dir / "g.bin");
  const auto loaded = load_generator(dir / "g.bin");
  CHECK(loaded.epsilon == 0.03);
  CHECK(loaded.iteration == 7);
  CHECK(loaded.config == state.config);
  CHECK(loaded.fingerprint() == state.fingerprint());
  const auto probe = torch::rand({3, 3, 8, 8});
  CHECK(torch::equal(forward(loaded, probe), forward(state, probe)));

  save_generator(loaded, dir / "g2.bin");
  CHECK(mma::testing::read_file(dir / "g.bin") == mma::testing::read_file(dir / "g2.bin"));
}

TEST_CASE("clone is independent of the original") {
  auto state = GeneratorState::create(small_config(), 0.04, 2);
  auto copy = state.clone();
  CHECK(copy.fingerprint() == state.fingerprint());
  {
    torch::NoGradGuard no_grad;
    copy.net->head->bias.add_(1.0);
  }
  CHECK(copy.fingerprint() != state.fingerprint());
}
