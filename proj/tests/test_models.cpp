#include <functional>
#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "gamblenet/models.hpp"
#include "oracles.hpp"

using namespace gamblenet;
using namespace gamblenet::models;

namespace {

Tensor random_tensor(std::mt19937_64& rng, int c, int h, int w, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(c, h, w);
  for (double& v : t.values()) v = u(rng);
  return t;
}

ArchitectureSpec small(Role role, int blocks, std::uint64_t seed) {
  ArchitectureSpec s;
  s.role = role;
  s.blocks = blocks;
  s.base_width = 4;
  s.seed = seed;
  return s;
}

// Perturbs every parameter so that gradients are generic rather than the
// symmetric values of a fresh init.
void jitter(Model& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& p : m.parameters())
    for (double& v : p.value.values()) v += n(rng);
}

}  // namespace

TEST_CASE("segmenter shapes and softmax output") {
  ArchitectureSpec spec;
  spec.seed = 3;
  Model seg = build_segmenter(spec, 4);
  std::mt19937_64 rng(1);
  const Tensor out = seg.predict(random_tensor(rng, 3, 32, 32));
  CHECK(out.channels() == 4);
  CHECK(out.height() == 32);
  CHECK(out.width() == 32);
  CHECK_NOTHROW(validate_prediction(out));
  CHECK_THROWS_AS(seg.predict(random_tensor(rng, 3, 30, 32)), Error);
  CHECK_THROWS_AS(seg.predict(random_tensor(rng, 4, 32, 32)), Error);
  CHECK_THROWS_AS(build_segmenter(spec, 1), Error);
}

TEST_CASE("zero-initialised heads give symmetric outputs") {
  ArchitectureSpec spec;
  spec.zero_init_head = true;
  std::mt19937_64 rng(2);
  Model seg = build_segmenter(spec, 4);
  for (double v : seg.predict(random_tensor(rng, 3, 16, 16)).values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  spec.blocks = 2;
  Model gam = build_gambler(spec, 4);
  const Tensor raw = gam.predict(random_tensor(rng, 7, 16, 16));
  for (double v : raw.values()) CHECK(v == 0.5);
  for (double v : losses::normalize_betting_map(raw, 0.02).weights.values()) CHECK(v == doctest::Approx(1.0 / 256));
}

TEST_CASE("gambler and discriminator outputs") {
  std::mt19937_64 rng(5);
  ArchitectureSpec spec;
  spec.blocks = 2;
  Model gam = build_gambler(spec, 5);
  const Tensor raw = gam.predict(random_tensor(rng, 8, 16, 16));
  CHECK(raw.channels() == 1);
  for (double v : raw.values()) CHECK((v >= 0.0 && v <= 1.0));

  spec.blocks = 3;
  Model disc = build_patch_discriminator(spec, 4);
  const Tensor x = random_tensor(rng, 7, 32, 32);
  const Tensor scores = disc.predict(x);
  CHECK(scores.height() == 4);
  CHECK(scores.width() == 4);
  CHECK(patch_grid_size(disc.spec(), 32) == 4);
  for (double v : scores.values()) CHECK((v > 0.0 && v < 1.0));
  CHECK(disc.predict(x) == scores);
}

TEST_CASE("parameter counts match the closed form") {
  for (Role role : {Role::kSegmenter, Role::kGambler, Role::kDiscriminator}) {
    for (int blocks : {1, 2, 3, 4}) {
      for (int width : {4, 8}) {
        ArchitectureSpec spec;
        spec.blocks = blocks;
        spec.base_width = width;
        Model m = role == Role::kSegmenter ? build_segmenter(spec, 4)
                  : role == Role::kGambler ? build_gambler(spec, 4)
                                           : build_patch_discriminator(spec, 4);
        CHECK(m.parameter_count() == expected_parameter_count(m.spec()));
      }
    }
  }
  // Hand count for the default segmenter (3 blocks, width 8, c = 4):
  //   down  3->8 (k4): 392; 8->16: 2048 + 32 norm; 16->32: 8224
  //   up    32->16 (k4): 8192 + 32; 32->8: 4096 + 16; 16->8: 2048 + 16
  //   head  11->4 (k3): 400
  // Normalised convolutions carry no bias.
  ArchitectureSpec spec;
  CHECK(build_segmenter(spec, 4).parameter_count() == 25496);
}

TEST_CASE("forward pass is deterministic and seed dependent") {
  ArchitectureSpec spec;
  spec.seed = 11;
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor(rng, 3, 16, 16);
  Model a = build_segmenter(spec, 3);
  Model b = build_segmenter(spec, 3);
  CHECK(a.parameter_hash() == b.parameter_hash());
  CHECK(a.predict(x) == b.predict(x));
  spec.seed = 12;
  CHECK(build_segmenter(spec, 3).parameter_hash() != a.parameter_hash());
}

TEST_CASE("layer gradients match finite differences") {
  std::mt19937_64 rng(7);
  const Tensor x = random_tensor(rng, 2, 4, 4, -1, 1);
  const Tensor wt = random_tensor(rng, 2, 3, 16, -1, 1);
  const Tensor b = random_tensor(rng, 3, 1, 1, -1, 1);
  // Linear layer with a quadratic loss is exact up to rounding. Positive inputs, weights and
  // residuals keep every gradient entry away from zero so rounding stays below the bound.
  const Tensor xp = random_tensor(rng, 2, 4, 4, 0.5, 1);
  const Tensor wp = random_tensor(rng, 3, 2, 9, 0.5, 1);
  const Tensor wtp = random_tensor(rng, 2, 3, 16, 0.5, 1);
  auto near_output = [&](nn::Var (*layer)(nn::Graph&, nn::Var, nn::Var, nn::Var, int, int, int), int k, int s, int p,
                         const Tensor& kernel) {
    nn::Graph g;
    Tensor t = g.value(layer(g, g.constant(xp), g.constant(kernel), g.constant(b), k, s, p));
    for (double& v : t.values()) v -= 0.01;
    return t;
  };
  const Tensor target = near_output(nn::conv2d, 3, 1, 1, wp);
  const Tensor target_t = near_output(nn::conv_transpose2d, 4, 2, 1, wtp);
  auto quadratic = [](nn::Graph& g, nn::Var y, const Tensor& t) {
    return nn::squared_error(g, y, t);
  };
  CHECK(input_gradient_check(xp, [&](nn::Graph& g, nn::Var in) {
          return quadratic(g, nn::conv2d(g, in, g.constant(wp), g.constant(b), 3, 1, 1), target);
        }) < 1e-9);
  CHECK(input_gradient_check(wp, [&](nn::Graph& g, nn::Var in) {
          return quadratic(g, nn::conv2d(g, g.constant(xp), in, g.constant(b), 3, 1, 1), target);
        }) < 1e-9);
  CHECK(input_gradient_check(wtp, [&](nn::Graph& g, nn::Var in) {
          return quadratic(g, nn::conv_transpose2d(g, g.constant(xp), in, g.constant(b), 4, 2, 1), target_t);
        }) < 1e-9);
  CHECK(input_gradient_check(x, [&](nn::Graph& g, nn::Var in) {
          const nn::Var y = nn::instance_norm(g, in, g.constant(Tensor(2, 1, 1, 1.3)), g.constant(Tensor(2, 1, 1, 0.1)));
          return nn::embedding_distance(g, nn::sigmoid(g, y), g.constant(Tensor(2, 4, 4, 0.2)));
        }) < 1e-7);
  const LabelMap label = oracle::random_noise_map(rng, 4, 4, 2);
  CHECK(input_gradient_check(x, [&](nn::Graph& g, nn::Var in) {
          return nn::focal(g, nn::softmax(g, in), label, 2.0);
        }) < 1e-7);
}

TEST_CASE("full segmenter and gambler gradients on a 4x4x3 instance") {
  std::mt19937_64 rng(13);
  const int c = 3;
  const Tensor image = random_tensor(rng, 3, 4, 4);
  const LabelMap label = oracle::random_noise_map(rng, 4, 4, c);

  Model seg = build_segmenter(small(Role::kSegmenter, 2, 1), c);
  Model gam = build_gambler(small(Role::kGambler, 1, 2), c);
  jitter(seg, 3);
  jitter(gam, 4);

  for (auto scale : {losses::BetScale::kPerPixel, losses::BetScale::kBudget}) {
    // Segmenter objective with the gambler frozen in the graph.
    gam.set_trainable(false);
    const GradientCheckResult s = gradient_check(seg, image, [&](nn::Graph& g, const Forward& f) {
      const nn::Var x = g.constant(image);
      const nn::Var bets = nn::normalize_bets(g, gam.forward(g, nn::concat(g, x, f.output)).output, 0.02);
      const nn::Var ce = nn::cross_entropy(g, f.output, label);
      return nn::subtract(g, ce, nn::gambling(g, f.output, label, bets, scale));
    });
    CHECK(s.checked > 100);
    CHECK(s.max_error() <= 1e-5);
    gam.set_trainable(true);

    // Gambler objective for a fixed prediction.
    const Tensor pred = seg.predict(image);
    const GradientCheckResult gr = gradient_check(gam, concat_channels(image, pred), [&](nn::Graph& g, const Forward& f) {
      return nn::gambling(g, g.constant(pred), label, nn::normalize_bets(g, f.output, 0.02), scale);
    });
    CHECK(gr.max_error() <= 1e-5);

    // Flow B: gradient with respect to the prediction through the frozen gambler.
    gam.set_trainable(false);
    const double flow_b = input_gradient_check(pred, [&](nn::Graph& g, nn::Var p) {
      const nn::Var raw = gam.forward(g, nn::concat(g, g.constant(image), p)).output;
      return nn::gambling(g, p, label, nn::normalize_bets(g, raw, 0.02), scale);
    });
    CHECK(flow_b <= 1e-5);
    gam.set_trainable(true);
  }
}

TEST_CASE("flow B changes the segmenter gradient") {
  std::mt19937_64 rng(19);
  const int c = 3;
  const Tensor image = random_tensor(rng, 3, 8, 8);
  const LabelMap label = oracle::random_noise_map(rng, 8, 8, c);
  Model seg = build_segmenter(small(Role::kSegmenter, 2, 5), c);
  Model gam = build_gambler(small(Role::kGambler, 1, 6), c);
  jitter(gam, 8);
  gam.set_trainable(false);

  auto grad_norm = [&](bool sever) {
    seg.zero_grad();
    nn::Graph g;
    const nn::Var x = g.input(image, false);
    const nn::Var pred = seg.forward(g, x).output;
    const nn::Var shown = sever ? nn::detach(g, pred) : pred;
    const nn::Var bets = nn::normalize_bets(g, gam.forward(g, nn::concat(g, x, shown)).output, 0.02);
    g.backward(nn::gambling(g, pred, label, bets, losses::BetScale::kBudget));
    double s = 0.0;
    for (const auto& p : seg.parameters())
      for (double v : p.grad.values()) s += v * v;
    return std::sqrt(s);
  };
  const double both = grad_norm(false);
  const double direct = grad_norm(true);
  CHECK(std::abs(both - direct) > 1e-8);

  // The gambler's input gradient is live even though its parameters are frozen.
  nn::Graph g;
  const nn::Var p = g.input(seg.predict(image), true);
  const nn::Var raw = gam.forward(g, nn::concat(g, g.constant(image), p)).output;
  g.backward(nn::embedding_distance(g, raw, g.constant(Tensor(1, 8, 8, 0.0))));
  double s = 0.0;
  for (double v : g.grad(p).values()) s += std::abs(v);
  CHECK(s > 0.0);
  for (const auto& q : gam.parameters())
    for (double v : q.grad.values()) CHECK(v == 0.0);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "gamblenet_test_ckpt";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  ArchitectureSpec spec;
  spec.blocks = 2;
  spec.seed = 21;
  Model gam = build_gambler(spec, 4);
  jitter(gam, 1);
  save_checkpoint(gam, dir / "g.ckpt", {{"step", 12}});
  nlohmann::json meta;
  Model back = load_checkpoint(dir / "g.ckpt", &meta);
  CHECK(back.spec() == gam.spec());
  CHECK(back.parameter_hash() == gam.parameter_hash());
  CHECK(meta.at("step") == 12);

  std::filesystem::resize_file(dir / "g.ckpt", 64);
  CHECK_THROWS_AS(load_checkpoint(dir / "g.ckpt"), Error);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("gradient check flags a missing gradient path") {
  std::mt19937_64 rng(21);
  const Tensor x = random_tensor(rng, 3, 4, 4);
  const Tensor t = random_tensor(rng, 3, 4, 4);
  // The detached branch contributes to the value but not to the analytic gradient.
  const double err = input_gradient_check(x, [&](nn::Graph& g, nn::Var in) {
    return nn::add(g, nn::squared_error(g, in, t), nn::squared_error(g, nn::detach(g, in), t));
  });
  CHECK(err == doctest::Approx(0.5).epsilon(1e-6));

  Tensor a(1, 1, 2), n(1, 1, 2);
  a[0] = 3.0;
  n[0] = 3.0;
  n[1] = 4.0;
  CHECK(relative_error(a, n) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(relative_error(Tensor(1, 1, 2), Tensor(1, 1, 2)) == 0.0);
}
