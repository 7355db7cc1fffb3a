#include <doctest.h>

#include <random>

#include "testing.hpp"
#include "utm/act.hpp"
#include "utm/training.hpp"

using namespace utm;
using utm::testing::micro_batch;
using utm::testing::micro_model;

namespace {

// Straight transcription of the halting rule for a single token.
struct Trace {
  int n = 0;
  double r = 0.0;
  std::vector<double> w;
};

Trace hand_trace(const std::vector<double>& p, int k_run, double eps) {
  Trace t;
  double cum = 0.0;
  for (int k = 1; k <= k_run; ++k) {
    const double pk = p[static_cast<std::size_t>(k - 1)];
    if (k == k_run || cum + pk >= 1.0 - eps) {
      t.n = k;
      t.r = 1.0 - cum;
      t.w.push_back(t.r);
      return t;
    }
    t.w.push_back(pk);
    cum += pk;
  }
  return t;
}

}  // namespace

TEST_CASE("halting weights match a hand trace") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 0.6);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 1 + trial % 9;
    std::vector<double> p(static_cast<std::size_t>(k));
    for (auto& x : p) x = u(rng);
    const auto expect = hand_trace(p, k, 0.01);
    const auto got = compute_halting(p, 1, k, 0.01);
    CHECK(got.halt_step[0] == expect.n);
    CHECK(got.remainder[0] == doctest::Approx(expect.r).epsilon(1e-15));
    for (int s = 0; s < expect.n; ++s) CHECK(got.weight(s, 0) == doctest::Approx(expect.w[static_cast<std::size_t>(s)]));
  }
}

TEST_CASE("worked examples of the halting rule") {
  SUBCASE("crosses the threshold at step 3") {
    const std::vector<double> p = {0.3, 0.3, 0.5, 0.9};
    const auto h = compute_halting(p, 1, 4, 0.01);
    CHECK(h.halt_step[0] == 3);
    CHECK(h.remainder[0] == doctest::Approx(0.4));
    CHECK(h.ponder_cost() == doctest::Approx(3.4));
  }
  SUBCASE("p = 1 at the first step halts immediately with full weight") {
    const std::vector<double> p = {1.0, 0.2};
    const auto h = compute_halting(p, 1, 2, 0.01);
    CHECK(h.halt_step[0] == 1);
    CHECK(h.remainder[0] == 1.0);
  }
  SUBCASE("zero probabilities run to K_run") {
    const std::vector<double> p(5, 0.0);
    const auto h = compute_halting(p, 1, 5, 0.01);
    CHECK(h.halt_step[0] == 5);
    CHECK(h.remainder[0] == 1.0);
  }
  SUBCASE("epsilon 0.99 halts at step 1 for any p >= 0.01") {
    const std::vector<double> p = {0.02, 0.5};
    CHECK(compute_halting(p, 1, 2, 0.99).halt_step[0] == 1);
  }
}

TEST_CASE("halting weights are conserved over random trajectories") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int tokens = 1000, k = 12;
  std::vector<double> p(static_cast<std::size_t>(tokens * k));
  for (auto& x : p) x = u(rng) * u(rng);
  const auto h = compute_halting(p, tokens, k, 0.01);
  for (int i = 0; i < tokens; ++i) {
    double sum = 0.0;
    for (int s = 0; s < h.steps; ++s) {
      CHECK(h.weight(s, i) >= 0.0);
      sum += h.weight(s, i);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("tracker rejects bad inputs") {
  CHECK_THROWS(HaltTracker(1, 0, 0.01));
  HaltTracker t(2, 1, 0.01);
  const std::vector<double> one = {0.5};
  CHECK_THROWS(t.observe(one));
  const std::vector<double> two = {0.5, 0.5};
  t.observe(two);
  CHECK(t.all_halted());
  CHECK_THROWS(t.observe(two));
}

TEST_CASE("router override of zero reproduces the fixed-depth forward") {
  Model<double> model(micro_model(), 5);
  const auto batch = micro_batch(3);
  ActOptions opt;
  opt.k_run = 3;
  opt.prob_override = [](int, int) { return 0.0; };
  const auto act = act_loop(model, batch, opt);
  const auto fixed = fixed_depth_forward(model, batch, 3);
  REQUIRE(act.output.size() == fixed.size());
  for (std::size_t i = 0; i < fixed.size(); ++i) CHECK(std::abs(act.output.data()[i] - fixed.data()[i]) <= 1e-12);
  for (int n : act.halt.halt_step) CHECK(n == 3);
}

TEST_CASE("ACT off runs every token to K") {
  auto cfg = micro_model();
  cfg.act_enabled = false;
  Model<double> model(cfg, 5);
  const auto batch = micro_batch(2);
  const auto out = model_forward(model, batch, {});
  CHECK_FALSE(out.ponder.defined());
  for (int n : out.halt.halt_step) CHECK(n == cfg.max_ponder);
  const auto fixed = fixed_depth_forward(model, batch, cfg.max_ponder);
  for (std::size_t i = 0; i < fixed.size(); ++i) CHECK(out.output.data()[i] == fixed.data()[i]);
}

TEST_CASE("router bias controls initial depth") {
  const auto batch = micro_batch(16);
  auto halts = [&](double bias) {
    auto cfg = micro_model(32, 2, 2, 8);
    cfg.router_bias_init = bias;
    Model<double> model(cfg, 9);
    ActOptions opt;
    return act_loop(model, batch, opt).halt;
  };
  const auto deep = halts(-3.0);
  for (int n : deep.halt_step) CHECK(n == 8);
  const auto mid = summarize_halting(halts(0.0), 2, 16);
  CHECK(mid.mean_halt >= 1.5);
  CHECK(mid.mean_halt <= 2.5);
  const auto shallow = halts(1.0);
  for (int n : shallow.halt_step) CHECK(n <= 2);
}

TEST_CASE("ponder cost is N + R and its gradient flows through R") {
  auto cfg = micro_model(32, 2, 2, 4);
  cfg.router_bias_init = 0.0;
  Model<double> model(cfg, 2);
  const auto batch = micro_batch(2);
  const auto out = act_loop(model, batch, {});
  CHECK(out.ponder.item() == doctest::Approx(out.halt.ponder_cost()).epsilon(1e-12));
  out.ponder.backward();
  CHECK(model.params().router_bias.has_grad());
  CHECK(std::abs(model.params().router_bias.grad()[0]) > 0.0);

  ActOptions seq;
  seq.ponder_scope = PonderScope::kSequenceTokens;
  const auto out2 = act_loop(model, batch, seq);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(out2.halt.tokens));
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = static_cast<int>(i) % cfg.rows() >= cfg.mem_tokens;
  CHECK(out2.ponder.item() == doctest::Approx(out2.halt.ponder_cost(mask)).epsilon(1e-12));
}

TEST_CASE("freezing halted tokens keeps their state fixed") {
  auto cfg = micro_model(32, 2, 2, 6);
  cfg.router_bias_init = 0.0;
  Model<double> model(cfg, 4);
  const auto batch = micro_batch(2);
  ActOptions a;
  a.freeze_halted = true;
  const auto frozen = act_loop(model, batch, a);
  const auto plain = act_loop(model, batch, {});
  // Same halting decisions up to the first halt, different states after.
  CHECK(frozen.halt.halt_step.size() == plain.halt.halt_step.size());
  bool differs = false;
  for (std::size_t i = 0; i < plain.output.size(); ++i) differs |= plain.output.data()[i] != frozen.output.data()[i];
  CHECK(differs);
}

TEST_CASE("extended inference wraps the step embedding and matches training") {
  auto cfg = micro_model(32, 2, 2, 4);
  cfg.router_bias_init = -1.0;
  Model<double> model(cfg, 6);
  const auto batch = micro_batch(8);
  const auto ext = extended_inference(model, batch, 8, {});
  REQUIRE(ext.size() == 8);
  for (const auto& s : ext) CHECK(s.step_embedding_index == s.step % 4);

  NoGradGuard no_grad;
  const auto train = act_loop(model, batch, {});
  CHECK(greedy_predictions(model, train.output) == ext[3].output);

  const auto fixed = fixed_depth_forward(model, batch, 4);
  CHECK(greedy_predictions(model, fixed) == ext[3].hidden);
}

TEST_CASE("extended inference in fixed-depth mode decodes each state") {
  auto cfg = micro_model(32, 2, 0, 3);
  cfg.act_enabled = false;
  Model<double> model(cfg, 6);
  const auto batch = micro_batch(4);
  const auto ext = extended_inference(model, batch, 6, {});
  REQUIRE(ext.size() == 6);
  for (const auto& s : ext) CHECK(s.output == s.hidden);
  NoGradGuard no_grad;
  CHECK(greedy_predictions(model, fixed_depth_forward(model, batch, 2)) == ext[1].hidden);
}

TEST_CASE("diagnostics per step") {
  auto cfg = micro_model(32, 2, 3, 4);
  cfg.router_bias_init = 0.0;
  Model<double> model(cfg, 1);
  ActOptions opt;
  opt.capture_steps = {0, 2};
  const auto out = act_loop(model, micro_batch(2), opt);
  REQUIRE(out.steps.size() == 4);
  CHECK(out.attention.size() == 2);
  CHECK(out.steps[0].quadrants.size() == 2);
  CHECK(out.steps[1].quadrants.empty());
  for (std::size_t s = 1; s < out.steps.size(); ++s) CHECK(out.steps[s].frac_halted >= out.steps[s - 1].frac_halted);
  CHECK(out.steps.back().frac_halted == 1.0);
}
