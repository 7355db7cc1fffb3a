#include <doctest.h>

#include "testing.hpp"
#include "utm/act.hpp"
#include "utm/checkpoint.hpp"
#include "utm/training.hpp"

using namespace utm;
using utm::testing::grad_check;
using utm::testing::micro_batch;
using utm::testing::micro_model;

TEST_CASE("parameter counts") {
  SUBCASE("micro preset") {
    auto c = micro_model(128, 4, 4, 8);
    CHECK(c.ffn_inner() == 344);
    // embeddings 6*128 + 2*128 + 8*128 + 4*128, two DerfNorms, attention,
    // SwiGLU, router, output head
    const std::int64_t expect = 2560 + 512 + (4 * 128 * 128 + 8) + 3 * 128 * 344 + 129 + 768;
    CHECK(count_parameters(c) == expect);
    CHECK(expect == 201609);
    CHECK(Model<float>(c, 1).param_count() == expect);
  }
  SUBCASE("full size") {
    ModelConfig c;
    CHECK(c.ffn_inner() == 1368);
    CHECK(count_parameters(c) == 3182097);
  }
  SUBCASE("RMSNorm has one vector per norm and T=0 has no bank") {
    auto c = micro_model(32, 2, 0, 3);
    c.norm = NormKind::kRms;
    Model<double> m(c, 1);
    CHECK(m.param_count() == count_parameters(c));
    CHECK_FALSE(m.params().memory.defined());
    CHECK_FALSE(m.params().norm1_alpha.defined());
    CHECK(m.params().norm1_gain.defined());
  }
}

TEST_CASE("invalid model configs are rejected") {
  auto c = micro_model();
  c.head_dim = 7;
  CHECK_THROWS_AS(Model<float>(c, 1), ConfigError);
  c = micro_model();
  c.max_ponder = 0;
  CHECK_THROWS_AS(Model<float>(c, 1), ConfigError);
}

TEST_CASE("router bias is initialised exactly") {
  for (double b : {-3.0, 0.0, 1.0}) {
    auto c = micro_model();
    c.router_bias_init = b;
    CHECK(Model<double>(c, 3).params().router_bias.data()[0] == b);
  }
}

TEST_CASE("step embedding index wraps modulo K") {
  Model<float> m(micro_model(32, 2, 2, 3), 1);
  for (int k = 0; k < 10; ++k) CHECK(m.step_index(k) == k % 3);
  CHECK_THROWS(m.step_index(-1));
}

TEST_CASE("memory rows come first and are shared across the batch") {
  auto c = micro_model(32, 2, 3, 2);
  Model<double> m(c, 7);
  const auto batch = micro_batch(2);
  const auto x = m.base_embedding(batch);
  CHECK(x.shape() == Shape{2, 19, 32});
  const auto& p = m.params();
  for (int t = 0; t < 3; ++t) {
    for (int j = 0; j < 32; ++j) {
      const double expect = p.memory.at({t, j}) + p.type_embedding.at({0, j});
      CHECK(x.at({0, t, j}) == doctest::Approx(expect));
      CHECK(x.at({1, t, j}) == doctest::Approx(expect));
    }
  }
  CHECK(m.positions().front() == 0);
  CHECK(m.positions().back() == 18);
}

TEST_CASE("block output shapes and batch independence") {
  Model<double> m(micro_model(), 2);
  const auto b2 = micro_batch(2, 5);
  sudoku::PuzzleBatch b1 = b2;
  b1.batch = 1;
  b1.tokens.resize(16);
  b1.targets.resize(16);
  b1.givens.resize(16);
  const auto y2 = fixed_depth_forward(m, b2, 2);
  const auto y1 = fixed_depth_forward(m, b1, 2);
  for (std::size_t i = 0; i < y1.size(); ++i) CHECK(y1.data()[i] == doctest::Approx(y2.data()[i]).epsilon(1e-12));
}

TEST_CASE("checkpoint round trip restores identical outputs") {
  const auto dir = utm::testing::temp_dir("model_ckpt");
  Model<float> a(micro_model(), 3);
  save_checkpoint(dir / "m.ckpt", a.to_checkpoint());
  Model<float> b(micro_model(), 99);
  b.load_checkpoint(load_checkpoint(dir / "m.ckpt"));
  const auto batch = micro_batch(2);
  const auto ya = fixed_depth_forward(a, batch, 3);
  const auto yb = fixed_depth_forward(b, batch, 3);
  for (std::size_t i = 0; i < ya.size(); ++i) CHECK(ya.data()[i] == yb.data()[i]);

  Model<float> wrong(micro_model(64, 2, 2, 3), 1);
  CHECK_THROWS(wrong.load_checkpoint(load_checkpoint(dir / "m.ckpt")));
}

TEST_CASE("float and double models agree to float precision") {
  Model<double> d(micro_model(), 4);
  Model<float> f(micro_model(), 4);
  const auto batch = micro_batch(2);
  const auto yd = fixed_depth_forward(d, batch, 3);
  const auto yf = fixed_depth_forward(f, batch, 3);
  for (std::size_t i = 0; i < yd.size(); ++i) CHECK(yf.data()[i] == doctest::Approx(yd.data()[i]).epsilon(1e-4));
}

TEST_CASE("full-model gradient check on a small config, both norms") {
  for (auto norm : {NormKind::kDerf, NormKind::kRms}) {
    auto c = micro_model(16, 2, 2, 3);
    c.norm = norm;
    c.router_bias_init = 0.0;
    Model<double> m(c, 8);
    const auto batch = micro_batch(2);
    auto loss = [&] {
      auto out = act_loop(m, batch, {});
      return total_loss(m.output_logits(out.output), batch.targets, {}, out.ponder, 0.01);
    };
    for (auto& [name, t] : m.params().named()) {
      const auto r = grad_check(loss, *t, 1e-6, 48);
      INFO(name);
      CHECK(r.rel_error < 1e-5);
    }
  }
}
