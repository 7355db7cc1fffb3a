#include <doctest.h>

#include <set>

#include "testing.hpp"
#include "utm/config.hpp"
#include "utm/runner.hpp"

using namespace utm;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("defaults are the full-size architecture") {
  RunConfig c;
  CHECK(c.model.hidden == 512);
  CHECK(c.model.heads == 8);
  CHECK(c.model.mem_tokens == 16);
  CHECK(c.model.max_ponder == 18);
  CHECK(c.model.router_bias_init == -3.0);
  CHECK(c.act.epsilon == 0.01);
  CHECK(c.train.lr_max == 3e-4);
  CHECK(c.train.ema_decay == 0.999);
}

TEST_CASE("INI round trip keeps every key") {
  RunConfig c;
  c.name = "round";
  c.model.mem_tokens = 8;
  c.act.lambda = 0.001;
  c.model.norm = NormKind::kRms;
  c.train.attention_capture_steps = "0,3";
  const auto back = RunConfig::from_ini_text(c.to_ini());
  CHECK(back.to_map() == c.to_map());
  CHECK(c.to_map().size() == config_key_docs().size());
}

TEST_CASE("errors name the offending key") {
  RunConfig c;
  CHECK(error_of([&] { c.set("model.hidden", "wide"); }).find("model.hidden") != std::string::npos);
  CHECK(error_of([&] { c.set("model.norm", "layer"); }).find("derf|rms") != std::string::npos);
  CHECK(error_of([&] { c.set("model.bogus", "1"); }).find("model.bogus") != std::string::npos);
  CHECK(error_of([&] { c.set("model.act", "maybe"); }).find("model.act") != std::string::npos);
  CHECK_THROWS_AS(RunConfig::from_ini_text("[model]\nhidden = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_ini_text("hidden = 4\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_file("/nonexistent/x.ini"), ConfigError);
}

TEST_CASE("validation catches inconsistent settings") {
  auto bad = [](const std::string& key, const std::string& value) {
    auto c = RunConfig::from_ini_text(preset_text("micro-default").substr(0, preset_text("micro-default").find("[sweep]")));
    c.set(key, value);
    return error_of([&] { c.validate(); });
  };
  CHECK(bad("model.head_dim", "16").find("heads*head_dim") != std::string::npos);
  CHECK(bad("act.epsilon", "0.5").find("act.epsilon") != std::string::npos);
  CHECK(bad("model.seq_len", "81").find("seq_len") != std::string::npos);
  CHECK(bad("data.givens_min", "2").find("givens") != std::string::npos);
  CHECK(bad("train.lr", "0").find("train.lr") != std::string::npos);
  CHECK(bad("data.source", "csv").find("seq_len") != std::string::npos);
}

TEST_CASE("every preset parses and validates") {
  const std::set<std::string> expected = {"micro-default", "bias-sweep",       "memory-curve", "lambda-warmup",
                                          "fixed-depth",   "rmsnorm-ablation", "paper-full"};
  const auto names = preset_names();
  CHECK(std::set<std::string>(names.begin(), names.end()) == expected);
  for (const auto& n : names) {
    INFO(n);
    const auto spec = parse_run_spec(preset_text(n));
    CHECK_NOTHROW(spec.base.validate());
    CHECK(spec.base.name == n);
  }
  CHECK_THROWS(preset_text("nope"));
}

TEST_CASE("micro preset settings") {
  const auto c = parse_run_spec(preset_text("micro-default")).base;
  CHECK(c.model.hidden == 128);
  CHECK(c.model.heads == 4);
  CHECK(c.model.mem_tokens == 4);
  CHECK(c.model.max_ponder == 8);
  CHECK(c.model.router_bias_init == -3.0);
  CHECK(c.act.lambda == 0.0);
  CHECK(c.data.train_size == 50000);
  CHECK(c.data.eval_size == 2000);
  CHECK(count_parameters(c.model) == 201609);
  const auto full = parse_run_spec(preset_text("paper-full")).base;
  CHECK(count_parameters(full.model) == 3182097);
}

TEST_CASE("sweep grids") {
  SUBCASE("bias sweep has three cells") {
    const auto spec = parse_run_spec(preset_text("bias-sweep"));
    REQUIRE(spec.grid.cells() == 3);
    std::vector<std::string> biases;
    for (std::size_t i = 0; i < 3; ++i) biases.push_back(spec.grid.cell(i).at(0).second);
    CHECK(biases == std::vector<std::string>{"-3", "0", "1"});
  }
  SUBCASE("memory curve is 5 x 3 with the seed axis fastest") {
    const auto spec = parse_run_spec(preset_text("memory-curve"));
    CHECK(spec.grid.cells() == 15);
    const auto c4 = spec.grid.cell(4);
    CHECK(c4.at(0) == std::pair<std::string, std::string>{"model.mem_tokens", "2"});
    CHECK(c4.at(1) == std::pair<std::string, std::string>{"train.seed", "1"});
  }
  SUBCASE("an override on a swept key removes that axis") {
    const auto spec = parse_run_spec(preset_text("memory-curve"), {{"model.mem_tokens", "8"}});
    CHECK(spec.grid.cells() == 3);
    CHECK(spec.base.model.mem_tokens == 8);
  }
  SUBCASE("plain config has a single cell") {
    CHECK(parse_run_spec(preset_text("micro-default")).grid.cells() == 1);
  }
  SUBCASE("unknown sweep keys fail early") {
    CHECK_THROWS_AS(parse_run_spec("[run]\nname = x\n[sweep]\nmodel.nothing = 1,2\n"), ConfigError);
  }
}

TEST_CASE("list splitting trims blanks") {
  CHECK(split_list(" 0, 2 ,,4") == std::vector<std::string>{"0", "2", "4"});
  CHECK(split_list("").empty());
}
