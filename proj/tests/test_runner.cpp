#include <doctest.h>

#include <fstream>
#include <sstream>

#include "testing.hpp"
#include "utm/runner.hpp"

using namespace utm;
namespace fs = std::filesystem;

namespace {

RunConfig tiny(Precision p = Precision::kF64) {
  RunConfig c;
  c.name = "tiny";
  c.model = utm::testing::micro_model(32, 2, 2, 3);
  c.model.router_bias_init = 0.0;
  c.act.lambda = 0.001;
  c.act.lambda_warmup_steps = 6;
  c.train.lr_max = 1e-3;
  c.train.batch_size = 16;
  c.train.max_steps = 12;
  c.train.eval_every = 4;
  c.train.checkpoint_every = 4;
  c.train.ema_decay = 0.9;
  c.train.precision = p;
  c.data.train_size = 40;
  c.data.eval_size = 24;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) row.push_back(field);
    if (!line.empty() && line.back() == ',') row.emplace_back();
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

TEST_CASE("a run writes the documented layout and metrics schema") {
  const auto dir = utm::testing::temp_dir("run_layout");
  const auto s = train_run(tiny(), dir);
  CHECK(s.steps == 12);
  for (const char* f : {"config.ini", "metrics.jsonl", "diagnostics.jsonl", "attention.bin", "predictions.jsonl",
                        "summary.json", "checkpoints/last.ckpt", "checkpoints/model.ckpt"}) {
    INFO(f);
    CHECK(fs::exists(dir / f));
  }
  const auto metrics = read_jsonl(dir / "metrics.jsonl");
  REQUIRE(metrics.size() == 3);
  const std::vector<std::string> keys = {"step",     "samples_seen", "lr",       "lambda_t",
                                         "train_loss", "eval_em",    "mean_halt", "halt_min",
                                         "halt_max", "router_grad_norm"};
  for (const auto& m : metrics) {
    CHECK(m.size() == keys.size());
    for (const auto& k : keys) CHECK(m.contains(k));
  }
  CHECK(metrics[0]["step"] == 4);
  CHECK(metrics[0]["samples_seen"] == 56);  // one epoch of 40 (16+16+8), then 16
  CHECK(metrics[2]["step"] == 12);
  CHECK(metrics[1]["lambda_t"].get<double>() == doctest::Approx(0.001));
  CHECK(metrics[0]["lambda_t"].get<double>() == doctest::Approx(0.001 * 3 / 6));

  int train_steps = 0, evals = 0;
  for (const auto& d : read_jsonl(dir / "diagnostics.jsonl")) {
    if (d["type"] == "train_step") ++train_steps;
    if (d["type"] == "eval_iterations") {
      ++evals;
      CHECK(d["iterations"].size() == 3);
    }
  }
  CHECK(train_steps == 12);
  CHECK(evals == 3);

  const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  CHECK(summary["steps"] == 12);
  CHECK(summary.contains("token_steps"));
  CHECK(RunConfig::from_ini_text(slurp(dir / "config.ini")).to_map() == tiny().to_map());

  CHECK_THROWS_AS(train_run(tiny(), dir), RunError);
}

TEST_CASE("64-bit runs are bitwise reproducible and logging does not change them") {
  const auto a = utm::testing::temp_dir("det_a");
  const auto b = utm::testing::temp_dir("det_b");
  train_run(tiny(), a);
  std::ostringstream sink;
  RunOptions verbose;
  verbose.log = &sink;
  verbose.log_every = 1;
  train_run(tiny(), b, verbose);
  CHECK(slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl"));
  CHECK(slurp(a / "diagnostics.jsonl") == slurp(b / "diagnostics.jsonl"));
  CHECK_FALSE(sink.str().empty());
}

TEST_CASE("32-bit runs reproduce to 1e-6") {
  const auto a = utm::testing::temp_dir("det32_a");
  const auto b = utm::testing::temp_dir("det32_b");
  train_run(tiny(Precision::kF32), a);
  train_run(tiny(Precision::kF32), b);
  const auto ma = read_jsonl(a / "metrics.jsonl");
  const auto mb = read_jsonl(b / "metrics.jsonl");
  REQUIRE(ma.size() == mb.size());
  for (std::size_t i = 0; i < ma.size(); ++i) {
    CHECK(std::abs(ma[i]["train_loss"].get<double>() - mb[i]["train_loss"].get<double>()) <= 1e-6);
    CHECK(std::abs(ma[i]["eval_em"].get<double>() - mb[i]["eval_em"].get<double>()) <= 1e-6);
  }
}

TEST_CASE("resuming an interrupted run matches an uninterrupted one") {
  const auto full = utm::testing::temp_dir("resume_full");
  const auto part = utm::testing::temp_dir("resume_part");
  train_run(tiny(), full);
  RunOptions stop;
  stop.stop_after = 6;
  CHECK(train_run(tiny(), part, stop).steps == 6);
  RunOptions resume;
  resume.resume = true;
  train_run(tiny(), part, resume);
  CHECK(slurp(full / "metrics.jsonl") == slurp(part / "metrics.jsonl"));
  CHECK(slurp(full / "diagnostics.jsonl") == slurp(part / "diagnostics.jsonl"));

  auto other = tiny();
  other.train.lr_max = 5e-4;
  CHECK_THROWS_AS(train_run(other, part, resume), RunError);
}

TEST_CASE("invalid configs fail with the config category") {
  auto c = tiny();
  c.model.head_dim = 5;
  try {
    train_run(c, utm::testing::temp_dir("bad_cfg"));
    FAIL("expected an error");
  } catch (const RunError& e) {
    CHECK(e.category() == ErrorCategory::kConfig);
  }
}

TEST_CASE("checkpoint inference and the extended curve") {
  const auto dir = utm::testing::temp_dir("extended");
  train_run(tiny(), dir);
  const auto loaded = load_model_checkpoint(dir / "checkpoints" / "model.ckpt");
  CHECK(loaded.config.to_map() == tiny().to_map());
  const auto model = model_from_checkpoint<double>(loaded);
  const auto eval = load_eval_set(loaded.config);
  CHECK(eval.size() == 24);

  const auto rows = extended_em_curve(model, eval, 6, ActOptions::from_config(loaded.config.act), 10);
  REQUIRE(rows.size() == 6);
  for (std::size_t k = 0; k < rows.size(); ++k) CHECK(rows[k].step_embedding_index == static_cast<int>(k % 3));
  auto opts = ActOptions::from_config(loaded.config.act);
  opts.k_run = 3;
  const auto r = evaluate(model, eval, opts);
  CHECK(rows[2].em == doctest::Approx(r.em));
  CHECK(rows[2].cell_accuracy == doctest::Approx(r.cell_accuracy));

  write_extended_csv(dir / "ext.csv", rows);
  const auto csv = read_csv(dir / "ext.csv");
  REQUIRE(csv.size() == 7);
  CHECK(csv[0] == std::vector<std::string>{"step", "step_embedding_index", "em", "cell_accuracy", "em_hidden",
                                            "cell_accuracy_hidden"});

  CHECK_THROWS(load_model_checkpoint(dir / "checkpoints" / "last.ckpt"));
}

TEST_CASE("diagnose writes per-step records and dumps") {
  const auto dir = utm::testing::temp_dir("diagnose");
  train_run(tiny(), dir);
  diagnose_checkpoint(dir / "checkpoints" / "model.ckpt", dir / "diag", 8, 5);
  const auto recs = read_jsonl(dir / "diag" / "diagnostics.jsonl");
  REQUIRE(recs.size() == 6);
  CHECK(recs.back()["type"] == "halt_summary");
  for (int k = 0; k < 5; ++k) CHECK(recs[static_cast<std::size_t>(k)].contains("quadrants_mean"));
  CHECK(read_jsonl(dir / "diag" / "predictions.jsonl").size() == 40);
  const auto attn = load_checkpoint(dir / "diag" / "attention.bin");
  CHECK(attn.metadata.at("steps") == "0,1,2,3,4");
}

TEST_CASE("sweeps mark failed cells and report std only with two seeds") {
  const auto root = utm::testing::temp_dir("sweep");
  auto base = tiny();
  base.name = "grid";
  base.train.max_steps = 4;
  std::string text = base.to_ini() + "\n[sweep]\nmodel.mem_tokens = 0,-1,2\ntrain.seed = 0,1\n";
  const auto spec = parse_run_spec(text);
  CHECK(spec.grid.cells() == 6);
  const auto results = run_sweep(spec, root);
  REQUIRE(results.size() == 6);
  CHECK(results[0].ok);
  CHECK_FALSE(results[2].ok);
  CHECK_FALSE(results[3].ok);
  CHECK(fs::exists(root / "grid" / "mem_tokens=0_seed=1" / "metrics.jsonl"));

  const auto runs = read_csv(root / "grid" / "runs.csv");
  REQUIRE(runs.size() == 7);
  CHECK(runs[0][0] == "model.mem_tokens");
  CHECK(runs[3][3] == "failed");

  const auto summary = read_csv(root / "grid" / "summary.csv");
  REQUIRE(summary.size() == 4);
  const auto& h = summary[0];
  const auto col = [&](const std::string& name) {
    return static_cast<std::size_t>(std::find(h.begin(), h.end(), name) - h.begin());
  };
  CHECK(col("em_pct_std") < h.size());
  CHECK(col("em_pct_seed_1") < h.size());
  CHECK(summary[1][col("em_pct_std")] != "");
  CHECK(summary[2][col("seeds_failed")] == "2");
  CHECK(summary[2][col("em_pct_seed_0")] == "failed");
  CHECK(summary[2][col("em_pct_mean")] == "");

  const auto one = utm::testing::temp_dir("sweep_one");
  const auto single = parse_run_spec(base.to_ini() + "\n[sweep]\nmodel.mem_tokens = 0,2\n");
  run_sweep(single, one);
  const auto s1 = read_csv(one / "grid" / "summary.csv");
  REQUIRE(s1.size() == 3);
  const auto std_col = static_cast<std::size_t>(std::find(s1[0].begin(), s1[0].end(), "em_pct_std") - s1[0].begin());
  CHECK(s1[1][std_col] == "");
}

TEST_CASE("bias-sweep preset expands to three runs") {
  const auto spec = load_run_spec("bias-sweep", {{"train.max_steps", "1"},
                                                 {"data.train_size", "16"},
                                                 {"data.eval_size", "8"},
                                                 {"model.hidden", "32"},
                                                 {"model.heads", "2"},
                                                 {"model.head_dim", "16"}});
  const auto root = utm::testing::temp_dir("bias_sweep");
  const auto results = run_sweep(spec, root);
  REQUIRE(results.size() == 3);
  for (const auto& r : results) CHECK(r.ok);
  CHECK(fs::exists(root / "bias-sweep" / "router_bias_init=-3" / "summary.json"));
  CHECK(fs::exists(root / "bias-sweep" / "router_bias_init=1" / "summary.json"));
}

TEST_CASE("csv data runs report bad rows as data errors") {
  auto c = tiny();
  c.model.seq_len = 81;
  c.model.vocab = 11;
  c.data.source = DataSource::kCsv;
  c.data.train_csv = std::string(UTM_TEST_DATA_DIR) + "/extreme_sample.csv";
  c.data.eval_csv = std::string(UTM_TEST_DATA_DIR) + "/plain_sample.csv";
  c.train.max_steps = 2;
  const auto dir = utm::testing::temp_dir("csv_run");
  CHECK(train_run(c, dir).final_eval.puzzles == 2);

  c.data.eval_csv = std::string(UTM_TEST_DATA_DIR) + "/missing.csv";
  try {
    train_run(c, utm::testing::temp_dir("csv_missing"));
    FAIL("expected an error");
  } catch (const RunError& e) {
    CHECK(e.category() == ErrorCategory::kData);
  }
}
