#include <benchmark/benchmark.h>

#include "utm/act.hpp"
#include "utm/runner.hpp"
#include "utm/training.hpp"

namespace {

using namespace utm;

RunConfig micro_config() {
  return parse_run_spec(preset_text("micro-default")).base;
}

sudoku::PuzzleBatch micro_batch(int n) {
  const auto puzzles = sudoku::gen_micro_dataset(7, n, 4, 12);
  return sudoku::make_batch(puzzles);
}

template <typename T>
void BM_BlockForward(benchmark::State& state) {
  const auto cfg = micro_config();
  Model<T> model(cfg.model, 1);
  const auto batch = micro_batch(static_cast<int>(state.range(0)));
  NoGradGuard no_grad;
  const auto x = model.embed_inputs(batch, 0);
  for (auto _ : state) {
    auto h = model.block_forward(x);
    benchmark::DoNotOptimize(h.data().data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK_TEMPLATE(BM_BlockForward, float)->Arg(64)->Unit(benchmark::kMillisecond);

// One optimizer step of the micro preset: K=8 act loop, loss, backward, AdamW.
template <typename T>
void BM_TrainStep(benchmark::State& state) {
  const auto cfg = micro_config();
  Model<T> model(cfg.model, 1);
  AdamW<T> adam(model.params().named(), {});
  const auto batch = micro_batch(static_cast<int>(state.range(0)));
  ActOptions opts = ActOptions::from_config(cfg.act);
  opts.collect_diagnostics = false;
  for (auto _ : state) {
    auto out = act_loop(model, batch, opts);
    auto loss = total_loss(model.output_logits(out.output), batch.targets, {}, out.ponder, 0.0);
    for (auto& [name, t] : model.params().named()) t->zero_grad();
    loss.backward();
    adam.step(1e-4);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK_TEMPLATE(BM_TrainStep, float)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK_TEMPLATE(BM_TrainStep, double)->Arg(16)->Unit(benchmark::kMillisecond);

template <typename T>
void BM_ActLoopInference(benchmark::State& state) {
  const auto cfg = micro_config();
  Model<T> model(cfg.model, 1);
  const auto batch = micro_batch(static_cast<int>(state.range(0)));
  ActOptions opts = ActOptions::from_config(cfg.act);
  opts.collect_diagnostics = false;
  NoGradGuard no_grad;
  for (auto _ : state) {
    auto out = act_loop(model, batch, opts);
    benchmark::DoNotOptimize(out.output.data().data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK_TEMPLATE(BM_ActLoopInference, float)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_GenMicroSudoku(benchmark::State& state) {
  std::uint64_t seed = 0;
  for (auto _ : state) {
    auto p = sudoku::gen_micro_sudoku(seed++, 4, 12);
    benchmark::DoNotOptimize(p.grid.data());
  }
}
BENCHMARK(BM_GenMicroSudoku);

void BM_SolveEmpty4x4(benchmark::State& state) {
  const sudoku::Grid empty(16, 0);
  for (auto _ : state) {
    auto r = sudoku::solve_backtracking(empty, sudoku::Geometry::micro(), 2);
    benchmark::DoNotOptimize(r.count);
  }
}
BENCHMARK(BM_SolveEmpty4x4);

void BM_HaltTracker(benchmark::State& state) {
  const int tokens = static_cast<int>(state.range(0));
  std::vector<double> probs(static_cast<std::size_t>(tokens) * 8);
  for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = 0.02 * static_cast<double>(i % 37);
  for (auto _ : state) {
    auto h = compute_halting(probs, tokens, 8, 0.01);
    benchmark::DoNotOptimize(h.halt_step.data());
  }
}
BENCHMARK(BM_HaltTracker)->Arg(64 * 20);

}  // namespace

BENCHMARK_MAIN();
