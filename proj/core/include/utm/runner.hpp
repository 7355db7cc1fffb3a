#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "utm/config.hpp"
#include "utm/training.hpp"

// Run directories and the commands built on them. Layout of one run:
//
//   <run_dir>/config.ini          full config snapshot (every key)
//   <run_dir>/metrics.jsonl       one record per eval
//   <run_dir>/diagnostics.jsonl   per train step + per-iteration eval records
//   <run_dir>/attention.bin       final attention dump (checkpoint container)
//   <run_dir>/predictions.jsonl   final per-step prediction dump
//   <run_dir>/summary.json        final eval numbers
//   <run_dir>/checkpoints/last.ckpt   resumable training state
//   <run_dir>/checkpoints/model.ckpt  EMA weights + config, used for inference
namespace utm {

// Error categories surfaced as exit codes by the command line tool.
enum class ErrorCategory { kConfig = 2, kIo = 3, kData = 4, kRuntime = 5 };

class RunError : public std::runtime_error {
 public:
  RunError(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

// $UTM_RUN_ROOT, or "runs" in the working directory.
std::filesystem::path default_run_root();

struct RunOptions {
  bool resume = false;
  bool overwrite = false;
  std::ostream* log = nullptr;  // progress lines; null is silent
  int log_every = 100;
  // Checkpoint and return after this many steps as if interrupted; 0 runs to
  // the end.
  std::int64_t stop_after = 0;
};

struct RunSummary {
  std::filesystem::path run_dir;
  EvalResult final_eval;
  std::int64_t steps = 0;
  std::int64_t param_count = 0;
  double seconds = 0.0;
};

// Trains one config into run_dir and returns the final EMA eval.
RunSummary train_run(const RunConfig& config, const std::filesystem::path& run_dir,
                     const RunOptions& options = {});

// Steps for a config: max_steps, or epochs * ceil(train_size / batch).
std::int64_t planned_steps(const RunConfig& config, std::size_t train_size);

// Held-out set only (what infer / diagnose evaluate on).
std::vector<sudoku::Puzzle> load_eval_set(const RunConfig& config);

// Model checkpoint written at the end of training.
struct LoadedCheckpoint {
  RunConfig config;
  Checkpoint ckpt;
};
LoadedCheckpoint load_model_checkpoint(const std::filesystem::path& path);

template <typename T>
Model<T> model_from_checkpoint(const LoadedCheckpoint& loaded);

struct ExtendedRow {
  int step = 0;  // 0-based iteration
  int step_embedding_index = 0;
  double em = 0.0;
  double cell_accuracy = 0.0;
  double em_hidden = 0.0;
  double cell_accuracy_hidden = 0.0;
};

// Per-iteration EM over `puzzles` with the step loop run to k_run.
template <typename T>
std::vector<ExtendedRow> extended_em_curve(const Model<T>& model,
                                           std::span<const sudoku::Puzzle> puzzles, int k_run,
                                           const ActOptions& options, int batch_size = 256);

// CSV header: step,step_embedding_index,em,cell_accuracy,em_hidden,cell_accuracy_hidden
void write_extended_csv(const std::filesystem::path& path, std::span<const ExtendedRow> rows);

// Writes diagnostics for one checkpoint into out_dir: diagnostics.jsonl with
// per-iteration statistics, attention.bin, predictions.jsonl.
void diagnose_checkpoint(const std::filesystem::path& checkpoint, const std::filesystem::path& out_dir,
                         int puzzles, std::optional<int> k_run);

// A config file may carry a [sweep] section whose keys name config keys
// ("section.key" with the dot written as-is) and whose values are comma
// lists. Every combination is one run.
struct SweepGrid {
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;

  std::size_t cells() const;
  // Overrides for cell i (axes in declaration order, last axis fastest).
  std::vector<std::pair<std::string, std::string>> cell(std::size_t i) const;
};

struct RunSpec {
  RunConfig base;
  SweepGrid grid;
};

// Config text plus optional [sweep] section, then "key=value" overrides.
RunSpec parse_run_spec(const std::string& text,
                       const std::vector<std::pair<std::string, std::string>>& overrides = {});
RunSpec load_run_spec(const std::string& path_or_preset,
                      const std::vector<std::pair<std::string, std::string>>& overrides = {});

struct SweepCellResult {
  std::vector<std::pair<std::string, std::string>> overrides;
  std::string run_name;
  bool ok = false;
  std::string error;
  RunSummary summary;
};

// Runs every cell sequentially under root/<base name>/, tolerating failed
// cells, and writes runs.csv and summary.csv there. Cells are grouped by
// every axis except train.seed; summary.csv has per-seed EM, mean and std,
// halt mean / range and token-steps per group.
std::vector<SweepCellResult> run_sweep(const RunSpec& spec, const std::filesystem::path& root,
                                       const RunOptions& options = {});

void write_sweep_csvs(const std::filesystem::path& dir, const RunSpec& spec,
                      std::span<const SweepCellResult> results);

}  // namespace utm
