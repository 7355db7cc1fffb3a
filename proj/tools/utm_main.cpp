// utm: train / evaluate / inspect the weight-tied ACT transformer.
//
// Exit codes: 0 ok, 2 config, 3 io, 4 data, 5 runtime, 64 usage.
// Errors are printed to stderr as "error[<category>]: <message>".

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <json.hpp>

#include "utm/runner.hpp"

namespace fs = std::filesystem;
using namespace utm;

namespace {

const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::kConfig: return "config";
    case ErrorCategory::kIo: return "io";
    case ErrorCategory::kData: return "data";
    case ErrorCategory::kRuntime: return "runtime";
  }
  return "runtime";
}

int fail(ErrorCategory c, const std::string& what) {
  std::cerr << "error[" << category_name(c) << "]: " << what << "\n";
  return static_cast<int>(c);
}

std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& sets) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  return out;
}

void print_eval(const std::string& label, const EvalResult& e, const RunConfig& cfg) {
  std::cout << label << ": em " << std::fixed << std::setprecision(4) << e.em << " cell_acc "
            << e.cell_accuracy << " mean_halt " << std::setprecision(2) << e.mean_halt << " halt_range ["
            << e.halt_min << "," << e.halt_max << "] token_steps "
            << token_steps(cfg.model.mem_tokens, cfg.model.seq_len, e.mean_halt) << " puzzles " << e.puzzles
            << "\n";
}

template <typename F>
auto with_precision(Precision p, F&& f) {
  if (p == Precision::kF64) return f(double{});
  return f(float{});
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Activations are freed and reallocated every step; keep them on the heap
  // instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Weight-tied transformer with memory tokens and adaptive computation time"};
  app.require_subcommand(1);

  std::string config_arg, run_dir, root, ckpt_path, out_path;
  std::vector<std::string> sets;
  bool resume = false, overwrite = false, quiet = false;
  int k_run = 0, puzzles = 0, log_every = 100;
  std::int64_t stop_after = 0;

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("config", config_arg, "Config file or preset name")->required();
    cmd->add_option("--set", sets, "Override a config key: section.key=value (repeatable)");
  };

  auto* train = app.add_subcommand("train", "Train one config (a [sweep] section runs the grid)");
  add_config(train);
  train->add_option("--run-dir", run_dir, "Run directory (default: $UTM_RUN_ROOT/<run.name>)");
  train->add_option("--root", root, "Run root (default: $UTM_RUN_ROOT or ./runs)");
  train->add_flag("--resume", resume, "Resume from checkpoints/last.ckpt");
  train->add_flag("--overwrite", overwrite, "Replace an existing run");
  train->add_flag("--quiet", quiet, "No progress output");
  train->add_option("--log-every", log_every, "Progress line interval in steps");
  train->add_option("--stop-after", stop_after, "Checkpoint and stop after N steps; continue with --resume");

  auto* sweep = app.add_subcommand("sweep", "Run every cell of a [sweep] grid and tabulate");
  add_config(sweep);
  sweep->add_option("--root", root, "Run root (default: $UTM_RUN_ROOT or ./runs)");
  sweep->add_flag("--resume", resume, "Resume cells that have checkpoints");
  sweep->add_flag("--overwrite", overwrite, "Replace existing runs");
  sweep->add_flag("--quiet", quiet, "No progress output");
  sweep->add_option("--log-every", log_every, "Progress line interval in steps");

  auto* eval = app.add_subcommand("eval", "Evaluate a model checkpoint on its held-out set");
  eval->add_option("checkpoint", ckpt_path, "Model checkpoint (checkpoints/model.ckpt)")->required();
  eval->add_option("--k-run", k_run, "Iterations to run (default K_train)");
  eval->add_option("--puzzles", puzzles, "Evaluate only the first N puzzles");

  auto* infer = app.add_subcommand("infer-extended", "Per-iteration EM with the loop run past K_train");
  infer->add_option("checkpoint", ckpt_path, "Model checkpoint")->required();
  infer->add_option("--k-run", k_run, "Iterations (default act.k_run, else 2 x K_train)");
  infer->add_option("--out", out_path, "CSV path (default: extended_<K_run>.csv beside the run)");
  infer->add_option("--puzzles", puzzles, "Use only the first N puzzles");

  auto* diagnose = app.add_subcommand("diagnose", "Per-iteration router, attention and prediction dumps");
  diagnose->add_option("checkpoint", ckpt_path, "Model checkpoint")->required();
  diagnose->add_option("--out", out_path, "Output directory (default: diagnose/ beside the run)");
  diagnose->add_option("--puzzles", puzzles, "Puzzles in the diagnostic batch")->default_val(32);
  diagnose->add_option("--k-run", k_run, "Iterations (default K_train)");

  auto* params = app.add_subcommand("param-count", "Parameter count for a config");
  add_config(params);

  int gen_count = 1000, gen_seed = 1234, gmin = 4, gmax = 12;
  auto* gen = app.add_subcommand("gen-data", "Write 4x4 puzzles as puzzle,solution CSV");
  gen->add_option("--out", out_path, "CSV path")->required();
  gen->add_option("--count", gen_count, "Number of puzzles");
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--givens-min", gmin, "Minimum givens");
  gen->add_option("--givens-max", gmax, "Maximum givens");

  std::string preset_name;
  auto* presets = app.add_subcommand("presets", "List presets, or print one as a config file");
  presets->add_option("name", preset_name, "Preset to print");

  app.add_subcommand("config-keys", "Every config key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 64;
  }

  try {
    const auto overrides = parse_overrides(sets);
    RunOptions opts;
    opts.resume = resume;
    opts.overwrite = overwrite;
    opts.log = quiet ? nullptr : &std::cerr;
    opts.log_every = log_every;
    opts.stop_after = stop_after;
    const fs::path run_root = root.empty() ? default_run_root() : fs::path(root);

    if (train->parsed() || sweep->parsed()) {
      const auto spec = load_run_spec(config_arg, overrides);
      if (sweep->parsed() || spec.grid.cells() > 1 || !spec.grid.axes.empty()) {
        if (!run_dir.empty()) throw ConfigError("--run-dir cannot be used with a sweep");
        const auto results = run_sweep(spec, run_root, opts);
        int failed = 0;
        for (const auto& r : results) {
          if (r.ok) {
            print_eval(r.run_name, r.summary.final_eval, [&] {
              RunConfig c = spec.base;
              for (const auto& [k, v] : r.overrides) c.set(k, v);
              return c;
            }());
          } else {
            ++failed;
            std::cout << r.run_name << ": failed: " << r.error << "\n";
          }
        }
        std::cout << "summary: " << (run_root / spec.base.name / "summary.csv").string() << "\n";
        if (failed == static_cast<int>(results.size())) {
          return fail(ErrorCategory::kRuntime, "every sweep cell failed");
        }
        return 0;
      }
      const fs::path dir = run_dir.empty() ? run_root / spec.base.name : fs::path(run_dir);
      const auto s = train_run(spec.base, dir, opts);
      print_eval("final", s.final_eval, spec.base);
      std::cout << "run_dir: " << s.run_dir.string() << "\n";
      return 0;
    }

    if (eval->parsed()) {
      const auto loaded = load_model_checkpoint(ckpt_path);
      auto set = load_eval_set(loaded.config);
      if (puzzles > 0 && static_cast<std::size_t>(puzzles) < set.size()) set.resize(static_cast<std::size_t>(puzzles));
      auto act = ActOptions::from_config(loaded.config.act);
      act.k_run = k_run > 0 ? k_run : loaded.config.model.max_ponder;
      const auto r = with_precision(loaded.config.train.precision, [&](auto tag) {
        using T = decltype(tag);
        return evaluate(model_from_checkpoint<T>(loaded), set, act);
      });
      print_eval("eval", r, loaded.config);
      return 0;
    }

    if (infer->parsed()) {
      const auto loaded = load_model_checkpoint(ckpt_path);
      const auto& cfg = loaded.config;
      const int k = k_run > 0 ? k_run : (cfg.act.k_run > 0 ? cfg.act.k_run : 2 * cfg.model.max_ponder);
      auto set = load_eval_set(cfg);
      if (puzzles > 0 && static_cast<std::size_t>(puzzles) < set.size()) set.resize(static_cast<std::size_t>(puzzles));
      const auto act = ActOptions::from_config(cfg.act);
      const auto rows = with_precision(cfg.train.precision, [&](auto tag) {
        using T = decltype(tag);
        return extended_em_curve(model_from_checkpoint<T>(loaded), set, k, act);
      });
      const fs::path out = out_path.empty()
                               ? fs::path(ckpt_path).parent_path().parent_path() /
                                     ("extended_" + std::to_string(k) + ".csv")
                               : fs::path(out_path);
      write_extended_csv(out, rows);
      double best = -1;
      int best_step = 0;
      for (const auto& r : rows) {
        if (r.em > best) {
          best = r.em;
          best_step = r.step;
        }
      }
      std::cout << "k_run " << k << " k_train " << cfg.model.max_ponder << " em@K_train "
                << std::fixed << std::setprecision(4) << rows[static_cast<std::size_t>(std::min(k, cfg.model.max_ponder) - 1)].em
                << " em@K_run " << rows.back().em << " best " << best << " at step " << best_step + 1 << "\n";
      std::cout << "csv: " << out.string() << "\n";
      return 0;
    }

    if (diagnose->parsed()) {
      const fs::path out = out_path.empty() ? fs::path(ckpt_path).parent_path().parent_path() / "diagnose"
                                            : fs::path(out_path);
      diagnose_checkpoint(ckpt_path, out, puzzles, k_run > 0 ? std::optional<int>(k_run) : std::nullopt);
      std::cout << "wrote " << out.string() << "\n";
      return 0;
    }

    if (params->parsed()) {
      const auto spec = load_run_spec(config_arg, overrides);
      spec.base.model.validate();
      std::cout << count_parameters(spec.base.model) << "\n";
      return 0;
    }

    if (gen->parsed()) {
      const auto set = sudoku::gen_micro_dataset(static_cast<std::uint64_t>(gen_seed), gen_count, gmin, gmax);
      sudoku::write_csv(out_path, set);
      std::cout << "wrote " << set.size() << " puzzles to " << out_path << "\n";
      return 0;
    }

    if (presets->parsed()) {
      if (preset_name.empty()) {
        for (const auto& n : preset_names()) std::cout << n << "\n";
      } else {
        std::cout << preset_text(preset_name);
      }
      return 0;
    }

    for (const auto& d : config_key_docs()) {
      std::cout << std::left << std::setw(34) << d.key << std::setw(14) << d.default_value << d.doc << "\n";
    }
    return 0;
  } catch (const RunError& e) {
    return fail(e.category(), e.what());
  } catch (const ConfigError& e) {
    return fail(ErrorCategory::kConfig, e.what());
  } catch (const sudoku::DataError& e) {
    return fail(ErrorCategory::kData, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(ErrorCategory::kIo, e.what());
  } catch (const std::exception& e) {
    return fail(ErrorCategory::kRuntime, e.what());
  }
}
