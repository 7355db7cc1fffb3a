#include "utm/runner.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "utm/diagnostics.hpp"

namespace utm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kDiagnosticPuzzles = 32;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9e3779b97f4a7c15ULL + b + 0x632be59bd9b4e019ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string exact(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

double parse_exact(const std::string& s) {
  double v = 0;
  std::from_chars(s.data(), s.data() + s.size(), v);
  return v;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw RunError(ErrorCategory::kIo, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RunError(ErrorCategory::kIo, "cannot write " + path.string());
  out << text;
}

// Keeps only JSONL records whose "step" is <= max_step.
void truncate_jsonl(const fs::path& path, std::int64_t max_step) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("step")) continue;
    if (j["step"].get<std::int64_t>() <= max_step) kept += line + "\n";
  }
  in.close();
  write_text(path, kept);
}

std::vector<int> capture_steps(const RunConfig& cfg) {
  const int k = cfg.model.max_ponder;
  std::vector<int> steps;
  if (cfg.train.attention_capture_steps.empty()) {
    steps = {0, k / 2, k - 1};
  } else {
    for (const auto& s : split_list(cfg.train.attention_capture_steps)) {
      try {
        steps.push_back(std::stoi(s));
      } catch (const std::exception&) {
        throw ConfigError("config key 'train.attention_capture_steps': bad step '" + s + "'");
      }
    }
  }
  std::sort(steps.begin(), steps.end());
  steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
  return steps;
}

ActOptions train_act_options(const RunConfig& cfg) {
  ActOptions o = ActOptions::from_config(cfg.act);
  o.k_run = cfg.model.max_ponder;
  o.collect_diagnostics = false;
  return o;
}

json eval_json(const EvalResult& r) {
  return {{"em", r.em},
          {"cell_accuracy", r.cell_accuracy},
          {"mean_halt", r.mean_halt},
          {"halt_min", r.halt_min},
          {"halt_max", r.halt_max},
          {"puzzles", r.puzzles}};
}

template <typename T>
class Trainer {
 public:
  Trainer(const RunConfig& cfg, fs::path dir, const RunOptions& opt)
      : cfg_(cfg),
        dir_(std::move(dir)),
        opt_(opt),
        model_(cfg.model, mix(static_cast<std::uint64_t>(cfg.train.seed), 1)),
        ema_(cfg.model, model_.params().clone()),
        adam_(model_.params().named(), {cfg.train.adam_beta1, cfg.train.adam_beta2,
                                        cfg.train.adam_eps, cfg.train.weight_decay}) {
    for (auto& [name, t] : ema_.params().named()) t->set_requires_grad(false);
  }

  RunSummary run(Datasets data) {
    const auto t0 = std::chrono::steady_clock::now();
    data_ = std::move(data);
    total_ = planned_steps(cfg_, data_.train.size());
    steps_per_epoch_ = static_cast<std::int64_t>(
        (data_.train.size() + static_cast<std::size_t>(cfg_.train.batch_size) - 1) /
        static_cast<std::size_t>(cfg_.train.batch_size));
    fs::create_directories(dir_ / "checkpoints");

    std::int64_t start = 0;
    if (opt_.resume && fs::exists(dir_ / "checkpoints" / "last.ckpt")) {
      start = restore();
      truncate_jsonl(dir_ / "metrics.jsonl", start);
      truncate_jsonl(dir_ / "diagnostics.jsonl", start);
      log("resumed at step " + std::to_string(start));
    } else {
      fs::remove(dir_ / "metrics.jsonl");
      fs::remove(dir_ / "diagnostics.jsonl");
    }
    write_text(dir_ / "config.ini", cfg_.to_ini());
    metrics_ = JsonlWriter(dir_ / "metrics.jsonl", true);
    diag_ = JsonlWriter(dir_ / "diagnostics.jsonl", true);

    const auto act_opts = train_act_options(cfg_);
    const auto eval_opts = act_opts;
    EvalResult last_eval;
    bool evaluated = false;
    for (std::int64_t step = start; step < total_; ++step) {
      const auto batch = batch_for(step);
      const double lambda_t =
          lambda_at_step(step, cfg_.act.lambda, cfg_.act.lambda_warmup_steps, cfg_.act.lambda_ramp);
      const double lr = cosine_lr(step, total_, cfg_.train.lr_max);

      double loss_value = 0.0, mean_halt = 0.0;
      {
        auto out = model_forward(model_, batch, act_opts);
        const auto logits = model_.output_logits(out.output);
        std::vector<std::uint8_t> mask;
        if (cfg_.train.loss_cells == LossCells::kBlanks) {
          mask.resize(batch.givens.size());
          for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = batch.givens[i] ? 0 : 1;
        }
        const auto loss = total_loss(logits, batch.targets, mask,
                                     cfg_.model.act_enabled ? out.ponder : Tensor<T>(), lambda_t);
        for (auto& [name, t] : model_.params().named()) t->zero_grad();
        loss.backward();
        loss_value = static_cast<double>(loss.item());
        mean_halt = summarize_halting(out.halt, cfg_.model.mem_tokens, cfg_.model.seq_len).mean_halt;
      }
      const double rgn = router_grad_norm(model_.params());
      const double gnorm = clip_grad_norm(model_.params(), cfg_.train.clip_norm);
      adam_.step(lr);
      ema_update(ema_.params(), model_.params(), cfg_.train.ema_decay);
      for (auto& [name, t] : model_.params().named()) t->zero_grad();

      loss_sum_ += loss_value;
      ++loss_count_;
      const std::int64_t done = step + 1;
      diag_.write({{"type", "train_step"},
                   {"step", done},
                   {"loss", loss_value},
                   {"lr", lr},
                   {"lambda_t", lambda_t},
                   {"mean_halt", mean_halt},
                   {"router_grad_norm", rgn},
                   {"grad_norm", gnorm}});

      if (opt_.log && (done % opt_.log_every == 0 || done == total_)) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::ostringstream line;
        line << "step " << done << "/" << total_ << " loss " << std::fixed << std::setprecision(4)
             << loss_value << " halt " << std::setprecision(2) << mean_halt << " lr "
             << std::scientific << std::setprecision(2) << lr << std::fixed << " " << std::setprecision(1)
             << secs << "s";
        log(line.str());
      }

      const bool eval_now = done == total_ || (cfg_.train.eval_every > 0 && done % cfg_.train.eval_every == 0);
      if (eval_now) {
        last_eval = evaluate(ema_, data_.eval, eval_opts);
        evaluated = true;
        metrics_.write({{"step", done},
                        {"samples_seen", samples_through(done)},
                        {"lr", lr},
                        {"lambda_t", lambda_t},
                        {"train_loss", loss_count_ ? loss_sum_ / static_cast<double>(loss_count_) : 0.0},
                        {"eval_em", last_eval.em},
                        {"mean_halt", last_eval.mean_halt},
                        {"halt_min", last_eval.halt_min},
                        {"halt_max", last_eval.halt_max},
                        {"router_grad_norm", rgn}});
        loss_sum_ = 0.0;
        loss_count_ = 0;
        write_eval_diagnostics(done, done == total_);
        if (opt_.log) {
          std::ostringstream line;
          line << "eval step " << done << " em " << std::fixed << std::setprecision(4) << last_eval.em
               << " cells " << last_eval.cell_accuracy << " halt " << std::setprecision(2)
               << last_eval.mean_halt << " [" << last_eval.halt_min << "," << last_eval.halt_max << "]";
          log(line.str());
        }
      }
      if (done == total_ || (cfg_.train.checkpoint_every > 0 && done % cfg_.train.checkpoint_every == 0)) {
        save_state(done);
      }
      if (opt_.stop_after > 0 && done >= opt_.stop_after && done < total_) {
        save_state(done);
        log("stopped at step " + std::to_string(done));
        RunSummary s;
        s.run_dir = dir_;
        s.final_eval = last_eval;
        s.steps = done;
        s.param_count = model_.param_count();
        return s;
      }
    }
    if (!evaluated) last_eval = evaluate(ema_, data_.eval, eval_opts);

    auto model_ckpt = ema_.to_checkpoint();
    model_ckpt.metadata["kind"] = "model";
    model_ckpt.metadata["config"] = cfg_.to_ini();
    model_ckpt.metadata["step"] = std::to_string(total_);
    save_checkpoint(dir_ / "checkpoints" / "model.ckpt", model_ckpt);

    RunSummary s;
    s.run_dir = dir_;
    s.final_eval = last_eval;
    s.steps = total_;
    s.param_count = model_.param_count();
    s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    auto summary = eval_json(last_eval);
    summary["token_steps"] = token_steps(cfg_.model.mem_tokens, cfg_.model.seq_len, last_eval.mean_halt);
    summary["steps"] = s.steps;
    summary["param_count"] = s.param_count;
    summary["seconds"] = s.seconds;
    write_text(dir_ / "summary.json", summary.dump(2) + "\n");
    return s;
  }

 private:
  void log(const std::string& line) {
    if (opt_.log) *opt_.log << "[" << cfg_.name << "] " << line << std::endl;
  }

  std::int64_t samples_through(std::int64_t steps) const {
    const auto n = static_cast<std::int64_t>(data_.train.size());
    const std::int64_t b = cfg_.train.batch_size;
    const std::int64_t full_epochs = steps / steps_per_epoch_;
    const std::int64_t rem = steps % steps_per_epoch_;
    return full_epochs * n + std::min(rem * b, n);
  }

  sudoku::PuzzleBatch batch_for(std::int64_t step) {
    const std::int64_t epoch = step / steps_per_epoch_;
    if (epoch != perm_epoch_) {
      perm_.resize(data_.train.size());
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      std::mt19937_64 rng(mix(static_cast<std::uint64_t>(cfg_.train.seed), 1000 + static_cast<std::uint64_t>(epoch)));
      std::shuffle(perm_.begin(), perm_.end(), rng);
      perm_epoch_ = epoch;
    }
    const auto b = static_cast<std::size_t>(cfg_.train.batch_size);
    const auto begin = static_cast<std::size_t>(step % steps_per_epoch_) * b;
    const auto end = std::min(begin + b, perm_.size());
    std::vector<sudoku::Puzzle> puzzles;
    puzzles.reserve(end - begin);
    const auto geo = sudoku::Geometry::for_cells(cfg_.model.seq_len);
    for (std::size_t i = begin; i < end; ++i) {
      const auto& p = data_.train[perm_[i]];
      if (cfg_.data.augment) {
        puzzles.push_back(sudoku::augment(p, geo, mix(static_cast<std::uint64_t>(step), i)));
      } else {
        puzzles.push_back(p);
      }
    }
    return sudoku::make_batch(puzzles);
  }

  void write_eval_diagnostics(std::int64_t step, bool final) {
    NoGradGuard no_grad;
    const auto n = std::min<std::size_t>(kDiagnosticPuzzles, data_.eval.size());
    const auto batch = sudoku::make_batch(std::span(data_.eval).first(n));
    auto opts = ActOptions::from_config(cfg_.act);
    opts.k_run = cfg_.model.max_ponder;
    opts.capture_steps = capture_steps(cfg_);
    const auto out = model_forward(ema_, batch, opts);
    json iterations = json::array();
    for (const auto& d : out.steps) iterations.push_back(to_json(d));
    diag_.write({{"type", "eval_iterations"}, {"step", step}, {"iterations", iterations}});
    if (final) {
      write_attention_dump(dir_ / "attention.bin", out.attention, cfg_.model.mem_tokens, cfg_.model.seq_len);
      const auto preds = dump_per_step_predictions(ema_, batch, cfg_.model.max_ponder, cfg_.act.epsilon);
      write_prediction_dump(dir_ / "predictions.jsonl", batch, preds);
    }
  }

  void save_state(std::int64_t step) {
    Checkpoint ckpt;
    ckpt.metadata["kind"] = "train_state";
    ckpt.metadata["config"] = cfg_.to_ini();
    ckpt.metadata["step"] = std::to_string(step);
    ckpt.metadata["loss_sum"] = exact(loss_sum_);
    ckpt.metadata["loss_count"] = std::to_string(loss_count_);
    for (const auto& [name, t] : model_.params().named()) ckpt.add("param/" + name, *t);
    for (const auto& [name, t] : ema_.params().named()) ckpt.add("ema/" + name, *t);
    adam_.save(ckpt, "adam/");
    save_checkpoint(dir_ / "checkpoints" / "last.ckpt", ckpt);
  }

  std::int64_t restore() {
    const auto ckpt = load_checkpoint(dir_ / "checkpoints" / "last.ckpt");
    const auto it = ckpt.metadata.find("config");
    if (it == ckpt.metadata.end() || it->second != cfg_.to_ini()) {
      throw RunError(ErrorCategory::kConfig,
                     "cannot resume " + dir_.string() + ": config differs from the checkpointed run");
    }
    for (auto& [name, t] : model_.params().named()) ckpt.load_into("param/" + name, *t);
    for (auto& [name, t] : ema_.params().named()) ckpt.load_into("ema/" + name, *t);
    adam_.load(ckpt, "adam/");
    loss_sum_ = parse_exact(ckpt.metadata.at("loss_sum"));
    loss_count_ = std::stoll(ckpt.metadata.at("loss_count"));
    return std::stoll(ckpt.metadata.at("step"));
  }

  RunConfig cfg_;
  fs::path dir_;
  RunOptions opt_;
  Model<T> model_;
  Model<T> ema_;
  AdamW<T> adam_;
  Datasets data_;
  std::int64_t total_ = 0;
  std::int64_t steps_per_epoch_ = 1;
  std::vector<std::size_t> perm_;
  std::int64_t perm_epoch_ = -1;
  double loss_sum_ = 0.0;
  std::int64_t loss_count_ = 0;
  JsonlWriter metrics_;
  JsonlWriter diag_;
};

template <typename F>
auto dispatch(Precision p, F&& f) {
  if (p == Precision::kF64) return f(double{});
  return f(float{});
}

}  // namespace

fs::path default_run_root() {
  if (const char* env = std::getenv("UTM_RUN_ROOT"); env && *env) return env;
  return "runs";
}

std::int64_t planned_steps(const RunConfig& config, std::size_t train_size) {
  if (config.train.max_steps > 0) return config.train.max_steps;
  const auto b = static_cast<std::size_t>(config.train.batch_size);
  return static_cast<std::int64_t>(config.train.epochs) *
         static_cast<std::int64_t>((train_size + b - 1) / b);
}

std::vector<sudoku::Puzzle> load_eval_set(const RunConfig& config) {
  const auto& d = config.data;
  if (d.source == DataSource::kCsv) {
    auto eval = sudoku::load_csv(d.eval_csv, sudoku::Geometry::for_cells(config.model.seq_len));
    if (d.eval_size > 0 && static_cast<int>(eval.size()) > d.eval_size) eval.resize(static_cast<std::size_t>(d.eval_size));
    return eval;
  }
  return sudoku::gen_micro_dataset(static_cast<std::uint64_t>(d.data_seed) * 2 + 1, d.eval_size,
                                   d.givens_min, d.givens_max);
}

RunSummary train_run(const RunConfig& config, const fs::path& run_dir, const RunOptions& options) {
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw RunError(ErrorCategory::kConfig, e.what());
  }
  if (!options.resume && !options.overwrite && fs::exists(run_dir / "metrics.jsonl")) {
    throw RunError(ErrorCategory::kIo, "run directory " + run_dir.string() +
                                           " already holds a run (use --resume or --overwrite)");
  }
  Datasets data;
  try {
    data = load_datasets(config);
  } catch (const sudoku::DataError& e) {
    throw RunError(ErrorCategory::kData, e.what());
  }
  return dispatch(config.train.precision, [&](auto tag) {
    using T = decltype(tag);
    Trainer<T> trainer(config, run_dir, options);
    return trainer.run(std::move(data));
  });
}

LoadedCheckpoint load_model_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw RunError(ErrorCategory::kIo, "checkpoint not found: " + path.string());
  LoadedCheckpoint out;
  try {
    out.ckpt = load_checkpoint(path);
  } catch (const std::exception& e) {
    throw RunError(ErrorCategory::kIo, e.what());
  }
  const auto kind = out.ckpt.metadata.find("kind");
  const auto it = out.ckpt.metadata.find("config");
  if (kind == out.ckpt.metadata.end() || kind->second != "model" || it == out.ckpt.metadata.end()) {
    throw RunError(ErrorCategory::kIo, path.string() + " is not a model checkpoint");
  }
  out.config = RunConfig::from_ini_text(it->second);
  return out;
}

template <typename T>
Model<T> model_from_checkpoint(const LoadedCheckpoint& loaded) {
  Model<T> model(loaded.config.model, 0);
  model.load_checkpoint(loaded.ckpt);
  for (auto& [name, t] : model.params().named()) t->set_requires_grad(false);
  return model;
}

template <typename T>
std::vector<ExtendedRow> extended_em_curve(const Model<T>& model,
                                           std::span<const sudoku::Puzzle> puzzles, int k_run,
                                           const ActOptions& options, int batch_size) {
  std::vector<ExtendedRow> rows(static_cast<std::size_t>(k_run));
  std::vector<std::size_t> solved(rows.size()), solved_h(rows.size()), cells(rows.size()), cells_h(rows.size());
  std::size_t total_cells = 0;
  for (std::size_t start = 0; start < puzzles.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(batch_size), puzzles.size() - start);
    const auto batch = sudoku::make_batch(puzzles.subspan(start, n));
    const auto steps = extended_inference(model, batch, k_run, options);
    const auto l = static_cast<std::size_t>(batch.cells);
    total_cells += n * l;
    for (std::size_t k = 0; k < steps.size(); ++k) {
      rows[k].step = steps[k].step;
      rows[k].step_embedding_index = steps[k].step_embedding_index;
      for (std::size_t b = 0; b < n; ++b) {
        bool all = true, all_h = true;
        for (std::size_t c = 0; c < l; ++c) {
          const auto i = b * l + c;
          const bool ok = steps[k].output[i] == batch.targets[i];
          const bool ok_h = steps[k].hidden[i] == batch.targets[i];
          cells[k] += ok;
          cells_h[k] += ok_h;
          all = all && ok;
          all_h = all_h && ok_h;
        }
        solved[k] += all;
        solved_h[k] += all_h;
      }
    }
  }
  const auto np = static_cast<double>(std::max<std::size_t>(puzzles.size(), 1));
  const auto nc = static_cast<double>(std::max<std::size_t>(total_cells, 1));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    rows[k].em = static_cast<double>(solved[k]) / np;
    rows[k].em_hidden = static_cast<double>(solved_h[k]) / np;
    rows[k].cell_accuracy = static_cast<double>(cells[k]) / nc;
    rows[k].cell_accuracy_hidden = static_cast<double>(cells_h[k]) / nc;
  }
  return rows;
}

void write_extended_csv(const fs::path& path, std::span<const ExtendedRow> rows) {
  std::ostringstream out;
  out << "step,step_embedding_index,em,cell_accuracy,em_hidden,cell_accuracy_hidden\n";
  for (const auto& r : rows) {
    out << r.step << ',' << r.step_embedding_index << ',' << exact(r.em) << ',' << exact(r.cell_accuracy)
        << ',' << exact(r.em_hidden) << ',' << exact(r.cell_accuracy_hidden) << '\n';
  }
  write_text(path, out.str());
}

void diagnose_checkpoint(const fs::path& checkpoint, const fs::path& out_dir, int puzzles,
                         std::optional<int> k_run) {
  const auto loaded = load_model_checkpoint(checkpoint);
  const auto& cfg = loaded.config;
  auto eval = load_eval_set(cfg);
  if (puzzles > 0 && static_cast<std::size_t>(puzzles) < eval.size()) eval.resize(static_cast<std::size_t>(puzzles));
  if (eval.empty()) throw RunError(ErrorCategory::kData, "no eval puzzles to diagnose");
  fs::create_directories(out_dir);
  const auto batch = sudoku::make_batch(eval);
  dispatch(cfg.train.precision, [&](auto tag) {
    using T = decltype(tag);
    NoGradGuard no_grad;
    const auto model = model_from_checkpoint<T>(loaded);
    auto opts = ActOptions::from_config(cfg.act);
    opts.k_run = k_run.value_or(cfg.model.max_ponder);
    opts.capture_steps.resize(static_cast<std::size_t>(opts.k_run));
    std::iota(opts.capture_steps.begin(), opts.capture_steps.end(), 0);
    const auto out = model_forward(model, batch, opts);
    JsonlWriter diag(out_dir / "diagnostics.jsonl");
    for (const auto& d : out.steps) diag.write(to_json(d));
    const auto s = summarize_halting(out.halt, cfg.model.mem_tokens, cfg.model.seq_len);
    diag.write({{"type", "halt_summary"},
                {"mean_halt", s.mean_halt},
                {"halt_min", s.min_halt},
                {"halt_max", s.max_halt},
                {"mem_mean_halt", s.mem_mean_halt}});
    write_attention_dump(out_dir / "attention.bin", out.attention, cfg.model.mem_tokens, cfg.model.seq_len);
    const auto preds = dump_per_step_predictions(model, batch, opts.k_run, cfg.act.epsilon);
    write_prediction_dump(out_dir / "predictions.jsonl", batch, preds);
    return 0;
  });
}

std::size_t SweepGrid::cells() const {
  std::size_t n = 1;
  for (const auto& [key, values] : axes) n *= values.size();
  return n;
}

std::vector<std::pair<std::string, std::string>> SweepGrid::cell(std::size_t i) const {
  std::vector<std::pair<std::string, std::string>> out(axes.size());
  for (std::size_t a = axes.size(); a-- > 0;) {
    const auto& values = axes[a].second;
    out[a] = {axes[a].first, values[i % values.size()]};
    i /= values.size();
  }
  return out;
}

RunSpec parse_run_spec(const std::string& text,
                       const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunSpec spec;
  for (const auto& [key, value] : parse_ini(text)) {
    if (key.rfind("sweep.", 0) == 0) {
      const auto target = key.substr(6);
      spec.base.set(target, split_list(value).empty() ? value : split_list(value).front());
      spec.grid.axes.emplace_back(target, split_list(value));
      if (spec.grid.axes.back().second.empty()) throw ConfigError("sweep key '" + target + "' has no values");
    } else {
      spec.base.set(key, value);
    }
  }
  for (const auto& [key, value] : overrides) {
    spec.base.set(key, value);
    std::erase_if(spec.grid.axes, [&](const auto& axis) { return axis.first == key; });
  }
  // Check every swept value parses before anything runs.
  for (const auto& [key, values] : spec.grid.axes) {
    RunConfig probe = spec.base;
    for (const auto& v : values) probe.set(key, v);
  }
  return spec;
}

RunSpec load_run_spec(const std::string& path_or_preset,
                      const std::vector<std::pair<std::string, std::string>>& overrides) {
  const auto names = preset_names();
  if (std::find(names.begin(), names.end(), path_or_preset) != names.end() &&
      !fs::exists(path_or_preset)) {
    return parse_run_spec(preset_text(path_or_preset), overrides);
  }
  if (!fs::exists(path_or_preset)) {
    throw RunError(ErrorCategory::kConfig, "no config file or preset named '" + path_or_preset + "'");
  }
  return parse_run_spec(read_text(path_or_preset), overrides);
}

namespace {

std::string short_key(const std::string& key) {
  const auto dot = key.rfind('.');
  return dot == std::string::npos ? key : key.substr(dot + 1);
}

std::string cell_name(const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::string name;
  for (const auto& [k, v] : overrides) {
    if (!name.empty()) name += "_";
    name += short_key(k) + "=" + v;
  }
  return name.empty() ? "single" : name;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::string fixed(double v, int digits) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << v;
  return out.str();
}

}  // namespace

std::vector<SweepCellResult> run_sweep(const RunSpec& spec, const fs::path& root,
                                       const RunOptions& options) {
  const fs::path dir = root / spec.base.name;
  fs::create_directories(dir);
  std::vector<SweepCellResult> results;
  const std::size_t n = spec.grid.cells();
  for (std::size_t i = 0; i < n; ++i) {
    SweepCellResult r;
    r.overrides = spec.grid.cell(i);
    r.run_name = cell_name(r.overrides);
    RunConfig cfg = spec.base;
    try {
      for (const auto& [k, v] : r.overrides) cfg.set(k, v);
      cfg.name = spec.base.name + "/" + r.run_name;
      r.summary = train_run(cfg, dir / r.run_name, options);
      r.ok = true;
    } catch (const std::exception& e) {
      r.error = e.what();
      if (options.log) *options.log << "[" << cfg.name << "] failed: " << r.error << std::endl;
    }
    results.push_back(std::move(r));
    write_sweep_csvs(dir, spec, results);
  }
  return results;
}

void write_sweep_csvs(const fs::path& dir, const RunSpec& spec,
                      std::span<const SweepCellResult> results) {
  std::vector<std::string> keys;
  for (const auto& [k, v] : spec.grid.axes) keys.push_back(k);

  std::ostringstream runs;
  for (const auto& k : keys) runs << csv_field(k) << ',';
  runs << "run,status,em,cell_accuracy,mean_halt,halt_min,halt_max,token_steps,steps,seconds,error\n";
  for (const auto& r : results) {
    for (const auto& [k, v] : r.overrides) runs << csv_field(v) << ',';
    RunConfig cfg = spec.base;
    for (const auto& [k, v] : r.overrides) cfg.set(k, v);
    const auto& e = r.summary.final_eval;
    runs << csv_field(r.run_name) << ',' << (r.ok ? "ok" : "failed") << ',';
    if (r.ok) {
      runs << exact(e.em) << ',' << exact(e.cell_accuracy) << ',' << exact(e.mean_halt) << ','
           << e.halt_min << ',' << e.halt_max << ','
           << token_steps(cfg.model.mem_tokens, cfg.model.seq_len, e.mean_halt) << ','
           << r.summary.steps << ',' << fixed(r.summary.seconds, 1) << ",\n";
    } else {
      runs << ",,,,,,,," << csv_field(r.error) << '\n';
    }
  }
  write_text(dir / "runs.csv", runs.str());

  // Group by everything but the seed.
  std::vector<std::string> seeds;
  for (const auto& [k, values] : spec.grid.axes) {
    if (k == "train.seed") seeds = values;
  }
  if (seeds.empty()) seeds.push_back(std::to_string(spec.base.train.seed));
  std::vector<std::string> group_keys;
  for (const auto& k : keys) {
    if (k != "train.seed") group_keys.push_back(k);
  }
  std::vector<std::vector<std::string>> groups;
  auto group_of = [&](const SweepCellResult& r) {
    std::vector<std::string> g;
    for (const auto& [k, v] : r.overrides) {
      if (k != "train.seed") g.push_back(v);
    }
    return g;
  };
  for (const auto& r : results) {
    const auto g = group_of(r);
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
  }

  std::ostringstream summary;
  for (const auto& k : group_keys) summary << csv_field(k) << ',';
  summary << "mem_tokens,seeds_ok,seeds_failed";
  for (const auto& s : seeds) summary << ",em_pct_seed_" << s;
  summary << ",em_pct_mean,em_pct_std,halt_mean,halt_min,halt_max,token_steps\n";
  for (const auto& g : groups) {
    RunConfig cfg = spec.base;
    std::vector<const SweepCellResult*> members;
    for (const auto& r : results) {
      if (group_of(r) == g) members.push_back(&r);
    }
    for (const auto& [k, v] : members.front()->overrides) {
      if (k != "train.seed") cfg.set(k, v);
    }
    for (const auto& v : g) summary << csv_field(v) << ',';
    std::vector<double> ems, halts;
    int hmin = std::numeric_limits<int>::max(), hmax = 0, failed = 0;
    std::map<std::string, std::string> per_seed;
    for (const auto* r : members) {
      std::string seed = std::to_string(spec.base.train.seed);
      for (const auto& [k, v] : r->overrides) {
        if (k == "train.seed") seed = v;
      }
      if (!r->ok) {
        per_seed[seed] = "failed";
        ++failed;
        continue;
      }
      const auto& e = r->summary.final_eval;
      per_seed[seed] = fixed(100.0 * e.em, 2);
      ems.push_back(100.0 * e.em);
      halts.push_back(e.mean_halt);
      hmin = std::min(hmin, e.halt_min);
      hmax = std::max(hmax, e.halt_max);
    }
    summary << cfg.model.mem_tokens << ',' << ems.size() << ',' << failed;
    for (const auto& s : seeds) summary << ',' << (per_seed.count(s) ? per_seed[s] : "");
    if (ems.empty()) {
      summary << ",,,,,,\n";
      continue;
    }
    const double mean = std::accumulate(ems.begin(), ems.end(), 0.0) / static_cast<double>(ems.size());
    std::string std_field;
    if (ems.size() > 1) {
      double ss = 0.0;
      for (double e : ems) ss += (e - mean) * (e - mean);
      std_field = fixed(std::sqrt(ss / static_cast<double>(ems.size() - 1)), 2);
    }
    const double halt = std::accumulate(halts.begin(), halts.end(), 0.0) / static_cast<double>(halts.size());
    summary << ',' << fixed(mean, 2) << ',' << std_field << ',' << fixed(halt, 2) << ',' << hmin << ','
            << hmax << ',' << token_steps(cfg.model.mem_tokens, cfg.model.seq_len, halt) << '\n';
  }
  write_text(dir / "summary.csv", summary.str());
}

template Model<float> model_from_checkpoint(const LoadedCheckpoint&);
template Model<double> model_from_checkpoint(const LoadedCheckpoint&);
template std::vector<ExtendedRow> extended_em_curve(const Model<float>&, std::span<const sudoku::Puzzle>,
                                                    int, const ActOptions&, int);
template std::vector<ExtendedRow> extended_em_curve(const Model<double>&, std::span<const sudoku::Puzzle>,
                                                    int, const ActOptions&, int);

}  // namespace utm
