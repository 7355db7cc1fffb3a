#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "utm/config.hpp"

namespace utm {

namespace {

using Pairs = std::vector<std::pair<std::string, std::string>>;

// Desk-scale settings shared by every micro preset: 4x4 boards, hidden 128,
// 4 heads, T=4, K=8, deep-start router, no ponder cost.
const Pairs kMicro = {
    {"model.hidden", "128"},
    {"model.heads", "4"},
    {"model.head_dim", "32"},
    {"model.vocab", "6"},
    {"model.seq_len", "16"},
    {"model.mem_tokens", "4"},
    {"model.max_ponder", "8"},
    {"model.router_bias_init", "-3"},
    {"act.lambda", "0"},
    {"train.lr", "1e-3"},
    {"train.batch_size", "64"},
    {"train.epochs", "3"},
    {"train.ema_decay", "0.99"},
    {"train.weight_decay", "0.01"},
    {"train.eval_every", "250"},
    {"train.checkpoint_every", "500"},
    {"data.source", "micro"},
    {"data.train_size", "50000"},
    {"data.eval_size", "2000"},
    {"data.givens_min", "4"},
    {"data.givens_max", "12"},
};

struct Preset {
  std::string name;
  Pairs settings;  // applied on top of kMicro unless full_scale
  Pairs sweep;
  bool full_scale = false;
};

const std::vector<Preset>& presets() {
  static const std::vector<Preset> all = {
      {"micro-default", {{"run.name", "micro-default"}}, {}},
      {"bias-sweep",
       {{"run.name", "bias-sweep"}},
       {{"model.router_bias_init", "-3,0,1"}}},
      {"memory-curve",
       {{"run.name", "memory-curve"}},
       {{"model.mem_tokens", "0,2,4,8,16"}, {"train.seed", "0,1,2"}}},
      {"lambda-warmup",
       {{"run.name", "lambda-warmup"}, {"act.lambda", "0.001"}, {"act.lambda_warmup_steps", "1000"}},
       {{"act.lambda_warmup_steps", "0,1000"}}},
      {"fixed-depth",
       {{"run.name", "fixed-depth"}, {"model.act", "false"}},
       {{"model.act", "false,true"}}},
      {"rmsnorm-ablation",
       {{"run.name", "rmsnorm-ablation"}},
       {{"model.norm", "derf,rms"}}},
      {"paper-full",
       {{"run.name", "paper-full"},
        {"data.source", "csv"},
        {"data.train_csv", "data/sudoku-extreme/train.csv"},
        {"data.eval_csv", "data/sudoku-extreme/test.csv"},
        {"data.train_size", "0"},
        {"data.eval_size", "12800"}},
       {},
       true},
  };
  return all;
}

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& p : presets()) out.push_back(p.name);
  return out;
}

std::string preset_text(const std::string& name) {
  const auto& all = presets();
  const auto it = std::find_if(all.begin(), all.end(), [&](const Preset& p) { return p.name == name; });
  if (it == all.end()) throw ConfigError("unknown preset '" + name + "'");
  RunConfig cfg;
  if (!it->full_scale) {
    for (const auto& [k, v] : kMicro) cfg.set(k, v);
  }
  for (const auto& [k, v] : it->settings) cfg.set(k, v);
  std::string text = cfg.to_ini();
  if (!it->sweep.empty()) {
    text += "\n[sweep]\n";
    for (const auto& [k, v] : it->sweep) text += k + " = " + v + "\n";
  }
  return text;
}

}  // namespace utm
