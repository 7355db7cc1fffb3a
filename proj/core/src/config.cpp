#include "utm/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace utm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  const auto s = trim(v);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  const auto s = trim(v);
  double out = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(out)) {
    throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  const auto s = trim(v);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

struct Binding {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
  std::string doc;
};

template <typename Member>
Binding int_key(std::string key, Member member, std::string doc) {
  return {key,
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_int(key, v); },
          [member](const RunConfig& c) { return std::to_string(member(c)); },
          std::move(doc)};
}

template <typename Member>
Binding double_key(std::string key, Member member, std::string doc) {
  return {key,
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_double(key, v); },
          [member](const RunConfig& c) { return fmt_double(member(c)); },
          std::move(doc)};
}

template <typename Member>
Binding bool_key(std::string key, Member member, std::string doc) {
  return {key,
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_bool(key, v); },
          [member](const RunConfig& c) {
            return std::string(member(c) ? "true" : "false");
          },
          std::move(doc)};
}

template <typename Member>
Binding string_key(std::string key, Member member, std::string doc) {
  return {key, [member](RunConfig& c, const std::string& v) { member(c) = trim(v); },
          [member](const RunConfig& c) { return member(c); },
          std::move(doc)};
}

template <typename E, typename Member>
Binding enum_key(std::string key, Member member, std::vector<std::pair<std::string, E>> names,
                 std::string doc) {
  return {key,
          [member, key, names](RunConfig& c, const std::string& v) {
            const auto s = trim(v);
            for (const auto& [n, e] : names) {
              if (n == s) {
                member(c) = e;
                return;
              }
            }
            std::string allowed;
            for (const auto& [n, e] : names) allowed += (allowed.empty() ? "" : "|") + n;
            throw ConfigError("config key '" + key + "': expected one of " + allowed + ", got '" +
                              v + "'");
          },
          [member, names](const RunConfig& c) {
            for (const auto& [n, e] : names) {
              if (e == member(c)) return n;
            }
            return std::string("?");
          },
          std::move(doc)};
}

#define UTM_FIELD(path) [](auto& c) -> auto& { return c.path; }

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = {
      string_key("run.name", UTM_FIELD(name), "run label used for the run directory"),
      int_key("model.hidden", UTM_FIELD(model.hidden), "feature width"),
      int_key("model.heads", UTM_FIELD(model.heads), "attention heads"),
      int_key("model.head_dim", UTM_FIELD(model.head_dim), "per-head width; hidden = heads*head_dim"),
      int_key("model.vocab", UTM_FIELD(model.vocab), "token alphabet size"),
      int_key("model.mem_tokens", UTM_FIELD(model.mem_tokens), "learned memory tokens T"),
      int_key("model.max_ponder", UTM_FIELD(model.max_ponder), "trained iteration ceiling K"),
      enum_key<NormKind>("model.norm", UTM_FIELD(model.norm),
                         {{"derf", NormKind::kDerf}, {"rms", NormKind::kRms}},
                         "block normalization: erf(a*x+s) or RMSNorm"),
      double_key("model.router_bias_init", UTM_FIELD(model.router_bias_init),
                 "initial halting-router bias (-3 deep start, 0 default, +1 Graves)"),
      bool_key("model.act", UTM_FIELD(model.act_enabled),
               "ACT blend when true, last-step output (fixed depth) when false"),
      int_key("model.seq_len", UTM_FIELD(model.seq_len), "cells per puzzle (16 micro, 81 full)"),
      int_key("model.ffn_width", UTM_FIELD(model.ffn_width), "SwiGLU inner width; 0 derives it"),
      bool_key("model.qk_norm_before_rope", UTM_FIELD(model.qk_norm_before_rope),
               "apply QK RMS normalization before the rotary embedding"),
      bool_key("model.step_embedding_every_step", UTM_FIELD(model.step_embedding_every_step),
               "add the step embedding at every iteration (false: first iteration only)"),
      double_key("model.rope_base", UTM_FIELD(model.rope_base), "rotary frequency base"),
      double_key("model.init_std", UTM_FIELD(model.init_std),
                 "std of embedding, memory and router initialization"),
      double_key("act.epsilon", UTM_FIELD(act.epsilon), "halt when cumulative p reaches 1-epsilon"),
      double_key("act.lambda", UTM_FIELD(act.lambda), "ponder-cost coefficient"),
      int_key("act.lambda_warmup_steps", UTM_FIELD(act.lambda_warmup_steps),
              "steps over which lambda ramps up from 0"),
      enum_key<RampShape>("act.lambda_ramp", UTM_FIELD(act.lambda_ramp),
                          {{"linear", RampShape::kLinear}, {"cosine", RampShape::kCosine}},
                          "lambda warmup ramp shape"),
      int_key("act.k_run", UTM_FIELD(act.k_run), "iteration budget for this run; 0 uses max_ponder"),
      enum_key<PonderScope>("act.ponder_scope", UTM_FIELD(act.ponder_scope),
                            {{"all", PonderScope::kAllTokens},
                             {"sequence", PonderScope::kSequenceTokens}},
                            "tokens averaged into the ponder cost"),
      bool_key("act.freeze_halted", UTM_FIELD(act.freeze_halted),
               "hold halted tokens' state fixed in later iterations"),
      double_key("train.lr", UTM_FIELD(train.lr_max), "peak AdamW learning rate (cosine decay to 0)"),
      int_key("train.batch_size", UTM_FIELD(train.batch_size), "puzzles per step"),
      int_key("train.epochs", UTM_FIELD(train.epochs), "passes over the training set"),
      int_key("train.max_steps", UTM_FIELD(train.max_steps),
              "total optimizer steps; 0 derives it from epochs"),
      double_key("train.ema_decay", UTM_FIELD(train.ema_decay), "EMA decay of evaluation weights"),
      double_key("train.weight_decay", UTM_FIELD(train.weight_decay), "decoupled weight decay"),
      double_key("train.adam_beta1", UTM_FIELD(train.adam_beta1), "Adam first-moment decay"),
      double_key("train.adam_beta2", UTM_FIELD(train.adam_beta2), "Adam second-moment decay"),
      double_key("train.adam_eps", UTM_FIELD(train.adam_eps), "Adam denominator epsilon"),
      double_key("train.clip_norm", UTM_FIELD(train.clip_norm), "global gradient-norm clip; 0 off"),
      int_key("train.seed", UTM_FIELD(train.seed), "initialization and shuffling seed"),
      int_key("train.eval_every", UTM_FIELD(train.eval_every), "steps between evaluations"),
      int_key("train.checkpoint_every", UTM_FIELD(train.checkpoint_every),
              "steps between resumable checkpoints; 0 only at the end"),
      enum_key<Precision>("train.precision", UTM_FIELD(train.precision),
                          {{"f32", Precision::kF32}, {"f64", Precision::kF64}},
                          "scalar precision"),
      enum_key<LossCells>("train.loss_cells", UTM_FIELD(train.loss_cells),
                          {{"all", LossCells::kAll}, {"blanks", LossCells::kBlanks}},
                          "cells that contribute cross-entropy"),
      string_key("train.attention_capture_steps", UTM_FIELD(train.attention_capture_steps),
                 "0-based iterations whose attention is captured; empty = 0,K/2,K-1"),
      enum_key<DataSource>("data.source", UTM_FIELD(data.source),
                           {{"micro", DataSource::kMicro}, {"csv", DataSource::kCsv}},
                           "generated 4x4 puzzles or CSV files"),
      int_key("data.train_size", UTM_FIELD(data.train_size), "generated training puzzles"),
      int_key("data.eval_size", UTM_FIELD(data.eval_size), "held-out evaluation puzzles"),
      int_key("data.givens_min", UTM_FIELD(data.givens_min), "minimum givens per generated puzzle"),
      int_key("data.givens_max", UTM_FIELD(data.givens_max), "maximum givens per generated puzzle"),
      int_key("data.seed", UTM_FIELD(data.data_seed), "puzzle generation seed"),
      bool_key("data.augment", UTM_FIELD(data.augment), "random validity-preserving symmetries"),
      string_key("data.train_csv", UTM_FIELD(data.train_csv), "training CSV (source = csv)"),
      string_key("data.eval_csv", UTM_FIELD(data.eval_csv), "evaluation CSV (source = csv)"),
  };
  return table;
}

#undef UTM_FIELD

const Binding& find_binding(const std::string& key) {
  for (const auto& b : bindings()) {
    if (b.key == key) return b;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

int ModelConfig::ffn_inner() const {
  if (ffn_width > 0) return ffn_width;
  const double raw = 8.0 / 3.0 * hidden;
  return static_cast<int>(std::lround(raw / 8.0)) * 8;
}

void ModelConfig::validate() const {
  if (hidden <= 0 || heads <= 0 || head_dim <= 0) throw ConfigError("model widths must be positive");
  if (hidden != heads * head_dim) {
    throw ConfigError("model.hidden (" + std::to_string(hidden) + ") must equal heads*head_dim (" +
                      std::to_string(heads * head_dim) + ")");
  }
  if (head_dim % 2 != 0) throw ConfigError("model.head_dim must be even for the rotary embedding");
  if (mem_tokens < 0) throw ConfigError("model.mem_tokens must be >= 0");
  if (max_ponder < 1) throw ConfigError("model.max_ponder must be >= 1");
  if (seq_len < 1) throw ConfigError("model.seq_len must be >= 1");
  if (vocab < 2) throw ConfigError("model.vocab must be >= 2");
  if (ffn_inner() <= 0) throw ConfigError("model.ffn_width must be positive");
}

void ActConfig::validate() const {
  if (!(epsilon > 0.0 && epsilon <= 0.1)) throw ConfigError("act.epsilon must be in (0, 0.1]");
  if (lambda < 0.0) throw ConfigError("act.lambda must be >= 0");
  if (lambda_warmup_steps < 0) throw ConfigError("act.lambda_warmup_steps must be >= 0");
  if (k_run < 0) throw ConfigError("act.k_run must be >= 0");
}

void TrainConfig::validate() const {
  if (lr_max <= 0) throw ConfigError("train.lr must be positive");
  if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
  if (epochs <= 0 && max_steps <= 0) throw ConfigError("train.epochs or train.max_steps must be positive");
  if (ema_decay < 0 || ema_decay > 1) throw ConfigError("train.ema_decay must be in [0, 1]");
  if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
  if (eval_every <= 0) throw ConfigError("train.eval_every must be positive");
  if (clip_norm < 0) throw ConfigError("train.clip_norm must be >= 0");
  for (const auto& s : split_list(attention_capture_steps)) parse_int("train.attention_capture_steps", s);
}

void DataConfig::validate(const ModelConfig& model) const {
  if (source == DataSource::kMicro) {
    if (model.seq_len != 16) throw ConfigError("data.source = micro needs model.seq_len = 16");
    if (model.vocab < 6) throw ConfigError("data.source = micro needs model.vocab >= 6");
    if (givens_min < 4 || givens_max > 12 || givens_min > givens_max) {
      throw ConfigError("data.givens_min/givens_max must satisfy 4 <= min <= max <= 12");
    }
    if (train_size <= 0 || eval_size <= 0) throw ConfigError("data sizes must be positive");
  } else {
    if (model.seq_len != 81) throw ConfigError("data.source = csv needs model.seq_len = 81");
    if (model.vocab < 11) throw ConfigError("data.source = csv needs model.vocab >= 11");
    if (train_csv.empty() || eval_csv.empty()) {
      throw ConfigError("data.source = csv needs data.train_csv and data.eval_csv");
    }
  }
}

void RunConfig::validate() const {
  model.validate();
  act.validate();
  train.validate();
  data.validate(model);
}

std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& b : bindings()) out[b.key] = b.get(*this);
  return out;
}

std::string RunConfig::to_ini() const {
  std::ostringstream out;
  std::string current;
  for (const auto& b : bindings()) {
    const auto dot = b.key.find('.');
    const auto section = b.key.substr(0, dot);
    if (section != current) {
      if (!current.empty()) out << '\n';
      out << '[' << section << "]\n";
      current = section;
    }
    out << b.key.substr(dot + 1) << " = " << b.get(*this) << '\n';
  }
  return out.str();
}

void RunConfig::set(const std::string& key, const std::string& value) {
  find_binding(key).set(*this, value);
}

void RunConfig::apply(const std::map<std::string, std::string>& values) {
  for (const auto& [k, v] : values) set(k, v);
}

std::vector<std::pair<std::string, std::string>> parse_ini(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      throw ConfigError("config key '" + section + "' appears outside any [section]");
    }
    for (const auto& [key, value] : body) {
      out.emplace_back(section + "." + key, value.get_value<std::string>());
    }
  }
  return out;
}

RunConfig RunConfig::from_ini_text(const std::string& text) {
  RunConfig cfg;
  for (const auto& [k, v] : parse_ini(text)) cfg.set(k, v);
  return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_ini_text(ss.str());
}

std::vector<ConfigKeyDoc> config_key_docs() {
  const RunConfig defaults;
  std::vector<ConfigKeyDoc> out;
  for (const auto& b : bindings()) out.push_back({b.key, b.get(defaults), b.doc});
  return out;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace utm
