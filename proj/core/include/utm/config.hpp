#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace utm {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class NormKind { kDerf, kRms };
enum class Precision { kF32, kF64 };
enum class PonderScope { kAllTokens, kSequenceTokens };
enum class LossCells { kAll, kBlanks };
enum class RampShape { kLinear, kCosine };
enum class DataSource { kMicro, kCsv };

struct ModelConfig {
  int hidden = 512;
  int heads = 8;
  int head_dim = 64;
  int vocab = 11;
  int mem_tokens = 16;
  int max_ponder = 18;  // K_train; the step-embedding table has this many rows
  NormKind norm = NormKind::kDerf;
  double router_bias_init = -3.0;
  bool act_enabled = true;
  int seq_len = 81;
  int ffn_width = 0;  // 0 derives round-to-8(8/3 * hidden)
  bool qk_norm_before_rope = true;
  bool step_embedding_every_step = true;
  double rope_base = 10000.0;
  double init_std = 0.02;

  int ffn_inner() const;
  int rows() const { return mem_tokens + seq_len; }
  void validate() const;
};

struct ActConfig {
  double epsilon = 0.01;
  double lambda = 0.0;
  int lambda_warmup_steps = 0;
  RampShape lambda_ramp = RampShape::kLinear;
  int k_run = 0;  // 0 means "use max_ponder"
  PonderScope ponder_scope = PonderScope::kAllTokens;
  bool freeze_halted = false;

  void validate() const;
};

struct TrainConfig {
  double lr_max = 3e-4;
  int batch_size = 256;
  int epochs = 4;
  int max_steps = 0;  // 0 derives epochs * ceil(train_size / batch_size)
  double ema_decay = 0.999;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
  int seed = 0;
  int eval_every = 1000;
  int checkpoint_every = 0;  // 0 writes only the final checkpoint
  Precision precision = Precision::kF32;
  LossCells loss_cells = LossCells::kAll;
  std::string attention_capture_steps;  // comma list; empty means {0, K/2, K-1}

  void validate() const;
};

struct DataConfig {
  DataSource source = DataSource::kMicro;
  int train_size = 50000;
  int eval_size = 2000;
  int givens_min = 4;
  int givens_max = 12;
  int data_seed = 1234;
  bool augment = false;
  std::string train_csv;
  std::string eval_csv;

  void validate(const ModelConfig& model) const;
};

struct RunConfig {
  std::string name = "run";
  ModelConfig model;
  ActConfig act;
  TrainConfig train;
  DataConfig data;

  void validate() const;

  // Flat "section.key" view; every key is always present.
  std::map<std::string, std::string> to_map() const;
  std::string to_ini() const;

  // Applies "section.key" = value pairs on top of defaults. Unknown keys and
  // unparsable values throw ConfigError naming the key.
  void apply(const std::map<std::string, std::string>& values);
  void set(const std::string& key, const std::string& value);

  static RunConfig from_ini_text(const std::string& text);
  static RunConfig from_file(const std::filesystem::path& path);
};

struct ConfigKeyDoc {
  std::string key;
  std::string default_value;
  std::string doc;
};
std::vector<ConfigKeyDoc> config_key_docs();

// Parses INI text into ordered (section.key, value) pairs. Used for both run
// configs and sweep grids.
std::vector<std::pair<std::string, std::string>> parse_ini(const std::string& text);

// Shipped presets: micro-default, bias-sweep, memory-curve, lambda-warmup,
// fixed-depth, rmsnorm-ablation, paper-full.
std::vector<std::string> preset_names();
std::string preset_text(const std::string& name);

// Comma-separated list helpers.
std::vector<std::string> split_list(const std::string& text);

}  // namespace utm
