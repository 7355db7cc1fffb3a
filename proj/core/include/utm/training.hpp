#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "utm/act.hpp"
#include "utm/config.hpp"
#include "utm/model.hpp"

namespace utm {

// Ponder coefficient at `step`: ramps 0 -> lambda over warmup_steps, then
// holds lambda. No warmup means lambda from step 0.
double lambda_at_step(std::int64_t step, double lambda, std::int64_t warmup_steps,
                      RampShape ramp = RampShape::kLinear);

// lr_max * (1 + cos(pi * step / total)) / 2, clamped to [0, total].
double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max);

// Cross-entropy over the selected cells plus lambda_t * ponder. `ponder` may
// be undefined (fixed depth); the term is also skipped when lambda_t is 0.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> cell_mask, const Tensor<T>& ponder,
                     double lambda_t);

// Decoupled weight decay Adam over a fixed list of parameters.
template <typename T>
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW(std::vector<std::pair<std::string, Tensor<T>*>> params, Options options);

  // Applies one update using the gradients currently stored on the params.
  // Parameters without a gradient are treated as having a zero gradient.
  void step(double lr);
  std::int64_t steps() const { return t_; }

  void save(Checkpoint& ckpt, const std::string& prefix) const;
  void load(const Checkpoint& ckpt, const std::string& prefix);

 private:
  std::vector<std::pair<std::string, Tensor<T>*>> params_;
  Options opt_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

// ema <- decay * ema + (1 - decay) * params, parameter by parameter.
template <typename T>
void ema_update(ModelParams<T>& ema, const ModelParams<T>& params, double decay);

// Global L2 norm of all parameter gradients; scales them down to max_norm
// when larger. Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ModelParams<T>& params, double max_norm);

// Fraction of puzzles whose `cells` predictions all equal the targets.
double exact_match(std::span<const std::int32_t> predictions,
                   std::span<const std::int32_t> targets, int cells);

// Table 2 accounting: (T + L) x mean halt, rounded to the nearest integer.
std::int64_t token_steps(int mem_tokens, int seq_len, double mean_halt);

struct EvalResult {
  double em = 0.0;
  double cell_accuracy = 0.0;
  double mean_halt = 0.0;
  int halt_min = 0;
  int halt_max = 0;
  int puzzles = 0;
};

// Greedy evaluation with halting as in training (no gradient).
template <typename T>
EvalResult evaluate(const Model<T>& model, std::span<const sudoku::Puzzle> puzzles,
                    const ActOptions& options, int batch_size = 256);

// Argmax digit per sequence cell, [B x L].
template <typename T>
std::vector<std::int32_t> greedy_predictions(const Model<T>& model, const Tensor<T>& output);

struct Datasets {
  std::vector<sudoku::Puzzle> train;
  std::vector<sudoku::Puzzle> eval;
};

// Generates (micro) or loads (csv) the train / eval sets for a config. Micro
// eval grids never appear in the train set.
Datasets load_datasets(const RunConfig& config);

}  // namespace utm
