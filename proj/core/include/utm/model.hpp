#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "utm/checkpoint.hpp"
#include "utm/config.hpp"
#include "utm/ops.hpp"
#include "utm/sudoku.hpp"
#include "utm/tensor.hpp"

namespace utm {

// Learned weights. Exactly one block exists; every iteration reuses it.
template <typename T>
struct ModelParams {
  Tensor<T> token_embedding;  // [vocab, H]
  Tensor<T> type_embedding;   // [2, H]; row 0 memory, row 1 sequence
  Tensor<T> step_embedding;   // [K, H]
  Tensor<T> memory;           // [T, H]; undefined when T = 0

  // First and second pre-norms: DerfNorm uses alpha/shift, RMSNorm uses gain.
  Tensor<T> norm1_alpha, norm1_shift, norm1_gain;
  Tensor<T> norm2_alpha, norm2_shift, norm2_gain;

  Tensor<T> wq, wk, wv, wo;    // [H, H]
  Tensor<T> q_gain, k_gain;    // [heads]
  Tensor<T> w_gate, w_up;      // [H, F]
  Tensor<T> w_down;            // [F, H]

  Tensor<T> router_weight;     // [H, 1]
  Tensor<T> router_bias;       // [1]
  Tensor<T> output_proj;       // [H, vocab]

  // Every defined parameter with its stable checkpoint name.
  std::vector<std::pair<std::string, Tensor<T>*>> named();
  std::vector<std::pair<std::string, const Tensor<T>*>> named() const;

  // Deep copy (fresh leaves with the same requires_grad flags).
  ModelParams clone() const;
};

// Batch-averaged post-softmax attention, [heads, rows, rows].
struct AttentionMap {
  int heads = 0;
  int rows = 0;
  std::vector<double> weights;
};

template <typename T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  Model(ModelConfig config, ModelParams<T> params);

  const ModelConfig& config() const { return config_; }
  ModelParams<T>& params() { return params_; }
  const ModelParams<T>& params() const { return params_; }
  std::int64_t param_count() const;

  // Token + type embedding (and memory bank rows) before any step embedding,
  // [B, T+L, H].
  Tensor<T> base_embedding(const sudoku::PuzzleBatch& batch) const;
  // base_embedding plus the step embedding for `step` (wrapping mod K).
  Tensor<T> embed_inputs(const sudoku::PuzzleBatch& batch, int step) const;
  Tensor<T> add_step_embedding(const Tensor<T>& h, int step) const;
  int step_index(int step) const;

  Tensor<T> derf_norm(const Tensor<T>& x, const Tensor<T>& alpha, const Tensor<T>& shift) const;
  Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain) const;

  // Bidirectional multi-head attention over all rows. When `capture` is not
  // null it receives the batch-averaged attention weights.
  Tensor<T> attention(const Tensor<T>& x, AttentionMap* capture = nullptr) const;
  Tensor<T> ffn(const Tensor<T>& x) const;
  Tensor<T> block_forward(const Tensor<T>& x, AttentionMap* capture = nullptr) const;

  // Halting probability per row, [B, T+L].
  Tensor<T> router_prob(const Tensor<T>& h) const;
  // Predictions for sequence rows only, [B, L, vocab].
  Tensor<T> output_logits(const Tensor<T>& h) const;

  // RoPE index per row: memory 0..T-1, sequence T..T+L-1.
  const std::vector<std::int64_t>& positions() const { return positions_; }

  Checkpoint to_checkpoint() const;
  void load_checkpoint(const Checkpoint& ckpt);

 private:
  Tensor<T> norm1(const Tensor<T>& x) const;
  Tensor<T> norm2(const Tensor<T>& x) const;

  ModelConfig config_;
  ModelParams<T> params_;
  std::vector<std::int64_t> positions_;
};

// Parameter count without allocating a model.
std::int64_t count_parameters(const ModelConfig& config);

extern template struct ModelParams<float>;
extern template struct ModelParams<double>;
extern template class Model<float>;
extern template class Model<double>;

}  // namespace utm
