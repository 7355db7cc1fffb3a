#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "utm/config.hpp"
#include "utm/diagnostics.hpp"
#include "utm/model.hpp"

namespace utm {

// Per-token halting record for one forward pass. Token index is b * rows + r.
struct HaltState {
  int tokens = 0;
  int steps = 0;                     // iterations actually executed
  std::vector<double> cum_prob;      // sum of p_k over non-halting steps
  std::vector<std::uint8_t> halted;
  std::vector<int> halt_step;        // 1-based
  std::vector<double> weights;       // [steps x tokens] blend weights w_k
  std::vector<double> remainder;     // R = 1 - sum_{k<N} p_k = w_N

  double weight(int step, int token) const {
    return weights[static_cast<std::size_t>(step) * static_cast<std::size_t>(tokens) +
                   static_cast<std::size_t>(token)];
  }
  // Mean of N + R over the selected tokens (all when mask is empty).
  double ponder_cost(std::span<const std::uint8_t> mask = {}) const;
};

// The halting rule, fed one step of router probabilities at a time. A running
// token halts at the first step where its cumulative probability would reach
// 1 - epsilon, or at step k_run, taking the remainder as its final weight.
class HaltTracker {
 public:
  HaltTracker(int tokens, int k_run, double epsilon);

  void observe(std::span<const double> probs);

  // After observe(): tokens whose weight this step is p_k.
  std::span<const std::uint8_t> continuing() const { return continuing_; }
  // After observe(): tokens that halted this step (weight = remainder).
  std::span<const std::uint8_t> halting_now() const { return halting_now_; }
  bool all_halted() const { return halted_count_ == state_.tokens; }
  const HaltState& state() const { return state_; }
  int k_run() const { return k_run_; }

 private:
  int k_run_;
  double threshold_;
  int halted_count_ = 0;
  HaltState state_;
  std::vector<std::uint8_t> continuing_;
  std::vector<std::uint8_t> halting_now_;
};

// Runs the halting rule over probabilities laid out [steps x tokens].
HaltState compute_halting(std::span<const double> probs, int tokens, int k_run, double epsilon);

struct ActOptions {
  int k_run = 0;  // 0 uses the model's max_ponder
  double epsilon = 0.01;
  PonderScope ponder_scope = PonderScope::kAllTokens;
  bool freeze_halted = false;
  bool stop_when_all_halted = false;
  std::vector<int> capture_steps;  // 0-based iterations whose attention is kept
  bool collect_diagnostics = true;
  // Replaces the router with fixed probabilities p(step, token); the router
  // is then not evaluated at all.
  std::function<double(int step, int token)> prob_override;

  static ActOptions from_config(const ActConfig& act);
};

template <typename T>
struct ActOutput {
  Tensor<T> output;  // [B, T+L, H]: ACT blend, or h_K in fixed-depth mode
  Tensor<T> ponder;  // scalar mean N + R, differentiable through R; undefined in fixed-depth mode
  HaltState halt;
  std::vector<StepDiagnostics> steps;
  std::vector<std::pair<int, AttentionMap>> attention;
};

template <typename T>
ActOutput<T> act_loop(const Model<T>& model, const sudoku::PuzzleBatch& batch,
                      const ActOptions& options);

// h_K after exactly k applications of the shared block.
template <typename T>
Tensor<T> fixed_depth_forward(const Model<T>& model, const sudoku::PuzzleBatch& batch, int k);

// act_loop when the model has ACT enabled; otherwise the fixed-depth output
// wrapped with a halt state where every token stops at K.
template <typename T>
ActOutput<T> model_forward(const Model<T>& model, const sudoku::PuzzleBatch& batch,
                           const ActOptions& options);

// Halting summary over sequence tokens (the "mean halt" metric) and memory
// tokens separately.
struct HaltSummary {
  double mean_halt = 0.0;
  int min_halt = 0;
  int max_halt = 0;
  double mem_mean_halt = 0.0;
};
HaltSummary summarize_halting(const HaltState& halt, int mem_tokens, int seq_len);

// Greedy predictions at every iteration k in [0, k_run), halting ignored.
// `output` decodes what the model would emit if stopped after step k (the
// truncated ACT blend, or h_k in fixed-depth mode); `hidden` decodes h_k.
struct ExtendedStep {
  int step = 0;
  int step_embedding_index = 0;
  std::vector<std::int32_t> output;  // [B x L]
  std::vector<std::int32_t> hidden;  // [B x L]
};

template <typename T>
std::vector<ExtendedStep> extended_inference(const Model<T>& model,
                                             const sudoku::PuzzleBatch& batch, int k_run,
                                             const ActOptions& options);

}  // namespace utm
