#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "utm/model.hpp"

namespace utm {

// Attention mass split by query group (sequence / memory) and key group.
// Each pair sums to 1 per query group; memory-query fields are absent when
// there are no memory rows.
struct QuadrantMass {
  double s_to_m = 0.0;
  double s_to_s = 0.0;
  std::optional<double> m_to_m;
  std::optional<double> m_to_s;
};

// attention is [heads, rows, rows] with rows = T + L and rows summing to 1.
// Each quadrant is the uniform mean over its query rows of the mass landing
// on the key group.
std::vector<QuadrantMass> quadrant_mass(std::span<const double> attention, int heads, int rows,
                                        int mem_tokens);
// Arithmetic mean over heads.
QuadrantMass head_average(std::span<const QuadrantMass> per_head);

struct StepDiagnostics {
  int step = 0;                // 0-based iteration
  double p_mean = 0.0;         // router probability over sequence tokens
  double p_min = 0.0;
  double p_max = 0.0;
  double mem_p_mean = 0.0;     // router probability over memory tokens (0 if none)
  double frac_halted = 0.0;    // sequence tokens halted at or before this step
  double mean_weight = 0.0;    // mean blend weight of this step over sequence tokens
  std::vector<QuadrantMass> quadrants;  // per head, only at capture steps
};

// L2 norm over the router weight and bias gradients only.
template <typename T>
double router_grad_norm(const ModelParams<T>& params);

// Append-only JSON-lines writer. One object per line.
class JsonlWriter {
 public:
  JsonlWriter() = default;
  explicit JsonlWriter(const std::filesystem::path& path, bool append = false);
  void write(const nlohmann::json& record);
  bool is_open() const { return out_.is_open(); }

 private:
  std::ofstream out_;
};

nlohmann::json to_json(const QuadrantMass& q);
nlohmann::json to_json(const StepDiagnostics& d);

// Per-step greedy decoding of a batch over K_run iterations, halting ignored
// for the purpose of the dump.
struct StepPrediction {
  int step = 0;                              // 0-based iteration
  std::vector<int> correct_cells;            // per puzzle, using the model's output rule
  std::vector<std::vector<int>> predictions; // per puzzle, L decoded digits
  std::vector<int> correct_cells_hidden;     // per puzzle, decoding this step's state alone
};

template <typename T>
std::vector<StepPrediction> dump_per_step_predictions(const Model<T>& model,
                                                      const sudoku::PuzzleBatch& batch,
                                                      int k_run, double epsilon);

// One record per (step, puzzle): {"step", "puzzle", "correct", "correct_hidden",
// "cells", "prediction", "target", "givens"}.
void write_prediction_dump(const std::filesystem::path& path, const sudoku::PuzzleBatch& batch,
                           std::span<const StepPrediction> steps);

// Attention dump in the checkpoint container: arrays "step<k>/attention"
// [heads, rows, rows] plus metadata mem_tokens / seq_len.
void write_attention_dump(const std::filesystem::path& path,
                          const std::vector<std::pair<int, AttentionMap>>& maps, int mem_tokens,
                          int seq_len);

}  // namespace utm
