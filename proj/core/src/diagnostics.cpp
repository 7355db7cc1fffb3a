#include "utm/diagnostics.hpp"

#include <cmath>
#include <stdexcept>

#include "utm/act.hpp"

namespace utm {

std::vector<QuadrantMass> quadrant_mass(std::span<const double> attention, int heads, int rows,
                                        int mem_tokens) {
  const auto per_head = static_cast<std::size_t>(rows) * static_cast<std::size_t>(rows);
  if (attention.size() != static_cast<std::size_t>(heads) * per_head) {
    throw std::invalid_argument("quadrant_mass: attention size does not match heads x rows x rows");
  }
  if (mem_tokens < 0 || mem_tokens > rows) throw std::invalid_argument("quadrant_mass: bad memory count");
  std::vector<QuadrantMass> out(static_cast<std::size_t>(heads));
  const int seq = rows - mem_tokens;
  for (int h = 0; h < heads; ++h) {
    const double* a = attention.data() + static_cast<std::size_t>(h) * per_head;
    double sm = 0, ss = 0, mm = 0, ms = 0;
    for (int q = 0; q < rows; ++q) {
      double to_mem = 0, to_seq = 0;
      const double* row = a + static_cast<std::size_t>(q) * static_cast<std::size_t>(rows);
      for (int k = 0; k < mem_tokens; ++k) to_mem += row[k];
      for (int k = mem_tokens; k < rows; ++k) to_seq += row[k];
      if (q < mem_tokens) {
        mm += to_mem;
        ms += to_seq;
      } else {
        sm += to_mem;
        ss += to_seq;
      }
    }
    auto& r = out[static_cast<std::size_t>(h)];
    if (seq > 0) {
      r.s_to_m = sm / seq;
      r.s_to_s = ss / seq;
    }
    if (mem_tokens > 0) {
      r.m_to_m = mm / mem_tokens;
      r.m_to_s = ms / mem_tokens;
    }
  }
  return out;
}

QuadrantMass head_average(std::span<const QuadrantMass> per_head) {
  QuadrantMass avg;
  if (per_head.empty()) return avg;
  double mm = 0, ms = 0;
  bool has_mem = per_head.front().m_to_m.has_value();
  for (const auto& q : per_head) {
    avg.s_to_m += q.s_to_m;
    avg.s_to_s += q.s_to_s;
    if (has_mem) {
      mm += q.m_to_m.value_or(0.0);
      ms += q.m_to_s.value_or(0.0);
    }
  }
  const auto n = static_cast<double>(per_head.size());
  avg.s_to_m /= n;
  avg.s_to_s /= n;
  if (has_mem) {
    avg.m_to_m = mm / n;
    avg.m_to_s = ms / n;
  }
  return avg;
}

template <typename T>
double router_grad_norm(const ModelParams<T>& params) {
  double sq = 0.0;
  for (const Tensor<T>* t : {&params.router_weight, &params.router_bias}) {
    if (!t->defined() || !t->has_grad()) continue;
    for (T g : t->grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

JsonlWriter::JsonlWriter(const std::filesystem::path& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
}

void JsonlWriter::write(const nlohmann::json& record) {
  out_ << record.dump() << '\n';
  out_.flush();
}

nlohmann::json to_json(const QuadrantMass& q) {
  nlohmann::json j{{"s_to_m", q.s_to_m}, {"s_to_s", q.s_to_s}};
  if (q.m_to_m) j["m_to_m"] = *q.m_to_m;
  if (q.m_to_s) j["m_to_s"] = *q.m_to_s;
  return j;
}

nlohmann::json to_json(const StepDiagnostics& d) {
  nlohmann::json j{{"step", d.step},           {"p_mean", d.p_mean},
                   {"p_min", d.p_min},         {"p_max", d.p_max},
                   {"mem_p_mean", d.mem_p_mean}, {"frac_halted", d.frac_halted},
                   {"mean_weight", d.mean_weight}};
  if (!d.quadrants.empty()) {
    auto heads = nlohmann::json::array();
    for (const auto& q : d.quadrants) heads.push_back(to_json(q));
    j["quadrants"] = heads;
    j["quadrants_mean"] = to_json(head_average(d.quadrants));
  }
  return j;
}

template <typename T>
std::vector<StepPrediction> dump_per_step_predictions(const Model<T>& model,
                                                      const sudoku::PuzzleBatch& batch,
                                                      int k_run, double epsilon) {
  ActOptions options;
  options.epsilon = epsilon;
  const auto steps = extended_inference(model, batch, k_run, options);
  const int cells = batch.cells;
  std::vector<StepPrediction> out;
  out.reserve(steps.size());
  for (const auto& s : steps) {
    StepPrediction p;
    p.step = s.step;
    for (int b = 0; b < batch.batch; ++b) {
      int correct = 0, correct_hidden = 0;
      std::vector<int> digits(static_cast<std::size_t>(cells));
      for (int c = 0; c < cells; ++c) {
        const auto i = static_cast<std::size_t>(b * cells + c);
        digits[static_cast<std::size_t>(c)] = s.output[i];
        correct += s.output[i] == batch.targets[i];
        correct_hidden += s.hidden[i] == batch.targets[i];
      }
      p.correct_cells.push_back(correct);
      p.correct_cells_hidden.push_back(correct_hidden);
      p.predictions.push_back(std::move(digits));
    }
    out.push_back(std::move(p));
  }
  return out;
}

void write_prediction_dump(const std::filesystem::path& path, const sudoku::PuzzleBatch& batch,
                           std::span<const StepPrediction> steps) {
  JsonlWriter out(path);
  const auto cells = static_cast<std::size_t>(batch.cells);
  for (const auto& s : steps) {
    for (int b = 0; b < batch.batch; ++b) {
      const auto u = static_cast<std::size_t>(b);
      const auto begin = u * cells;
      std::vector<int> target(batch.targets.begin() + static_cast<std::ptrdiff_t>(begin),
                              batch.targets.begin() + static_cast<std::ptrdiff_t>(begin + cells));
      std::vector<int> givens(batch.givens.begin() + static_cast<std::ptrdiff_t>(begin),
                              batch.givens.begin() + static_cast<std::ptrdiff_t>(begin + cells));
      out.write({{"step", s.step},
                 {"puzzle", b},
                 {"correct", s.correct_cells[u]},
                 {"correct_hidden", s.correct_cells_hidden[u]},
                 {"cells", batch.cells},
                 {"prediction", s.predictions[u]},
                 {"target", target},
                 {"givens", givens}});
    }
  }
}

void write_attention_dump(const std::filesystem::path& path,
                          const std::vector<std::pair<int, AttentionMap>>& maps, int mem_tokens,
                          int seq_len) {
  Checkpoint ckpt;
  ckpt.metadata["kind"] = "attention";
  ckpt.metadata["mem_tokens"] = std::to_string(mem_tokens);
  ckpt.metadata["seq_len"] = std::to_string(seq_len);
  std::string steps;
  for (const auto& [step, map] : maps) {
    ckpt.add("step" + std::to_string(step) + "/attention", {map.heads, map.rows, map.rows},
             map.weights, 8);
    if (!steps.empty()) steps += ",";
    steps += std::to_string(step);
  }
  ckpt.metadata["steps"] = steps;
  save_checkpoint(path, ckpt);
}

template double router_grad_norm(const ModelParams<float>&);
template double router_grad_norm(const ModelParams<double>&);
template std::vector<StepPrediction> dump_per_step_predictions(const Model<float>&,
                                                               const sudoku::PuzzleBatch&, int,
                                                               double);
template std::vector<StepPrediction> dump_per_step_predictions(const Model<double>&,
                                                               const sudoku::PuzzleBatch&, int,
                                                               double);

}  // namespace utm
