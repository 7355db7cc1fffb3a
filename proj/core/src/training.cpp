#include "utm/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace utm {

double lambda_at_step(std::int64_t step, double lambda, std::int64_t warmup_steps,
                      RampShape ramp) {
  if (step < 0) throw std::invalid_argument("lambda_at_step: negative step");
  if (warmup_steps <= 0 || step >= warmup_steps) return lambda;
  const double frac = static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (ramp == RampShape::kCosine) return lambda * (1.0 - std::cos(std::numbers::pi * frac)) / 2.0;
  return lambda * frac;
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max) {
  if (total_steps <= 0) return lr_max;
  const auto s = std::clamp<std::int64_t>(step, 0, total_steps);
  const double lr =
      lr_max * (1.0 + std::cos(std::numbers::pi * static_cast<double>(s) /
                               static_cast<double>(total_steps))) /
      2.0;
  return std::max(lr, 0.0);
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> cell_mask, const Tensor<T>& ponder,
                     double lambda_t) {
  auto loss = ops::cross_entropy(logits, targets, cell_mask);
  if (ponder.defined() && lambda_t != 0.0) {
    loss = ops::add(loss, ops::scale(ponder, static_cast<T>(lambda_t)));
  }
  return loss;
}

template <typename T>
AdamW<T>::AdamW(std::vector<std::pair<std::string, Tensor<T>*>> params, Options options)
    : params_(std::move(params)), opt_(options) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t->size(), 0.0);
    v_.emplace_back(t->size(), 0.0);
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<T>& p = *params_[i].second;
    auto data = p.data();
    const bool has = p.has_grad();
    auto grad = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has ? static_cast<double>(grad[j]) : 0.0;
      m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * g;
      v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      double x = static_cast<double>(data[j]);
      x -= lr * opt_.weight_decay * x;
      x -= lr * mhat / (std::sqrt(vhat) + opt_.eps);
      data[j] = static_cast<T>(x);
    }
  }
}

template <typename T>
void AdamW<T>::save(Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.metadata[prefix + "step"] = std::to_string(t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, t] = params_[i];
    ckpt.add(prefix + "m/" + name, t->shape(), m_[i], 8);
    ckpt.add(prefix + "v/" + name, t->shape(), v_[i], 8);
  }
}

template <typename T>
void AdamW<T>::load(const Checkpoint& ckpt, const std::string& prefix) {
  const auto it = ckpt.metadata.find(prefix + "step");
  if (it == ckpt.metadata.end()) throw std::runtime_error("checkpoint has no optimizer state");
  t_ = std::stoll(it->second);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& name = params_[i].first;
    const auto& m = ckpt.get(prefix + "m/" + name);
    const auto& v = ckpt.get(prefix + "v/" + name);
    if (m.values.size() != m_[i].size() || v.values.size() != v_[i].size()) {
      throw std::runtime_error("optimizer state size mismatch for " + name);
    }
    m_[i] = m.values;
    v_[i] = v.values;
  }
}

template <typename T>
void ema_update(ModelParams<T>& ema, const ModelParams<T>& params, double decay) {
  auto dst = ema.named();
  const auto src = params.named();
  if (dst.size() != src.size()) throw std::invalid_argument("ema_update: parameter lists differ");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto d = dst[i].second->data();
    const auto s = src[i].second->data();
    if (d.size() != s.size()) throw std::invalid_argument("ema_update: shape mismatch for " + dst[i].first);
    for (std::size_t j = 0; j < d.size(); ++j) {
      d[j] = static_cast<T>(decay * static_cast<double>(d[j]) +
                            (1.0 - decay) * static_cast<double>(s[j]));
    }
  }
}

template <typename T>
double clip_grad_norm(ModelParams<T>& params, double max_norm) {
  double sq = 0.0;
  auto named = params.named();
  for (auto& [name, t] : named) {
    if (!t->has_grad()) continue;
    for (T g : t->grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& [name, t] : named) {
      if (!t->has_grad()) continue;
      for (T& g : t->mutable_grad()) g *= factor;
    }
  }
  return norm;
}

double exact_match(std::span<const std::int32_t> predictions,
                   std::span<const std::int32_t> targets, int cells) {
  if (predictions.size() != targets.size()) throw std::invalid_argument("exact_match: size mismatch");
  if (cells <= 0 || predictions.size() % static_cast<std::size_t>(cells) != 0) {
    throw std::invalid_argument("exact_match: size is not a multiple of the cell count");
  }
  const std::size_t puzzles = predictions.size() / static_cast<std::size_t>(cells);
  if (puzzles == 0) return 0.0;
  std::size_t solved = 0;
  for (std::size_t b = 0; b < puzzles; ++b) {
    const auto off = b * static_cast<std::size_t>(cells);
    solved += std::equal(predictions.begin() + static_cast<std::ptrdiff_t>(off),
                         predictions.begin() + static_cast<std::ptrdiff_t>(off + cells),
                         targets.begin() + static_cast<std::ptrdiff_t>(off));
  }
  return static_cast<double>(solved) / static_cast<double>(puzzles);
}

std::int64_t token_steps(int mem_tokens, int seq_len, double mean_halt) {
  return std::llround(static_cast<double>(mem_tokens + seq_len) * mean_halt);
}

template <typename T>
std::vector<std::int32_t> greedy_predictions(const Model<T>& model, const Tensor<T>& output) {
  NoGradGuard no_grad;
  const auto logits = model.output_logits(output);
  const auto v = static_cast<std::size_t>(logits.dim(-1));
  const auto data = logits.data();
  std::vector<std::int32_t> out(data.size() / v);
  for (std::size_t r = 0; r < out.size(); ++r) {
    const auto* row = data.data() + r * v;
    out[r] = static_cast<std::int32_t>(std::max_element(row, row + v) - row);
  }
  return out;
}

template <typename T>
EvalResult evaluate(const Model<T>& model, std::span<const sudoku::Puzzle> puzzles,
                    const ActOptions& options, int batch_size) {
  NoGradGuard no_grad;
  EvalResult r;
  r.puzzles = static_cast<int>(puzzles.size());
  if (puzzles.empty()) return r;
  ActOptions opts = options;
  opts.collect_diagnostics = false;
  opts.capture_steps.clear();
  std::size_t solved = 0, cells_ok = 0, cells_total = 0;
  double halt_total = 0.0;
  std::size_t halt_count = 0;
  r.halt_min = std::numeric_limits<int>::max();
  const auto& cfg = model.config();
  for (std::size_t start = 0; start < puzzles.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(batch_size), puzzles.size() - start);
    const auto batch = sudoku::make_batch(puzzles.subspan(start, n));
    const auto out = model_forward(model, batch, opts);
    const auto pred = greedy_predictions(model, out.output);
    const int cells = batch.cells;
    for (std::size_t b = 0; b < n; ++b) {
      bool all = true;
      for (int c = 0; c < cells; ++c) {
        const auto i = b * static_cast<std::size_t>(cells) + static_cast<std::size_t>(c);
        const bool ok = pred[i] == batch.targets[i];
        cells_ok += ok;
        all = all && ok;
      }
      solved += all;
      cells_total += static_cast<std::size_t>(cells);
    }
    const auto s = summarize_halting(out.halt, cfg.mem_tokens, cfg.seq_len);
    halt_total += s.mean_halt * static_cast<double>(n);
    halt_count += n;
    r.halt_min = std::min(r.halt_min, s.min_halt);
    r.halt_max = std::max(r.halt_max, s.max_halt);
  }
  r.em = static_cast<double>(solved) / static_cast<double>(puzzles.size());
  r.cell_accuracy = static_cast<double>(cells_ok) / static_cast<double>(cells_total);
  r.mean_halt = halt_total / static_cast<double>(halt_count);
  return r;
}

Datasets load_datasets(const RunConfig& config) {
  const auto& d = config.data;
  Datasets out;
  if (d.source == DataSource::kCsv) {
    const auto geo = sudoku::Geometry::for_cells(config.model.seq_len);
    out.train = sudoku::load_csv(d.train_csv, geo);
    out.eval = sudoku::load_csv(d.eval_csv, geo);
    if (d.train_size > 0 && static_cast<int>(out.train.size()) > d.train_size) out.train.resize(static_cast<std::size_t>(d.train_size));
    if (d.eval_size > 0 && static_cast<int>(out.eval.size()) > d.eval_size) out.eval.resize(static_cast<std::size_t>(d.eval_size));
    if (out.train.empty()) throw sudoku::DataError("no usable training rows in " + d.train_csv);
    if (out.eval.empty()) throw sudoku::DataError("no usable eval rows in " + d.eval_csv);
    return out;
  }
  const auto seed = static_cast<std::uint64_t>(d.data_seed);
  out.eval = sudoku::gen_micro_dataset(seed * 2 + 1, d.eval_size, d.givens_min, d.givens_max);
  std::vector<std::string> held_out;
  held_out.reserve(out.eval.size());
  for (const auto& p : out.eval) held_out.push_back(sudoku::to_string(p.grid));
  std::sort(held_out.begin(), held_out.end());
  held_out.erase(std::unique(held_out.begin(), held_out.end()), held_out.end());
  out.train = sudoku::gen_micro_dataset(seed * 2, d.train_size, d.givens_min, d.givens_max, held_out);
  return out;
}

#define UTM_INSTANTIATE_TRAINING(T)                                                            \
  template Tensor<T> total_loss(const Tensor<T>&, std::span<const std::int32_t>,               \
                                std::span<const std::uint8_t>, const Tensor<T>&, double);       \
  template class AdamW<T>;                                                                     \
  template void ema_update(ModelParams<T>&, const ModelParams<T>&, double);                   \
  template double clip_grad_norm(ModelParams<T>&, double);                                     \
  template std::vector<std::int32_t> greedy_predictions(const Model<T>&, const Tensor<T>&);    \
  template EvalResult evaluate(const Model<T>&, std::span<const sudoku::Puzzle>,               \
                               const ActOptions&, int);

UTM_INSTANTIATE_TRAINING(float)
UTM_INSTANTIATE_TRAINING(double)

#undef UTM_INSTANTIATE_TRAINING

}  // namespace utm
