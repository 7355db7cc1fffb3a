#include "utm/act.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace utm {

double HaltState::ponder_cost(std::span<const std::uint8_t> mask) const {
  double total = 0.0;
  int count = 0;
  for (int i = 0; i < tokens; ++i) {
    if (!mask.empty() && !mask[static_cast<std::size_t>(i)]) continue;
    total += halt_step[static_cast<std::size_t>(i)] + remainder[static_cast<std::size_t>(i)];
    ++count;
  }
  return count ? total / count : 0.0;
}

HaltTracker::HaltTracker(int tokens, int k_run, double epsilon)
    : k_run_(k_run), threshold_(1.0 - epsilon) {
  if (k_run < 1) throw std::invalid_argument("K_run must be >= 1, got " + std::to_string(k_run));
  if (tokens < 0) throw std::invalid_argument("token count must be >= 0");
  state_.tokens = tokens;
  state_.cum_prob.assign(static_cast<std::size_t>(tokens), 0.0);
  state_.halted.assign(static_cast<std::size_t>(tokens), 0);
  state_.halt_step.assign(static_cast<std::size_t>(tokens), 0);
  state_.remainder.assign(static_cast<std::size_t>(tokens), 0.0);
  continuing_.assign(static_cast<std::size_t>(tokens), 0);
  halting_now_.assign(static_cast<std::size_t>(tokens), 0);
}

void HaltTracker::observe(std::span<const double> probs) {
  if (static_cast<int>(probs.size()) != state_.tokens) {
    throw std::invalid_argument("observe: expected " + std::to_string(state_.tokens) +
                                " probabilities, got " + std::to_string(probs.size()));
  }
  if (state_.steps >= k_run_) throw std::logic_error("observe called past K_run");
  const int step = state_.steps++;
  const bool last = step == k_run_ - 1;
  state_.weights.resize(static_cast<std::size_t>(state_.steps) * static_cast<std::size_t>(state_.tokens), 0.0);
  double* w = state_.weights.data() + static_cast<std::size_t>(step) * static_cast<std::size_t>(state_.tokens);
  for (int i = 0; i < state_.tokens; ++i) {
    const auto u = static_cast<std::size_t>(i);
    continuing_[u] = 0;
    halting_now_[u] = 0;
    if (state_.halted[u]) continue;
    const double p = probs[u];
    if (last || state_.cum_prob[u] + p >= threshold_) {
      const double r = 1.0 - state_.cum_prob[u];
      w[u] = r;
      state_.remainder[u] = r;
      state_.halt_step[u] = step + 1;
      state_.halted[u] = 1;
      halting_now_[u] = 1;
      ++halted_count_;
    } else {
      w[u] = p;
      state_.cum_prob[u] += p;
      continuing_[u] = 1;
    }
  }
}

HaltState compute_halting(std::span<const double> probs, int tokens, int k_run, double epsilon) {
  HaltTracker tracker(tokens, k_run, epsilon);
  const std::size_t per_step = static_cast<std::size_t>(tokens);
  const std::size_t steps = per_step ? probs.size() / per_step : 0;
  for (std::size_t k = 0; k < steps && k < static_cast<std::size_t>(k_run); ++k) {
    if (tracker.all_halted() && k > 0) break;
    tracker.observe(probs.subspan(k * per_step, per_step));
  }
  return tracker.state();
}

ActOptions ActOptions::from_config(const ActConfig& act) {
  ActOptions o;
  o.k_run = act.k_run;
  o.epsilon = act.epsilon;
  o.ponder_scope = act.ponder_scope;
  o.freeze_halted = act.freeze_halted;
  return o;
}

namespace {

template <typename T>
Tensor<T> constant_like(const Tensor<T>& ref, std::span<const std::uint8_t> mask) {
  Buffer<T> values(mask.begin(), mask.end());
  return Tensor<T>::from(ref.shape(), std::move(values));
}

template <typename T>
StepDiagnostics step_stats(int step, std::span<const double> p, const HaltTracker& tracker, int batch,
                           int rows, int mem_tokens) {
  StepDiagnostics d;
  d.step = step;
  const auto& st = tracker.state();
  const double* w = st.weights.data() + static_cast<std::size_t>(step) * static_cast<std::size_t>(st.tokens);
  double p_sum = 0.0, mem_sum = 0.0, w_sum = 0.0, halted = 0.0;
  d.p_min = std::numeric_limits<double>::infinity();
  d.p_max = -std::numeric_limits<double>::infinity();
  int seq_count = 0, mem_count = 0;
  for (int b = 0; b < batch; ++b) {
    for (int r = 0; r < rows; ++r) {
      const auto i = static_cast<std::size_t>(b * rows + r);
      if (r < mem_tokens) {
        mem_sum += p[i];
        ++mem_count;
        continue;
      }
      p_sum += p[i];
      d.p_min = std::min(d.p_min, p[i]);
      d.p_max = std::max(d.p_max, p[i]);
      w_sum += w[i];
      halted += st.halted[i] ? 1.0 : 0.0;
      ++seq_count;
    }
  }
  d.p_mean = seq_count ? p_sum / seq_count : 0.0;
  d.mem_p_mean = mem_count ? mem_sum / mem_count : 0.0;
  d.mean_weight = seq_count ? w_sum / seq_count : 0.0;
  d.frac_halted = seq_count ? halted / seq_count : 0.0;
  if (!seq_count) d.p_min = d.p_max = 0.0;
  return d;
}

template <typename T>
Tensor<T> next_input(const Model<T>& model, const sudoku::PuzzleBatch& batch, const Tensor<T>& h,
                     int step) {
  if (step == 0) return model.embed_inputs(batch, 0);
  if (model.config().step_embedding_every_step) return model.add_step_embedding(h, step);
  return h;
}

bool wants_capture(const std::vector<int>& steps, int k) {
  return std::find(steps.begin(), steps.end(), k) != steps.end();
}

}  // namespace

template <typename T>
ActOutput<T> act_loop(const Model<T>& model, const sudoku::PuzzleBatch& batch,
                      const ActOptions& options) {
  const auto& cfg = model.config();
  const int k_run = options.k_run > 0 ? options.k_run : cfg.max_ponder;
  if (k_run < 1) throw std::invalid_argument("K_run must be >= 1");
  const int b = batch.batch;
  const int rows = cfg.rows();
  const int tokens = b * rows;

  HaltTracker tracker(tokens, k_run, options.epsilon);
  ActOutput<T> out;
  Tensor<T> h, cum, remainder;
  std::vector<std::uint8_t> running(static_cast<std::size_t>(tokens), 1);
  std::vector<double> p_values(static_cast<std::size_t>(tokens));

  for (int k = 0; k < k_run; ++k) {
    const Tensor<T> x = next_input(model, batch, h, k);
    AttentionMap map;
    const bool capture = wants_capture(options.capture_steps, k);
    Tensor<T> next = model.block_forward(x, capture ? &map : nullptr);
    if (capture) out.attention.emplace_back(k, std::move(map));
    if (options.freeze_halted && k > 0) {
      auto keep = Tensor<T>::from({b, rows}, Buffer<T>(running.begin(), running.end()));
      next = ops::add(h, ops::scale_rows(ops::sub(next, h), keep));
    }
    h = next;

    Tensor<T> p;
    if (options.prob_override) {
      Buffer<T> fixed(static_cast<std::size_t>(tokens));
      for (int i = 0; i < tokens; ++i) fixed[static_cast<std::size_t>(i)] = static_cast<T>(options.prob_override(k, i));
      p = Tensor<T>::from({b, rows}, std::move(fixed));
    } else {
      p = model.router_prob(h);
    }
    for (int i = 0; i < tokens; ++i) p_values[static_cast<std::size_t>(i)] = static_cast<double>(p.data()[static_cast<std::size_t>(i)]);
    tracker.observe(p_values);

    const auto cont = constant_like(p, tracker.continuing());
    const auto halt_now = constant_like(p, tracker.halting_now());
    const Tensor<T> one_minus_cum =
        k == 0 ? Tensor<T>::full({b, rows}, T(1)) : ops::add_scalar(ops::scale(cum, T(-1)), T(1));
    const auto rem_k = ops::mul(one_minus_cum, halt_now);
    const auto w = ops::add(ops::mul(p, cont), rem_k);
    const auto contrib = ops::scale_rows(h, w);
    out.output = k == 0 ? contrib : ops::add(out.output, contrib);
    remainder = k == 0 ? rem_k : ops::add(remainder, rem_k);
    cum = k == 0 ? p : ops::add(cum, p);

    if (options.collect_diagnostics) {
      out.steps.push_back(step_stats<T>(k, p_values, tracker, b, rows, cfg.mem_tokens));
      if (capture) {
        const auto& m = out.attention.back().second;
        out.steps.back().quadrants = quadrant_mass(m.weights, m.heads, m.rows, cfg.mem_tokens);
      }
    }
    for (int i = 0; i < tokens; ++i) running[static_cast<std::size_t>(i)] = tracker.state().halted[static_cast<std::size_t>(i)] ? 0 : 1;
    if (options.stop_when_all_halted && tracker.all_halted()) break;
  }
  out.halt = tracker.state();

  // rho = N + R per token; N is piecewise constant so only R carries gradient.
  Tensor<T> r_scope = remainder;
  std::vector<std::uint8_t> scope_mask(static_cast<std::size_t>(tokens), 1);
  if (options.ponder_scope == PonderScope::kSequenceTokens) {
    r_scope = ops::slice(remainder, 1, cfg.mem_tokens, cfg.seq_len);
    for (int i = 0; i < tokens; ++i) scope_mask[static_cast<std::size_t>(i)] = (i % rows) >= cfg.mem_tokens;
  }
  double n_mean = 0.0;
  int n_count = 0;
  for (int i = 0; i < tokens; ++i) {
    if (!scope_mask[static_cast<std::size_t>(i)]) continue;
    n_mean += out.halt.halt_step[static_cast<std::size_t>(i)];
    ++n_count;
  }
  n_mean /= std::max(n_count, 1);
  out.ponder = ops::add_scalar(ops::mean_all(r_scope), static_cast<T>(n_mean));
  return out;
}

template <typename T>
Tensor<T> fixed_depth_forward(const Model<T>& model, const sudoku::PuzzleBatch& batch, int k) {
  if (k < 1) throw std::invalid_argument("fixed depth K must be >= 1");
  Tensor<T> h;
  for (int step = 0; step < k; ++step) h = model.block_forward(next_input(model, batch, h, step));
  return h;
}

template <typename T>
ActOutput<T> model_forward(const Model<T>& model, const sudoku::PuzzleBatch& batch,
                           const ActOptions& options) {
  if (model.config().act_enabled) return act_loop(model, batch, options);
  const auto& cfg = model.config();
  const int k = options.k_run > 0 ? options.k_run : cfg.max_ponder;
  ActOutput<T> out;
  Tensor<T> h;
  for (int step = 0; step < k; ++step) {
    AttentionMap map;
    const bool capture = wants_capture(options.capture_steps, step);
    h = model.block_forward(next_input(model, batch, h, step), capture ? &map : nullptr);
    if (capture) {
      if (options.collect_diagnostics) {
        StepDiagnostics d;
        d.step = step;
        d.quadrants = quadrant_mass(map.weights, map.heads, map.rows, cfg.mem_tokens);
        out.steps.push_back(std::move(d));
      }
      out.attention.emplace_back(step, std::move(map));
    }
  }
  out.output = h;
  const int tokens = batch.batch * cfg.rows();
  // Every token stops at K with all weight on the last step.
  std::vector<double> probs(static_cast<std::size_t>(k) * static_cast<std::size_t>(tokens), 0.0);
  out.halt = compute_halting(probs, tokens, k, options.epsilon);
  return out;
}

HaltSummary summarize_halting(const HaltState& halt, int mem_tokens, int seq_len) {
  HaltSummary s;
  const int rows = mem_tokens + seq_len;
  double seq_total = 0.0, mem_total = 0.0;
  int seq_count = 0, mem_count = 0;
  s.min_halt = std::numeric_limits<int>::max();
  s.max_halt = 0;
  for (int i = 0; i < halt.tokens; ++i) {
    const int n = halt.halt_step[static_cast<std::size_t>(i)];
    if (i % rows < mem_tokens) {
      mem_total += n;
      ++mem_count;
    } else {
      seq_total += n;
      ++seq_count;
      s.min_halt = std::min(s.min_halt, n);
      s.max_halt = std::max(s.max_halt, n);
    }
  }
  s.mean_halt = seq_count ? seq_total / seq_count : 0.0;
  s.mem_mean_halt = mem_count ? mem_total / mem_count : 0.0;
  if (!seq_count) s.min_halt = 0;
  return s;
}

namespace {

template <typename T>
std::vector<std::int32_t> greedy_decode(const Model<T>& model, const Tensor<T>& h) {
  const auto logits = model.output_logits(h);
  const std::int64_t v = logits.dim(-1);
  const std::size_t rows = logits.size() / static_cast<std::size_t>(v);
  std::vector<std::int32_t> out(rows);
  const auto data = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto* row = data.data() + r * static_cast<std::size_t>(v);
    out[r] = static_cast<std::int32_t>(std::max_element(row, row + v) - row);
  }
  return out;
}

}  // namespace

template <typename T>
std::vector<ExtendedStep> extended_inference(const Model<T>& model,
                                             const sudoku::PuzzleBatch& batch, int k_run,
                                             const ActOptions& options) {
  if (k_run < 1) throw std::invalid_argument("K_run must be >= 1");
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  const int b = batch.batch;
  const int rows = cfg.rows();
  const int h_dim = cfg.hidden;
  const int tokens = b * rows;
  const bool act = cfg.act_enabled;

  HaltTracker tracker(tokens, k_run, options.epsilon);
  Buffer<T> blend(static_cast<std::size_t>(tokens) * static_cast<std::size_t>(h_dim), T(0));
  Buffer<T> cum(static_cast<std::size_t>(tokens), T(0));
  std::vector<double> p_values(static_cast<std::size_t>(tokens));
  std::vector<std::uint8_t> running(static_cast<std::size_t>(tokens), 1);
  std::vector<ExtendedStep> out;
  Tensor<T> h;

  for (int k = 0; k < k_run; ++k) {
    Tensor<T> next = model.block_forward(next_input(model, batch, h, k));
    if (options.freeze_halted && act && k > 0) {
      auto keep = Tensor<T>::from({b, rows}, Buffer<T>(running.begin(), running.end()));
      next = ops::add(h, ops::scale_rows(ops::sub(next, h), keep));
    }
    h = next;
    ExtendedStep step;
    step.step = k;
    step.step_embedding_index = model.step_index(k);
    step.hidden = greedy_decode(model, h);
    if (!act) {
      step.output = step.hidden;
      out.push_back(std::move(step));
      continue;
    }

    const auto p = model.router_prob(h);
    for (int i = 0; i < tokens; ++i) p_values[static_cast<std::size_t>(i)] = static_cast<double>(p.data()[static_cast<std::size_t>(i)]);
    tracker.observe(p_values);
    const auto hv = h.data();
    Buffer<T> truncated(blend.size());
    for (int i = 0; i < tokens; ++i) {
      const auto u = static_cast<std::size_t>(i);
      const T* hrow = hv.data() + u * static_cast<std::size_t>(h_dim);
      T* brow = blend.data() + u * static_cast<std::size_t>(h_dim);
      T* trow = truncated.data() + u * static_cast<std::size_t>(h_dim);
      if (tracker.halting_now()[u]) {
        const T w = T(1) + (-cum[u]);
        for (int j = 0; j < h_dim; ++j) brow[j] = brow[j] + hrow[j] * w;
        std::copy_n(brow, h_dim, trow);
      } else if (tracker.continuing()[u]) {
        // as if the run stopped here: the remainder goes to this step
        const T r = T(1) + (-cum[u]);
        for (int j = 0; j < h_dim; ++j) trow[j] = brow[j] + hrow[j] * r;
        const T w = p.data()[u];
        for (int j = 0; j < h_dim; ++j) brow[j] = brow[j] + hrow[j] * w;
        cum[u] = cum[u] + w;
      } else {
        std::copy_n(brow, h_dim, trow);
      }
    }
    for (int i = 0; i < tokens; ++i) running[static_cast<std::size_t>(i)] = tracker.state().halted[static_cast<std::size_t>(i)] ? 0 : 1;
    step.output = greedy_decode(model, Tensor<T>::from({b, rows, h_dim}, std::move(truncated)));
    out.push_back(std::move(step));
  }
  return out;
}

#define UTM_INSTANTIATE_ACT(T)                                                                   \
  template ActOutput<T> act_loop(const Model<T>&, const sudoku::PuzzleBatch&, const ActOptions&); \
  template Tensor<T> fixed_depth_forward(const Model<T>&, const sudoku::PuzzleBatch&, int);      \
  template ActOutput<T> model_forward(const Model<T>&, const sudoku::PuzzleBatch&,               \
                                      const ActOptions&);                                        \
  template std::vector<ExtendedStep> extended_inference(const Model<T>&,                         \
                                                        const sudoku::PuzzleBatch&, int,         \
                                                        const ActOptions&);

UTM_INSTANTIATE_ACT(float)
UTM_INSTANTIATE_ACT(double)

#undef UTM_INSTANTIATE_ACT

}  // namespace utm
