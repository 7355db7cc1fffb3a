#include "utm/model.hpp"

#include <cmath>
#include <numeric>

namespace utm {

namespace {

template <typename T>
Tensor<T> normal_param(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Buffer<T> values(static_cast<std::size_t>(numel(shape)));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(values), true);
}

template <typename T>
Tensor<T> const_param(Shape shape, double value) {
  return Tensor<T>::full(std::move(shape), static_cast<T>(value), true);
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ModelParams<T>::named() {
  std::vector<std::pair<std::string, Tensor<T>*>> out = {
      {"embed.token", &token_embedding},
      {"embed.type", &type_embedding},
      {"embed.step", &step_embedding},
      {"memory", &memory},
      {"block.norm1.alpha", &norm1_alpha},
      {"block.norm1.shift", &norm1_shift},
      {"block.norm1.gain", &norm1_gain},
      {"block.norm2.alpha", &norm2_alpha},
      {"block.norm2.shift", &norm2_shift},
      {"block.norm2.gain", &norm2_gain},
      {"block.attn.wq", &wq},
      {"block.attn.wk", &wk},
      {"block.attn.wv", &wv},
      {"block.attn.wo", &wo},
      {"block.attn.q_gain", &q_gain},
      {"block.attn.k_gain", &k_gain},
      {"block.ffn.w_gate", &w_gate},
      {"block.ffn.w_up", &w_up},
      {"block.ffn.w_down", &w_down},
      {"router.weight", &router_weight},
      {"router.bias", &router_bias},
      {"head.output", &output_proj},
  };
  std::erase_if(out, [](const auto& e) { return !e.second->defined(); });
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> ModelParams<T>::named() const {
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  for (auto& [name, ptr] : const_cast<ModelParams*>(this)->named()) out.emplace_back(name, ptr);
  return out;
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
  ModelParams copy = *this;
  for (auto& [name, ptr] : copy.named()) {
    const bool rg = ptr->requires_grad();
    *ptr = ptr->detach();
    ptr->set_requires_grad(rg);
  }
  return copy;
}

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int h = config_.hidden;
  const int f = config_.ffn_inner();
  const double std0 = config_.init_std;
  auto& p = params_;
  p.token_embedding = normal_param<T>({config_.vocab, h}, std0, rng);
  p.type_embedding = normal_param<T>({2, h}, std0, rng);
  p.step_embedding = normal_param<T>({config_.max_ponder, h}, std0, rng);
  if (config_.mem_tokens > 0) p.memory = normal_param<T>({config_.mem_tokens, h}, std0, rng);

  if (config_.norm == NormKind::kDerf) {
    p.norm1_alpha = const_param<T>({h}, 1.0);
    p.norm1_shift = const_param<T>({h}, 0.0);
    p.norm2_alpha = const_param<T>({h}, 1.0);
    p.norm2_shift = const_param<T>({h}, 0.0);
  } else {
    p.norm1_gain = const_param<T>({h}, 1.0);
    p.norm2_gain = const_param<T>({h}, 1.0);
  }
  const double in_h = 1.0 / std::sqrt(static_cast<double>(h));
  const double in_f = 1.0 / std::sqrt(static_cast<double>(f));
  p.wq = normal_param<T>({h, h}, in_h, rng);
  p.wk = normal_param<T>({h, h}, in_h, rng);
  p.wv = normal_param<T>({h, h}, in_h, rng);
  p.wo = normal_param<T>({h, h}, in_h, rng);
  p.q_gain = const_param<T>({config_.heads}, 1.0);
  p.k_gain = const_param<T>({config_.heads}, 1.0);
  p.w_gate = normal_param<T>({h, f}, in_h, rng);
  p.w_up = normal_param<T>({h, f}, in_h, rng);
  p.w_down = normal_param<T>({f, h}, in_f, rng);
  p.router_weight = normal_param<T>({h, 1}, std0, rng);
  p.router_bias = const_param<T>({1}, config_.router_bias_init);
  p.output_proj = normal_param<T>({h, config_.vocab}, in_h, rng);

  positions_.resize(static_cast<std::size_t>(config_.rows()));
  std::iota(positions_.begin(), positions_.end(), 0);
}

template <typename T>
Model<T>::Model(ModelConfig config, ModelParams<T> params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  positions_.resize(static_cast<std::size_t>(config_.rows()));
  std::iota(positions_.begin(), positions_.end(), 0);
}

template <typename T>
std::int64_t Model<T>::param_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_.named()) n += static_cast<std::int64_t>(t->size());
  return n;
}

template <typename T>
int Model<T>::step_index(int step) const {
  if (step < 0) throw std::invalid_argument("step index must be >= 0");
  return step % config_.max_ponder;
}

template <typename T>
Tensor<T> Model<T>::base_embedding(const sudoku::PuzzleBatch& batch) const {
  const int b = batch.batch;
  const int l = config_.seq_len;
  const int t = config_.mem_tokens;
  const int h = config_.hidden;
  if (batch.cells != l) {
    throw ShapeError("batch has " + std::to_string(batch.cells) + " cells, model expects " +
                     std::to_string(l));
  }
  auto type_row = [&](std::int32_t which) {
    const std::int32_t id[1] = {which};
    return ops::reshape(ops::embedding(params_.type_embedding, std::span<const std::int32_t>(id), {1}),
                        {h});
  };
  Tensor<T> seq = ops::embedding(params_.token_embedding, std::span<const std::int32_t>(batch.tokens),
                                 {b, l});
  seq = ops::add(seq, type_row(1));
  if (t == 0) return seq;

  std::vector<std::int32_t> mem_ids(static_cast<std::size_t>(b * t));
  for (int i = 0; i < b; ++i) {
    for (int j = 0; j < t; ++j) mem_ids[static_cast<std::size_t>(i * t + j)] = j;
  }
  Tensor<T> mem = ops::embedding(params_.memory, std::span<const std::int32_t>(mem_ids), {b, t});
  mem = ops::add(mem, type_row(0));
  const Tensor<T> parts[2] = {mem, seq};
  return ops::concat(std::span<const Tensor<T>>(parts), 1);
}

template <typename T>
Tensor<T> Model<T>::add_step_embedding(const Tensor<T>& h, int step) const {
  const std::int32_t id[1] = {step_index(step)};
  auto row = ops::reshape(
      ops::embedding(params_.step_embedding, std::span<const std::int32_t>(id), {1}),
      {config_.hidden});
  return ops::add(h, row);
}

template <typename T>
Tensor<T> Model<T>::embed_inputs(const sudoku::PuzzleBatch& batch, int step) const {
  return add_step_embedding(base_embedding(batch), step);
}

template <typename T>
Tensor<T> Model<T>::derf_norm(const Tensor<T>& x, const Tensor<T>& alpha,
                              const Tensor<T>& shift) const {
  return ops::erf(ops::add(ops::mul(x, alpha), shift));
}

template <typename T>
Tensor<T> Model<T>::rms_norm(const Tensor<T>& x, const Tensor<T>& gain) const {
  return ops::rms_norm(x, gain, static_cast<T>(1e-6));
}

template <typename T>
Tensor<T> Model<T>::norm1(const Tensor<T>& x) const {
  if (config_.norm == NormKind::kDerf) return derf_norm(x, params_.norm1_alpha, params_.norm1_shift);
  return rms_norm(x, params_.norm1_gain);
}

template <typename T>
Tensor<T> Model<T>::norm2(const Tensor<T>& x) const {
  if (config_.norm == NormKind::kDerf) return derf_norm(x, params_.norm2_alpha, params_.norm2_shift);
  return rms_norm(x, params_.norm2_gain);
}

template <typename T>
Tensor<T> Model<T>::attention(const Tensor<T>& x, AttentionMap* capture) const {
  const std::int64_t b = x.dim(0);
  const std::int64_t n = x.dim(1);
  const std::int64_t heads = config_.heads;
  const std::int64_t d = config_.head_dim;
  if (x.rank() != 3 || x.dim(2) != config_.hidden || n != config_.rows()) {
    throw ShapeError("attention: expected [B x " + std::to_string(config_.rows()) + " x " +
                     std::to_string(config_.hidden) + "], got " + shape_str(x.shape()));
  }
  const T qk_eps = static_cast<T>(1e-6);
  auto project = [&](const Tensor<T>& w) { return ops::reshape(ops::matmul(x, w), {b, n, heads, d}); };
  auto qk = [&](const Tensor<T>& w, const Tensor<T>& gain) {
    auto t = project(w);
    if (config_.qk_norm_before_rope) {
      return ops::rope(ops::head_rms_norm(t, gain, qk_eps), positions_, config_.rope_base);
    }
    return ops::head_rms_norm(ops::rope(t, positions_, config_.rope_base), gain, qk_eps);
  };
  auto q = ops::transpose(qk(params_.wq, params_.q_gain), 1, 2);                       // [B,h,N,D]
  auto k_t = ops::transpose(ops::transpose(qk(params_.wk, params_.k_gain), 1, 2), 2, 3);  // [B,h,D,N]
  auto v = ops::transpose(project(params_.wv), 1, 2);                                   // [B,h,N,D]

  auto scores = ops::scale(ops::matmul(q, k_t), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  auto probs = ops::softmax(scores, -1);
  if (capture) {
    capture->heads = static_cast<int>(heads);
    capture->rows = static_cast<int>(n);
    capture->weights.assign(static_cast<std::size_t>(heads * n * n), 0.0);
    const auto data = probs.data();
    const std::size_t per_sample = static_cast<std::size_t>(heads * n * n);
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < per_sample; ++j) {
        capture->weights[j] += static_cast<double>(data[static_cast<std::size_t>(i) * per_sample + j]);
      }
    }
    for (auto& w : capture->weights) w /= static_cast<double>(b);
  }
  auto out = ops::matmul(probs, v);                                       // [B,h,N,D]
  out = ops::reshape(ops::transpose(out, 1, 2), {b, n, config_.hidden});  // [B,N,H]
  return ops::matmul(out, params_.wo);
}

template <typename T>
Tensor<T> Model<T>::ffn(const Tensor<T>& x) const {
  auto gate = ops::silu(ops::matmul(x, params_.w_gate));
  auto up = ops::matmul(x, params_.w_up);
  return ops::matmul(ops::mul(gate, up), params_.w_down);
}

template <typename T>
Tensor<T> Model<T>::block_forward(const Tensor<T>& x, AttentionMap* capture) const {
  auto h = ops::add(x, attention(norm1(x), capture));
  return ops::add(h, ffn(norm2(h)));
}

template <typename T>
Tensor<T> Model<T>::router_prob(const Tensor<T>& h) const {
  auto logits = ops::add(ops::matmul(h, params_.router_weight), params_.router_bias);  // [B,N,1]
  return ops::sigmoid(ops::reshape(logits, {h.dim(0), h.dim(1)}));
}

template <typename T>
Tensor<T> Model<T>::output_logits(const Tensor<T>& h) const {
  auto seq = ops::slice(h, 1, config_.mem_tokens, config_.seq_len);
  return ops::matmul(seq, params_.output_proj);
}

template <typename T>
Checkpoint Model<T>::to_checkpoint() const {
  Checkpoint ckpt;
  for (const auto& [name, t] : params_.named()) ckpt.add(name, *t);
  return ckpt;
}

template <typename T>
void Model<T>::load_checkpoint(const Checkpoint& ckpt) {
  for (auto& [name, t] : params_.named()) ckpt.load_into(name, *t);
}

std::int64_t count_parameters(const ModelConfig& c) {
  c.validate();
  const std::int64_t h = c.hidden;
  const std::int64_t f = c.ffn_inner();
  std::int64_t n = 0;
  n += c.vocab * h + 2 * h + c.max_ponder * h + c.mem_tokens * h;
  n += 2 * (c.norm == NormKind::kDerf ? 2 * h : h);
  n += 4 * h * h + 2 * c.heads;
  n += 3 * h * f;
  n += h + 1;
  n += h * c.vocab;
  return n;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template class Model<float>;
template class Model<double>;

}  // namespace utm
