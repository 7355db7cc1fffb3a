#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "utm/act.hpp"
#include "utm/config.hpp"
#include "utm/model.hpp"
#include "utm/sudoku.hpp"
#include "utm/tensor.hpp"

namespace utm::testing {

// Small 4x4 model used by most tests.
inline ModelConfig micro_model(int hidden = 32, int heads = 2, int mem = 2, int k = 3) {
  ModelConfig c;
  c.hidden = hidden;
  c.heads = heads;
  c.head_dim = hidden / heads;
  c.vocab = 6;
  c.seq_len = 16;
  c.mem_tokens = mem;
  c.max_ponder = k;
  return c;
}

inline sudoku::PuzzleBatch micro_batch(int n, std::uint64_t seed = 11) {
  return sudoku::make_batch(sudoku::gen_micro_dataset(seed, n, 4, 12));
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0, bool grad = true) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<T> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(v), grad);
}

struct GradCheck {
  double rel_error = 0.0;   // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_abs = 0.0;     // largest elementwise |analytic - numeric|
  double analytic_norm = 0.0;
  std::size_t checked = 0;
};

// Central differences of a scalar loss against one tensor. At most
// `max_elems` elements are probed (evenly strided) when the tensor is larger.
inline GradCheck grad_check(const std::function<Tensor<double>()>& loss, Tensor<double>& param,
                            double h = 1e-6, std::size_t max_elems = 0) {
  for (auto* t : {&param}) t->zero_grad();
  auto l = loss();
  l.backward();
  std::vector<double> analytic(param.size(), 0.0);
  if (param.has_grad()) std::copy(param.grad().begin(), param.grad().end(), analytic.begin());
  param.zero_grad();

  const std::size_t n = param.size();
  const std::size_t stride = (max_elems && n > max_elems) ? (n + max_elems - 1) / max_elems : 1;
  GradCheck r;
  double diff_sq = 0, a_sq = 0, n_sq = 0;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < n; i += stride) {
    auto data = param.data();
    const double orig = data[i];
    data[i] = orig + h;
    const double up = loss().item();
    data[i] = orig - h;
    const double down = loss().item();
    data[i] = orig;
    const double numeric = (up - down) / (2 * h);
    diff_sq += (analytic[i] - numeric) * (analytic[i] - numeric);
    a_sq += analytic[i] * analytic[i];
    n_sq += numeric * numeric;
    r.max_abs = std::max(r.max_abs, std::abs(analytic[i] - numeric));
    ++r.checked;
  }
  const double denom = std::sqrt(std::max(a_sq, n_sq));
  r.rel_error = denom < 1e-10 ? std::sqrt(diff_sq) : std::sqrt(diff_sq) / denom;
  r.analytic_norm = std::sqrt(a_sq);
  return r;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("utm_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace utm::testing
