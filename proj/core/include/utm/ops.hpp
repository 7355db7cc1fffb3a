#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "utm/tensor.hpp"

// Differentiable primitives. Every op checks shapes up front and throws
// ShapeError naming both operands on mismatch. The only implicit broadcast is
// a right operand whose shape equals the trailing dims of the left operand
// (bias / per-feature scale); everything else must match exactly.
namespace utm::ops {

// a [..., M, K] x b [K, N]  or  a [..., M, K] x b [..., K, N] (same batch dims).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value);

// x [..., H] * w [...]: every length-H row of x scaled by its own scalar.
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& w);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> erf(const Tensor<T>& x);
template <typename T>
Tensor<T> silu(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1);

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, int axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1);

template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis);
template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis);
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);
template <typename T>
Tensor<T> mean_all(const Tensor<T>& x);

// Rows of table [V, H] gathered by ids; result shape is ids_shape + [H].
// Throws std::out_of_range for an id outside [0, V).
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids,
                    const Shape& ids_shape);

// Root-mean-square normalization over the last axis, times gain [H] when
// gain is defined.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps);

// x [..., heads, D]: RMS-normalize each head vector, then scale by gain[head].
template <typename T>
Tensor<T> head_rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps);

// Rotary embedding on x [..., N, heads, D] (D even, half-split pairs).
// positions[n] is the rotary index of row n.
template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::span<const std::int64_t> positions,
               double base = 10000.0);

// Mean token cross-entropy of logits [..., V] against integer targets.
// A non-empty mask selects which rows count; the mean is over selected rows.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask = {});

}  // namespace utm::ops
