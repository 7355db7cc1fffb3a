#include "utm/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace utm::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  }
  return a;
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                   shape_str(b));
}

// Wraps freshly computed values into a node, wiring backward only when some
// parent participates in differentiation.
template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> data,
                      std::initializer_list<const Tensor<T>*> parents, const char* op,
                      std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (NoGradGuard::grad_enabled()) {
    bool any = false;
    for (const auto* p : parents) any = any || p->requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto* p : parents) node->parents.push_back(p->node_ptr());
      node->backward = std::move(backward);
    }
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result_n(Shape shape, Buffer<T> data, std::span<const Tensor<T>> parents,
                        const char* op, std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (NoGradGuard::grad_enabled()) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& p : parents) node->parents.push_back(p.node_ptr());
      node->backward = std::move(backward);
    }
  }
  return Tensor<T>(std::move(node));
}

// Whether b's shape equals the trailing dims of a's shape.
bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t extent = 1;
  std::int64_t inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.extent = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) {
    s.inner *= shape[i];
  }
  return s;
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* op) {
  const bool same = a.shape() == b.shape();
  if (!same && !is_suffix(a.shape(), b.shape())) mismatch(op, a.shape(), b.shape());
  const std::size_t n = a.size();
  const std::size_t m = b.size();
  if (m == 0 && n != 0) mismatch(op, a.shape(), b.shape());
  // a viewed as [blocks, m]; b repeats once per block
  const std::size_t blocks = m ? n / m : 0;
  Buffer<T> out(n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t r = 0; r < blocks; ++r) {
    const T* ar = pa + r * m;
    T* o = out.data() + r * m;
    switch (kind) {
      case BinaryKind::kAdd: for (std::size_t j = 0; j < m; ++j) o[j] = ar[j] + pb[j]; break;
      case BinaryKind::kSub: for (std::size_t j = 0; j < m; ++j) o[j] = ar[j] - pb[j]; break;
      case BinaryKind::kMul: for (std::size_t j = 0; j < m; ++j) o[j] = ar[j] * pb[j]; break;
    }
  }
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, op, [kind, blocks, m](Node<T>& self) {
    const T* g = self.grad.data();
    Node<T>& na = *self.parents[0];
    Node<T>& nb = *self.parents[1];
    if (na.requires_grad) {
      T* ga = na.grad_buffer();
      const T* pb = nb.data.data();
      for (std::size_t r = 0; r < blocks; ++r) {
        const T* gr = g + r * m;
        T* gar = ga + r * m;
        if (kind == BinaryKind::kMul) {
          for (std::size_t j = 0; j < m; ++j) gar[j] += gr[j] * pb[j];
        } else {
          for (std::size_t j = 0; j < m; ++j) gar[j] += gr[j];
        }
      }
    }
    if (nb.requires_grad) {
      T* gb = nb.grad_buffer();
      const T* pa = na.data.data();
      for (std::size_t r = 0; r < blocks; ++r) {
        const T* gr = g + r * m;
        const T* ar = pa + r * m;
        switch (kind) {
          case BinaryKind::kAdd: for (std::size_t j = 0; j < m; ++j) gb[j] += gr[j]; break;
          case BinaryKind::kSub: for (std::size_t j = 0; j < m; ++j) gb[j] -= gr[j]; break;
          case BinaryKind::kMul: for (std::size_t j = 0; j < m; ++j) gb[j] += gr[j] * ar[j]; break;
        }
      }
    }
  });
}

// Elementwise map with derivative expressed through input x and output y.
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, const char* op, F f, D df) {
  const std::size_t n = x.size();
  Buffer<T> out(n);
  const T* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(px[i]);
  return make_result<T>(x.shape(), std::move(out), {&x}, op, [n, df](Node<T>& self) {
    Node<T>& nx = *self.parents[0];
    T* gx = nx.grad_buffer();
    const T* g = self.grad.data();
    const T* xv = nx.data.data();
    const T* yv = self.data.data();
    for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

// Copies src (shape `in`) into dst with axes a0/a1 swapped.
template <typename T>
void swap_axes_copy(const T* src, T* dst, const Shape& in, int a0, int a1, bool accumulate) {
  const int rank = static_cast<int>(in.size());
  Shape out = in;
  std::swap(out[static_cast<std::size_t>(a0)], out[static_cast<std::size_t>(a1)]);
  // strides of the input, permuted into output axis order
  std::vector<std::int64_t> in_stride(static_cast<std::size_t>(rank), 1);
  for (int i = rank - 2; i >= 0; --i) {
    in_stride[static_cast<std::size_t>(i)] =
        in_stride[static_cast<std::size_t>(i) + 1] * in[static_cast<std::size_t>(i) + 1];
  }
  std::vector<std::int64_t> perm_stride = in_stride;
  std::swap(perm_stride[static_cast<std::size_t>(a0)], perm_stride[static_cast<std::size_t>(a1)]);

  const std::int64_t total = numel(in);
  if (total == 0) return;
  const std::int64_t last = out.back();
  const std::int64_t last_stride = perm_stride.back();
  std::vector<std::int64_t> counter(static_cast<std::size_t>(rank), 0);
  std::int64_t src_offset = 0;
  for (std::int64_t o = 0; o < total; o += last) {
    T* d = dst + o;
    const T* s = src + src_offset;
    if (accumulate) {
      for (std::int64_t i = 0; i < last; ++i) d[i] += s[i * last_stride];
    } else {
      for (std::int64_t i = 0; i < last; ++i) d[i] = s[i * last_stride];
    }
    // advance the odometer over all but the last axis
    for (int ax = rank - 2; ax >= 0; --ax) {
      const auto u = static_cast<std::size_t>(ax);
      if (++counter[u] < out[u]) {
        src_offset += perm_stride[u];
        break;
      }
      src_offset -= perm_stride[u] * (out[u] - 1);
      counter[u] = 0;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) mismatch("matmul", a.shape(), b.shape());
  const std::int64_t m = a.dim(-2);
  const std::int64_t k = a.dim(-1);
  const std::int64_t n = b.dim(-1);
  if (b.dim(-2) != k) mismatch("matmul", a.shape(), b.shape());

  Shape out_shape = a.shape();
  out_shape.back() = n;

  if (b.rank() == 2) {
    const std::int64_t rows = static_cast<std::int64_t>(a.size()) / std::max<std::int64_t>(k, 1);
    Buffer<T> out(static_cast<std::size_t>(rows * n));
    if (k == 0) {
      std::fill(out.begin(), out.end(), T(0));
    } else {
      MutMap<T>(out.data(), rows, n).noalias() =
          ConstMap<T>(a.data().data(), rows, k) * ConstMap<T>(b.data().data(), k, n);
    }
    return make_result<T>(std::move(out_shape), std::move(out), {&a, &b}, "matmul",
                          [rows, k, n](Node<T>& self) {
                            Node<T>& na = *self.parents[0];
                            Node<T>& nb = *self.parents[1];
                            ConstMap<T> g(self.grad.data(), rows, n);
                            if (na.requires_grad) {
                              MutMap<T>(na.grad_buffer(), rows, k).noalias() +=
                                  g * ConstMap<T>(nb.data.data(), k, n).transpose();
                            }
                            if (nb.requires_grad) {
                              MutMap<T>(nb.grad_buffer(), k, n).noalias() +=
                                  ConstMap<T>(na.data.data(), rows, k).transpose() * g;
                            }
                          });
  }

  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    mismatch("matmul", a.shape(), b.shape());
  }
  const std::int64_t batch = static_cast<std::int64_t>(a.size()) / std::max<std::int64_t>(m * k, 1);
  Buffer<T> out(static_cast<std::size_t>(batch * m * n), T(0));
  if (k > 0) {
    for (std::int64_t i = 0; i < batch; ++i) {
      MutMap<T>(out.data() + i * m * n, m, n).noalias() =
          ConstMap<T>(a.data().data() + i * m * k, m, k) *
          ConstMap<T>(b.data().data() + i * k * n, k, n);
    }
  }
  return make_result<T>(std::move(out_shape), std::move(out), {&a, &b}, "bmm",
                        [batch, m, k, n](Node<T>& self) {
                          Node<T>& na = *self.parents[0];
                          Node<T>& nb = *self.parents[1];
                          for (std::int64_t i = 0; i < batch; ++i) {
                            ConstMap<T> g(self.grad.data() + i * m * n, m, n);
                            if (na.requires_grad) {
                              MutMap<T>(na.grad_buffer() + i * m * k, m, k).noalias() +=
                                  g * ConstMap<T>(nb.data.data() + i * k * n, k, n).transpose();
                            }
                            if (nb.requires_grad) {
                              MutMap<T>(nb.grad_buffer() + i * k * n, k, n).noalias() +=
                                  ConstMap<T>(na.data.data() + i * m * k, m, k).transpose() * g;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kAdd, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kMul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(
      x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  return unary(
      x, "add_scalar", [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.rank() < 1) mismatch("scale_rows", x.shape(), w.shape());
  Shape rows_shape(x.shape().begin(), x.shape().end() - 1);
  if (rows_shape != w.shape()) mismatch("scale_rows", x.shape(), w.shape());
  const std::int64_t h = x.dim(-1);
  const std::size_t rows = w.size();
  Buffer<T> out(x.size());
  const T* px = x.data().data();
  const T* pw = w.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T s = pw[r];
    for (std::int64_t j = 0; j < h; ++j) out[r * h + j] = px[r * h + j] * s;
  }
  return make_result<T>(x.shape(), std::move(out), {&x, &w}, "scale_rows",
                        [rows, h](Node<T>& self) {
                          Node<T>& nx = *self.parents[0];
                          Node<T>& nw = *self.parents[1];
                          const T* g = self.grad.data();
                          if (nx.requires_grad) {
                            T* gx = nx.grad_buffer();
                            for (std::size_t r = 0; r < rows; ++r) {
                              const T s = nw.data[r];
                              for (std::int64_t j = 0; j < h; ++j) gx[r * h + j] += g[r * h + j] * s;
                            }
                          }
                          if (nw.requires_grad) {
                            T* gw = nw.grad_buffer();
                            for (std::size_t r = 0; r < rows; ++r) {
                              T acc = 0;
                              for (std::int64_t j = 0; j < h; ++j) {
                                acc += g[r * h + j] * nx.data[r * h + j];
                              }
                              gw[r] += acc;
                            }
                          }
                        });
}

template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  const auto n = static_cast<Eigen::Index>(x.size());
  Buffer<T> out(x.size());
  ArrayMap<T>(out.data(), n) = ConstArrayMap<T>(x.data().data(), n).logistic();
  return make_result<T>(x.shape(), std::move(out), {&x}, "sigmoid", [n](Node<T>& self) {
    const ConstArrayMap<T> y(self.data.data(), n);
    ArrayMap<T>(self.parents[0]->grad_buffer(), n) +=
        ConstArrayMap<T>(self.grad.data(), n) * y * (T(1) - y);
  });
}

template <typename T>
Tensor<T> erf(const Tensor<T>& x) {
  const auto n = static_cast<Eigen::Index>(x.size());
  Buffer<T> out(x.size());
  ArrayMap<T>(out.data(), n) = ConstArrayMap<T>(x.data().data(), n).erf();
  return make_result<T>(x.shape(), std::move(out), {&x}, "erf", [n](Node<T>& self) {
    Node<T>& nx = *self.parents[0];
    const ConstArrayMap<T> xv(nx.data.data(), n);
    const T c = T(2) / std::sqrt(std::numbers::pi_v<T>);
    ArrayMap<T>(nx.grad_buffer(), n) += ConstArrayMap<T>(self.grad.data(), n) * c * (-xv.square()).exp();
  });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  const auto n = static_cast<Eigen::Index>(x.size());
  Buffer<T> out(x.size());
  const ConstArrayMap<T> xv(x.data().data(), n);
  ArrayMap<T>(out.data(), n) = xv * xv.logistic();
  return make_result<T>(x.shape(), std::move(out), {&x}, "silu", [n](Node<T>& self) {
    Node<T>& nx = *self.parents[0];
    const ConstArrayMap<T> v(nx.data.data(), n);
    const Eigen::Array<T, Eigen::Dynamic, 1> s = v.logistic();
    ArrayMap<T>(nx.grad_buffer(), n) += ConstArrayMap<T>(self.grad.data(), n) * s * (T(1) + v * (T(1) - s));
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), "softmax");
  const AxisSplit s = split_at(x.shape(), ax);
  Buffer<T> out(x.size());
  const T* px = x.data().data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.extent * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t j = 0; j < s.extent; ++j) mx = std::max(mx, px[base + j * s.inner]);
      T total = 0;
      for (std::int64_t j = 0; j < s.extent; ++j) {
        const T e = std::exp(px[base + j * s.inner] - mx);
        out[static_cast<std::size_t>(base + j * s.inner)] = e;
        total += e;
      }
      for (std::int64_t j = 0; j < s.extent; ++j) {
        out[static_cast<std::size_t>(base + j * s.inner)] /= total;
      }
    }
  }
  return make_result<T>(x.shape(), std::move(out), {&x}, "softmax", [s](Node<T>& self) {
    Node<T>& nx = *self.parents[0];
    T* gx = nx.grad_buffer();
    const T* g = self.grad.data();
    const T* y = self.data.data();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t in = 0; in < s.inner; ++in) {
        const std::int64_t base = o * s.extent * s.inner + in;
        T dot = 0;
        for (std::int64_t j = 0; j < s.extent; ++j) {
          dot += g[base + j * s.inner] * y[base + j * s.inner];
        }
        for (std::int64_t j = 0; j < s.extent; ++j) {
          const auto idx = base + j * s.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  const int ax = normalize_axis(axis, static_cast<int>(first.size()), "concat");
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(ax)] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != first.size()) mismatch("concat", first, probe);
    out_shape[static_cast<std::size_t>(ax)] += probe[static_cast<std::size_t>(ax)];
    probe[static_cast<std::size_t>(ax)] = first[static_cast<std::size_t>(ax)];
    if (probe != first) mismatch("concat", first, p.shape());
  }
  const AxisSplit os = split_at(out_shape, ax);
  Buffer<T> out(static_cast<std::size_t>(numel(out_shape)));
  std::vector<std::int64_t> extents;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t e = p.dim(ax);
    extents.push_back(e);
    const std::int64_t block = e * os.inner;
    for (std::int64_t o = 0; o < os.outer; ++o) {
      std::copy_n(p.data().data() + o * block, block,
                  out.data() + o * os.extent * os.inner + offset * os.inner);
    }
    offset += e;
  }
  return make_result_n<T>(std::move(out_shape), std::move(out), parts, "concat",
                          [os, extents](Node<T>& self) {
                            std::int64_t offset = 0;
                            for (std::size_t i = 0; i < self.parents.size(); ++i) {
                              Node<T>& np = *self.parents[i];
                              const std::int64_t block = extents[i] * os.inner;
                              if (np.requires_grad) {
                                T* gp = np.grad_buffer();
                                for (std::int64_t o = 0; o < os.outer; ++o) {
                                  const T* src = self.grad.data() + o * os.extent * os.inner +
                                                 offset * os.inner;
                                  for (std::int64_t j = 0; j < block; ++j) gp[o * block + j] += src[j];
                                }
                              }
                              offset += extents[i];
                            }
                          });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length) {
  const int ax = normalize_axis(axis, x.rank(), "slice");
  const AxisSplit s = split_at(x.shape(), ax);
  if (start < 0 || length < 0 || start + length > s.extent) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") out of bounds for " +
                     shape_str(x.shape()) + " axis " + std::to_string(ax));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(ax)] = length;
  const std::int64_t block = length * s.inner;
  Buffer<T> out(static_cast<std::size_t>(s.outer * block));
  for (std::int64_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data().data() + o * s.extent * s.inner + start * s.inner, block,
                out.data() + o * block);
  }
  return make_result<T>(std::move(out_shape), std::move(out), {&x}, "slice",
                        [s, start, block](Node<T>& self) {
                          Node<T>& nx = *self.parents[0];
                          T* gx = nx.grad_buffer();
                          for (std::int64_t o = 0; o < s.outer; ++o) {
                            T* dst = gx + o * s.extent * s.inner + start * s.inner;
                            const T* src = self.grad.data() + o * block;
                            for (std::int64_t j = 0; j < block; ++j) dst[j] += src[j];
                          }
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != static_cast<std::int64_t>(x.size())) mismatch("reshape", x.shape(), shape);
  Buffer<T> out(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(out), {&x}, "reshape", [](Node<T>& self) {
    Node<T>& nx = *self.parents[0];
    T* gx = nx.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1) {
  const int a0 = normalize_axis(axis0, x.rank(), "transpose");
  const int a1 = normalize_axis(axis1, x.rank(), "transpose");
  Shape out_shape = x.shape();
  std::swap(out_shape[static_cast<std::size_t>(a0)], out_shape[static_cast<std::size_t>(a1)]);
  Buffer<T> out(x.size());
  swap_axes_copy(x.data().data(), out.data(), x.shape(), a0, a1, false);
  Shape out_copy = out_shape;
  return make_result<T>(std::move(out_shape), std::move(out), {&x}, "transpose",
                        [out_copy, a0, a1](Node<T>& self) {
                          Node<T>& nx = *self.parents[0];
                          swap_axes_copy(self.grad.data(), nx.grad_buffer(), out_copy, a0, a1, true);
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), "sum");
  const AxisSplit s = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + ax);
  Buffer<T> out(static_cast<std::size_t>(s.outer * s.inner), T(0));
  const T* px = x.data().data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t j = 0; j < s.extent; ++j) {
      for (std::int64_t in = 0; in < s.inner; ++in) {
        out[static_cast<std::size_t>(o * s.inner + in)] += px[(o * s.extent + j) * s.inner + in];
      }
    }
  }
  return make_result<T>(std::move(out_shape), std::move(out), {&x}, "sum", [s](Node<T>& self) {
    Node<T>& nx = *self.parents[0];
    T* gx = nx.grad_buffer();
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t j = 0; j < s.extent; ++j) {
        for (std::int64_t in = 0; in < s.inner; ++in) {
          gx[(o * s.extent + j) * s.inner + in] += self.grad[static_cast<std::size_t>(o * s.inner + in)];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), "mean");
  const auto extent = x.dim(ax);
  if (extent == 0) throw ShapeError("mean: empty axis in " + shape_str(x.shape()));
  return scale(sum(x, ax), T(1) / static_cast<T>(extent));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  const std::size_t n = x.size();
  return make_result<T>({}, {total}, {&x}, "sum_all", [n](Node<T>& self) {
    Node<T>& nx = *self.parents[0];
    T* gx = nx.grad_buffer();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < n; ++i) gx[i] += g;
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  if (x.size() == 0) throw ShapeError("mean_all: empty tensor");
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids,
                    const Shape& ids_shape) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  if (numel(ids_shape) != static_cast<std::int64_t>(ids.size())) {
    throw ShapeError("embedding: id count " + std::to_string(ids.size()) +
                     " does not match ids shape " + shape_str(ids_shape));
  }
  const std::int64_t vocab = table.dim(0);
  const std::int64_t h = table.dim(1);
  for (auto id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside vocab of " +
                              std::to_string(vocab));
    }
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(h);
  Buffer<T> out(ids.size() * static_cast<std::size_t>(h));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.data().data() + ids[i] * h, h, out.data() + i * h);
  }
  std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
  return make_result<T>(std::move(out_shape), std::move(out), {&table}, "embedding",
                        [id_copy = std::move(id_copy), h](Node<T>& self) {
                          Node<T>& nt = *self.parents[0];
                          T* gt = nt.grad_buffer();
                          for (std::size_t i = 0; i < id_copy.size(); ++i) {
                            T* dst = gt + id_copy[i] * h;
                            const T* src = self.grad.data() + i * h;
                            for (std::int64_t j = 0; j < h; ++j) dst[j] += src[j];
                          }
                        });
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  const std::int64_t h = x.dim(-1);
  const bool has_gain = gain.defined();
  if (has_gain && gain.shape() != Shape{h}) mismatch("rms_norm", x.shape(), gain.shape());
  const std::size_t rows = x.size() / static_cast<std::size_t>(std::max<std::int64_t>(h, 1));
  Buffer<T> out(x.size());
  Buffer<T> inv_rms(rows);
  const T* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::int64_t j = 0; j < h; ++j) ss += px[r * h + j] * px[r * h + j];
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(h) + eps);
    inv_rms[r] = inv;
    for (std::int64_t j = 0; j < h; ++j) {
      out[r * h + j] = px[r * h + j] * inv * (has_gain ? gain.data()[static_cast<std::size_t>(j)] : T(1));
    }
  }
  auto backward = [rows, h, has_gain, inv_rms = std::move(inv_rms)](Node<T>& self) {
    Node<T>& nx = *self.parents[0];
    Node<T>* ng = has_gain ? self.parents[1].get() : nullptr;
    const T* g = self.grad.data();
    const T* xv = nx.data.data();
    T* gx = nx.requires_grad ? nx.grad_buffer() : nullptr;
    T* gg = (ng && ng->requires_grad) ? ng->grad_buffer() : nullptr;
    Buffer<T> dn(static_cast<std::size_t>(h));
    for (std::size_t r = 0; r < rows; ++r) {
      const T inv = inv_rms[r];
      T dot = 0;
      for (std::int64_t j = 0; j < h; ++j) {
        const T n = xv[r * h + j] * inv;
        const T gj = ng ? ng->data[static_cast<std::size_t>(j)] : T(1);
        dn[static_cast<std::size_t>(j)] = g[r * h + j] * gj;
        if (gg) gg[j] += g[r * h + j] * n;
        dot += dn[static_cast<std::size_t>(j)] * n;
      }
      if (gx) {
        dot /= static_cast<T>(h);
        for (std::int64_t j = 0; j < h; ++j) {
          gx[r * h + j] += (dn[static_cast<std::size_t>(j)] - xv[r * h + j] * inv * dot) * inv;
        }
      }
    }
  };
  if (has_gain) return make_result<T>(x.shape(), std::move(out), {&x, &gain}, "rms_norm", backward);
  return make_result<T>(x.shape(), std::move(out), {&x}, "rms_norm", backward);
}

template <typename T>
Tensor<T> head_rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  if (x.rank() < 2) mismatch("head_rms_norm", x.shape(), gain.shape());
  const std::int64_t heads = x.dim(-2);
  const std::int64_t d = x.dim(-1);
  if (gain.shape() != Shape{heads}) mismatch("head_rms_norm", x.shape(), gain.shape());
  const std::size_t vecs = x.size() / static_cast<std::size_t>(std::max<std::int64_t>(d, 1));
  Buffer<T> out(x.size());
  Buffer<T> inv_rms(vecs);
  const T* px = x.data().data();
  const T* pg = gain.data().data();
  for (std::size_t v = 0; v < vecs; ++v) {
    T ss = 0;
    for (std::int64_t j = 0; j < d; ++j) ss += px[v * d + j] * px[v * d + j];
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
    inv_rms[v] = inv;
    const T g = pg[v % static_cast<std::size_t>(heads)];
    for (std::int64_t j = 0; j < d; ++j) out[v * d + j] = px[v * d + j] * inv * g;
  }
  return make_result<T>(
      x.shape(), std::move(out), {&x, &gain}, "head_rms_norm",
      [vecs, heads, d, inv_rms = std::move(inv_rms)](Node<T>& self) {
        Node<T>& nx = *self.parents[0];
        Node<T>& ng = *self.parents[1];
        const T* g = self.grad.data();
        const T* xv = nx.data.data();
        T* gx = nx.requires_grad ? nx.grad_buffer() : nullptr;
        T* gg = ng.requires_grad ? ng.grad_buffer() : nullptr;
        for (std::size_t v = 0; v < vecs; ++v) {
          const T inv = inv_rms[v];
          const auto head = v % static_cast<std::size_t>(heads);
          const T gain_h = ng.data[head];
          T dot = 0;
          T gain_acc = 0;
          for (std::int64_t j = 0; j < d; ++j) {
            const T n = xv[v * d + j] * inv;
            gain_acc += g[v * d + j] * n;
            dot += g[v * d + j] * gain_h * n;
          }
          if (gg) gg[head] += gain_acc;
          if (gx) {
            dot /= static_cast<T>(d);
            for (std::int64_t j = 0; j < d; ++j) {
              gx[v * d + j] += (g[v * d + j] * gain_h - xv[v * d + j] * inv * dot) * inv;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::span<const std::int64_t> positions, double base) {
  if (x.rank() < 3) throw ShapeError("rope: expected [..., N, heads, D], got " + shape_str(x.shape()));
  const std::int64_t n_rows = x.dim(-3);
  const std::int64_t heads = x.dim(-2);
  const std::int64_t d = x.dim(-1);
  if (d % 2 != 0) throw ShapeError("rope: head dim must be even, got " + shape_str(x.shape()));
  if (static_cast<std::int64_t>(positions.size()) != n_rows) {
    throw ShapeError("rope: " + std::to_string(positions.size()) + " positions for " +
                     shape_str(x.shape()));
  }
  const std::int64_t half = d / 2;
  Buffer<T> cos_t(static_cast<std::size_t>(n_rows * half));
  Buffer<T> sin_t(cos_t.size());
  for (std::int64_t r = 0; r < n_rows; ++r) {
    for (std::int64_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double angle = static_cast<double>(positions[static_cast<std::size_t>(r)]) * freq;
      cos_t[static_cast<std::size_t>(r * half + i)] = static_cast<T>(std::cos(angle));
      sin_t[static_cast<std::size_t>(r * half + i)] = static_cast<T>(std::sin(angle));
    }
  }
  const std::size_t outer = x.size() / static_cast<std::size_t>(n_rows * heads * d);
  Buffer<T> out(x.size());
  const T* px = x.data().data();
  auto rotate = [=](const T* src, T* dst, const Buffer<T>& c, const Buffer<T>& s,
                    T sign, bool accumulate) {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::int64_t r = 0; r < n_rows; ++r) {
        const T* cr = c.data() + r * half;
        const T* sr = s.data() + r * half;
        for (std::int64_t hh = 0; hh < heads; ++hh) {
          const std::size_t off = ((o * static_cast<std::size_t>(n_rows) + r) * heads + hh) * d;
          for (std::int64_t i = 0; i < half; ++i) {
            const T x1 = src[off + i];
            const T x2 = src[off + i + half];
            const T y1 = x1 * cr[i] - sign * x2 * sr[i];
            const T y2 = sign * x1 * sr[i] + x2 * cr[i];
            if (accumulate) {
              dst[off + i] += y1;
              dst[off + i + half] += y2;
            } else {
              dst[off + i] = y1;
              dst[off + i + half] = y2;
            }
          }
        }
      }
    }
  };
  rotate(px, out.data(), cos_t, sin_t, T(1), false);
  return make_result<T>(x.shape(), std::move(out), {&x}, "rope",
                        [rotate, cos_t = std::move(cos_t), sin_t = std::move(sin_t)](Node<T>& self) {
                          Node<T>& nx = *self.parents[0];
                          // inverse rotation carries the gradient back
                          rotate(self.grad.data(), nx.grad_buffer(), cos_t, sin_t, T(-1), true);
                        });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask) {
  const std::int64_t v = logits.dim(-1);
  const std::size_t rows = logits.size() / static_cast<std::size_t>(std::max<std::int64_t>(v, 1));
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  if (!mask.empty() && mask.size() != rows) {
    throw ShapeError("cross_entropy: mask length " + std::to_string(mask.size()) +
                     " for logits " + shape_str(logits.shape()));
  }
  for (auto t : targets) {
    if (t < 0 || t >= v) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside vocab of " +
                              std::to_string(v));
    }
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) count += (mask.empty() || mask[r]) ? 1 : 0;
  if (count == 0) throw std::invalid_argument("cross_entropy: mask selects no rows");

  const T* pl = logits.data().data();
  Buffer<T> probs(logits.size());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = pl + r * v;
    T mx = *std::max_element(row, row + v);
    T z = 0;
    for (std::int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    for (std::int64_t j = 0; j < v; ++j) probs[r * v + j] = std::exp(row[j] - mx) / z;
    if (mask.empty() || mask[r]) total += (std::log(z) + mx) - row[targets[r]];
  }
  const T inv_count = T(1) / static_cast<T>(count);
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return make_result<T>(
      {}, {total * inv_count}, {&logits}, "cross_entropy",
      [rows, v, inv_count, probs = std::move(probs), tgt = std::move(tgt),
       msk = std::move(msk)](Node<T>& self) {
        Node<T>& nl = *self.parents[0];
        T* gl = nl.grad_buffer();
        const T g = self.grad[0] * inv_count;
        for (std::size_t r = 0; r < rows; ++r) {
          if (!msk.empty() && !msk[r]) continue;
          for (std::int64_t j = 0; j < v; ++j) {
            gl[r * v + j] += g * (probs[r * v + j] - (j == tgt[r] ? T(1) : T(0)));
          }
        }
      });
}

#define UTM_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                            \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                       \
  template Tensor<T> scale_rows(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> sigmoid(const Tensor<T>&);                                             \
  template Tensor<T> erf(const Tensor<T>&);                                                 \
  template Tensor<T> silu(const Tensor<T>&);                                                \
  template Tensor<T> softmax(const Tensor<T>&, int);                                        \
  template Tensor<T> concat(std::span<const Tensor<T>>, int);                               \
  template Tensor<T> slice(const Tensor<T>&, int, std::int64_t, std::int64_t);              \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                      \
  template Tensor<T> transpose(const Tensor<T>&, int, int);                                 \
  template Tensor<T> sum(const Tensor<T>&, int);                                            \
  template Tensor<T> mean(const Tensor<T>&, int);                                           \
  template Tensor<T> sum_all(const Tensor<T>&);                                             \
  template Tensor<T> mean_all(const Tensor<T>&);                                            \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>, const Shape&); \
  template Tensor<T> rms_norm(const Tensor<T>&, const Tensor<T>&, T);                       \
  template Tensor<T> head_rms_norm(const Tensor<T>&, const Tensor<T>&, T);                  \
  template Tensor<T> rope(const Tensor<T>&, std::span<const std::int64_t>, double);         \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>,         \
                                   std::span<const std::uint8_t>);

UTM_INSTANTIATE_OPS(float)
UTM_INSTANTIATE_OPS(double)

#undef UTM_INSTANTIATE_OPS

}  // namespace utm::ops
