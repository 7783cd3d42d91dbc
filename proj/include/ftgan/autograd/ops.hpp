#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "ftgan/autograd/tensor.hpp"
#include "ftgan/core/random.hpp"

namespace ftgan::ag {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C (M x N) = op(A) * op(B), accumulated into C when `accumulate`.
template <class T>
void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, const T* a_ptr, const T* b_ptr,
          T* c_ptr, bool accumulate) {
  Eigen::Map<const RowMat<T>> a(a_ptr, ta ? k : m, ta ? m : k);
  Eigen::Map<const RowMat<T>> b(b_ptr, tb ? n : k, tb ? k : n);
  Eigen::Map<RowMat<T>> c(c_ptr, m, n);
  if (!accumulate) c.setZero();
  if (!ta && !tb) {
    c.noalias() += a * b;
  } else if (ta && !tb) {
    c.noalias() += a.transpose() * b;
  } else if (!ta && tb) {
    c.noalias() += a * b.transpose();
  } else {
    c.noalias() += a.transpose() * b.transpose();
  }
}

template <class T, class F, class G>
Tensor<T> unary_op(const Tensor<T>& x, const char* name, F f, G dfdx) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  auto xn = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {&x}, name, [xn, dfdx](Node<T>& self) {
    auto& gx = xn->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * dfdx(xn->value[i], self.value[i]);
  });
}

inline std::size_t axis_index(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  FTGAN_EXPECTS(axis >= 0 && axis < r, "axis ", axis, " out of range for rank ", rank);
  return static_cast<std::size_t>(axis);
}

inline std::int64_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::int64_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

template <class T>
void expect_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  FTGAN_EXPECTS(a.shape() == b.shape(), op, ": shape mismatch ", to_string(a.shape()), " vs ", to_string(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect_same_shape(a, b, "add");
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, "add", [an, bn](Node<T>& self) {
    for (auto* n : {an.get(), bn.get()}) {
      if (!n->requires_grad) continue;
      auto& g = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect_same_shape(a, b, "sub");
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, "sub", [an, bn](Node<T>& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect_same_shape(a, b, "mul");
  std::vector<T> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, "mul", [an, bn](Node<T>& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary_op(a, "scale", [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::unary_op(a, "add_scalar", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

/// a * s where `s` is a learned single-element tensor.
template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s) {
  FTGAN_EXPECTS(s.numel() == 1, "mul_scalar: factor must have one element, got ", to_string(s.shape()));
  const T f = s.item();
  std::vector<T> out(a.values());
  for (auto& v : out) v *= f;
  auto an = a.node_ptr(), sn = s.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {&a, &s}, "mul_scalar", [an, sn](Node<T>& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      const T f = sn->value[0];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * f;
    }
    if (sn->requires_grad) {
      T acc = 0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * an->value[i];
      sn->ensure_grad()[0] += acc;
    }
  });
}

/// x[N, C, ...] * w[C], broadcasting over every other axis.
template <class T>
Tensor<T> mul_channels(const Tensor<T>& x, const Tensor<T>& w) {
  FTGAN_EXPECTS(x.rank() >= 2 && w.numel() == x.dim(1), "mul_channels: ", to_string(x.shape()), " vs ",
                to_string(w.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
  std::vector<T> out(x.values());
  const auto& wv = w.values();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      for (std::int64_t k = 0; k < inner; ++k) out[(i * c + j) * inner + k] *= wv[j];
  auto xn = x.node_ptr(), wn = w.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {&x, &w}, "mul_channels",
                        [xn, wn, n, c, inner](Node<T>& self) {
                          if (xn->requires_grad) {
                            auto& g = xn->ensure_grad();
                            for (std::int64_t i = 0; i < n; ++i)
                              for (std::int64_t j = 0; j < c; ++j)
                                for (std::int64_t k = 0; k < inner; ++k) {
                                  const auto idx = (i * c + j) * inner + k;
                                  g[idx] += self.grad[idx] * wn->value[j];
                                }
                          }
                          if (wn->requires_grad) {
                            auto& g = wn->ensure_grad();
                            for (std::int64_t i = 0; i < n; ++i)
                              for (std::int64_t j = 0; j < c; ++j)
                                for (std::int64_t k = 0; k < inner; ++k) {
                                  const auto idx = (i * c + j) * inner + k;
                                  g[j] += self.grad[idx] * xn->value[idx];
                                }
                          }
                        });
}

/// x[N, C, ...] + b[C] (bias over the channel axis).
template <class T>
Tensor<T> add_channels(const Tensor<T>& x, const Tensor<T>& b) {
  FTGAN_EXPECTS(x.rank() >= 2 && b.numel() == x.dim(1), "add_channels: ", to_string(x.shape()), " vs ",
                to_string(b.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
  std::vector<T> out(x.values());
  const auto& bv = b.values();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      for (std::int64_t k = 0; k < inner; ++k) out[(i * c + j) * inner + k] += bv[j];
  auto xn = x.node_ptr(), bn = b.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {&x, &b}, "add_channels", [xn, bn, n, c, inner](Node<T>& self) {
    if (xn->requires_grad) {
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j)
          for (std::int64_t k = 0; k < inner; ++k) g[j] += self.grad[(i * c + j) * inner + k];
    }
  });
}

template <class T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  return detail::unary_op(x, "reciprocal", [](T v) { return T(1) / v; }, [](T, T y) { return -y * y; });
}

// ---------------------------------------------------------------------------
// Activations

// NaN passes through both rectifiers.
template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_op(x, "relu", [](T v) { return v <= T(0) ? T(0) : v; },
                          [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  return detail::unary_op(x, "leaky_relu", [slope](T v) { return v <= T(0) ? slope * v : v; },
                          [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <class T>
T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

/// log(sigmoid(v)) without overflow for large |v|.
template <class T>
T stable_log_sigmoid(T v) {
  if (v >= T(0)) return -std::log1p(std::exp(-v));
  return v - std::log1p(std::exp(v));
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op(x, "sigmoid", [](T v) { return stable_sigmoid(v); },
                          [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary_op(x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_op(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary_op(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> log_sigmoid(const Tensor<T>& x) {
  return detail::unary_op(x, "log_sigmoid", [](T v) { return stable_log_sigmoid(v); },
                          [](T v, T) { return stable_sigmoid(-v); });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  auto xn = x.node_ptr();
  return make_result<T>({1}, {acc}, {&x}, "sum", [xn](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  FTGAN_EXPECTS(x.numel() > 0, "mean of an empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sum of squares, used for norms and penalties.
template <class T>
Tensor<T> sum_squares(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v * v;
  auto xn = x.node_ptr();
  return make_result<T>({1}, {acc}, {&x}, "sum_squares", [xn](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * xn->value[i] * self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

/// Same data, new shape. One entry may be -1 and is inferred.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      FTGAN_EXPECTS(infer < 0, "reshape: more than one inferred dimension");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    FTGAN_EXPECTS(known > 0 && x.numel() % known == 0, "reshape: cannot infer dimension for ",
                  to_string(x.shape()));
    shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  }
  FTGAN_EXPECTS(numel(shape) == x.numel(), "reshape: ", to_string(x.shape()), " -> ", to_string(shape));
  auto xn = x.node_ptr();
  return make_result<T>(std::move(shape), x.values(), {&x}, "reshape", [xn](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Concatenate along `axis`; all other dimensions must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  FTGAN_EXPECTS(!parts.empty(), "concat of zero tensors");
  const Shape& ref = parts.front().shape();
  const std::size_t ax = detail::axis_index(axis, ref.size());
  Shape out_shape = ref;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    FTGAN_EXPECTS(p.rank() == ref.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      FTGAN_EXPECTS(i == ax || p.shape()[i] == ref[i], "concat: shape mismatch ", to_string(p.shape()), " vs ",
                    to_string(ref));
    }
    out_shape[ax] += p.shape()[ax];
  }
  const std::int64_t outer = detail::prod(ref, 0, ax);
  const std::int64_t inner = detail::prod(ref, ax + 1, ref.size());
  const std::int64_t total = out_shape[ax];
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t d = p.shape()[ax];
    const auto& pv = p.values();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * d * inner, d * inner, out.begin() + (o * total + off) * inner);
    off += d;
  }
  std::vector<typename Tensor<T>::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  return make_result<T>(out_shape, std::move(out), parts, "concat",
                        [nodes, offsets, outer, inner, total, ax](Node<T>& self) {
                          for (std::size_t k = 0; k < nodes.size(); ++k) {
                            auto& n = nodes[k];
                            if (!n->requires_grad) continue;
                            auto& g = n->ensure_grad();
                            const std::int64_t d = n->shape[ax];
                            for (std::int64_t o = 0; o < outer; ++o) {
                              const T* src = self.grad.data() + (o * total + offsets[k]) * inner;
                              T* dst = g.data() + o * d * inner;
                              for (std::int64_t i = 0; i < d * inner; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

/// Slice [start, start + length) along `axis`.
template <class T>
Tensor<T> narrow(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length) {
  const std::size_t ax = detail::axis_index(axis, x.rank());
  const std::int64_t d = x.shape()[ax];
  FTGAN_EXPECTS(start >= 0 && length >= 0 && start + length <= d, "narrow: range [", start, ", ", start + length,
                ") outside dimension of size ", d);
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  const std::int64_t outer = detail::prod(x.shape(), 0, ax);
  const std::int64_t inner = detail::prod(x.shape(), ax + 1, x.rank());
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  const auto& xv = x.values();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + (o * d + start) * inner, length * inner, out.begin() + o * length * inner);
  auto xn = x.node_ptr();
  return make_result<T>(out_shape, std::move(out), {&x}, "narrow",
                        [xn, outer, inner, d, start, length](Node<T>& self) {
                          auto& g = xn->ensure_grad();
                          for (std::int64_t o = 0; o < outer; ++o) {
                            const T* src = self.grad.data() + o * length * inner;
                            T* dst = g.data() + (o * d + start) * inner;
                            for (std::int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
                          }
                        });
}

/// Stack equally shaped tensors along a new axis.
template <class T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts, int axis) {
  FTGAN_EXPECTS(!parts.empty(), "stack of zero tensors");
  const std::size_t rank = parts.front().rank();
  int ax = axis < 0 ? axis + static_cast<int>(rank) + 1 : axis;
  FTGAN_EXPECTS(ax >= 0 && ax <= static_cast<int>(rank), "stack: axis out of range");
  std::vector<Tensor<T>> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    FTGAN_EXPECTS(p.shape() == parts.front().shape(), "stack: shape mismatch");
    Shape s = p.shape();
    s.insert(s.begin() + ax, 1);
    expanded.push_back(reshape(p, s));
  }
  return concat(expanded, ax);
}

/// Swap the last two axes: [..., M, N] -> [..., N, M].
template <class T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  FTGAN_EXPECTS(x.rank() >= 2, "transpose_last2 needs rank >= 2");
  const std::int64_t m = x.dim(-2), n = x.dim(-1), batch = x.numel() / (m * n);
  Shape out_shape = x.shape();
  std::swap(out_shape[x.rank() - 1], out_shape[x.rank() - 2]);
  std::vector<T> out(x.values().size());
  const auto& xv = x.values();
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) out[(b * n + j) * m + i] = xv[(b * m + i) * n + j];
  auto xn = x.node_ptr();
  return make_result<T>(out_shape, std::move(out), {&x}, "transpose", [xn, batch, m, n](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) g[(b * m + i) * n + j] += self.grad[(b * n + j) * m + i];
  });
}

/// Tile a tensor whose leading dimension is 1 into `count` copies.
template <class T>
Tensor<T> repeat_batch(const Tensor<T>& x, std::int64_t count) {
  FTGAN_EXPECTS(x.rank() >= 1 && x.dim(0) == 1, "repeat_batch needs a leading dimension of 1, got ",
                to_string(x.shape()));
  Shape out_shape = x.shape();
  out_shape[0] = count;
  const std::int64_t chunk = x.numel();
  std::vector<T> out(static_cast<std::size_t>(chunk * count));
  for (std::int64_t b = 0; b < count; ++b) std::copy(x.values().begin(), x.values().end(), out.begin() + b * chunk);
  auto xn = x.node_ptr();
  return make_result<T>(out_shape, std::move(out), {&x}, "repeat_batch", [xn, chunk, count](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::int64_t b = 0; b < count; ++b)
      for (std::int64_t i = 0; i < chunk; ++i) g[i] += self.grad[b * chunk + i];
  });
}

/// [N, C] -> [N, C, H, W] by spatial replication.
template <class T>
Tensor<T> repeat_spatial(const Tensor<T>& x, std::int64_t h, std::int64_t w) {
  FTGAN_EXPECTS(x.rank() == 2, "repeat_spatial expects [N, C], got ", to_string(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = h * w;
  std::vector<T> out(static_cast<std::size_t>(n * c * hw));
  const auto& xv = x.values();
  for (std::int64_t i = 0; i < n * c; ++i) std::fill_n(out.begin() + i * hw, hw, xv[i]);
  auto xn = x.node_ptr();
  return make_result<T>({n, c, h, w}, std::move(out), {&x}, "repeat_spatial", [xn, n, c, hw](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::int64_t i = 0; i < n * c; ++i) {
      T acc = 0;
      for (std::int64_t k = 0; k < hw; ++k) acc += self.grad[i * hw + k];
      g[i] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// op(a) * op(b) for 2-D tensors.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  FTGAN_EXPECTS(a.rank() == 2 && b.rank() == 2, "matmul expects 2-D operands");
  const std::int64_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::int64_t k = trans_a ? a.dim(0) : a.dim(1);
  const std::int64_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::int64_t n = trans_b ? b.dim(0) : b.dim(1);
  FTGAN_EXPECTS(k == kb, "matmul: inner dimensions differ, ", to_string(a.shape()), " x ", to_string(b.shape()));
  std::vector<T> out(static_cast<std::size_t>(m * n));
  detail::gemm(trans_a, trans_b, m, n, k, a.values().data(), b.values().data(), out.data(), false);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>({m, n}, std::move(out), {&a, &b}, "matmul",
                        [an, bn, trans_a, trans_b, m, n, k](Node<T>& self) {
                          const T* g = self.grad.data();
                          if (an->requires_grad) {
                            // dA = G op(B)^T, stored in A's own layout.
                            T* ga = an->ensure_grad().data();
                            if (!trans_a)
                              detail::gemm(false, !trans_b, m, k, n, g, bn->value.data(), ga, true);
                            else
                              detail::gemm(trans_b, true, k, m, n, bn->value.data(), g, ga, true);
                          }
                          if (bn->requires_grad) {
                            T* gb = bn->ensure_grad().data();
                            if (!trans_b)
                              detail::gemm(!trans_a, false, k, n, m, an->value.data(), g, gb, true);
                            else
                              detail::gemm(true, trans_a, n, k, m, g, an->value.data(), gb, true);
                          }
                        });
}

/// Batched op(a) * op(b) for 3-D tensors sharing the leading batch axis.
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  FTGAN_EXPECTS(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0), "bmm: incompatible shapes ",
                to_string(a.shape()), " and ", to_string(b.shape()));
  const std::int64_t batch = a.dim(0);
  const std::int64_t m = trans_a ? a.dim(2) : a.dim(1);
  const std::int64_t k = trans_a ? a.dim(1) : a.dim(2);
  const std::int64_t kb = trans_b ? b.dim(2) : b.dim(1);
  const std::int64_t n = trans_b ? b.dim(1) : b.dim(2);
  FTGAN_EXPECTS(k == kb, "bmm: inner dimensions differ, ", to_string(a.shape()), " x ", to_string(b.shape()));
  std::vector<T> out(static_cast<std::size_t>(batch * m * n));
  for (std::int64_t i = 0; i < batch; ++i)
    detail::gemm(trans_a, trans_b, m, n, k, a.values().data() + i * m * k, b.values().data() + i * k * n,
                 out.data() + i * m * n, false);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>({batch, m, n}, std::move(out), {&a, &b}, "bmm",
                        [an, bn, trans_a, trans_b, batch, m, n, k](Node<T>& self) {
                          for (std::int64_t i = 0; i < batch; ++i) {
                            const T* g = self.grad.data() + i * m * n;
                            const T* av = an->value.data() + i * m * k;
                            const T* bv = bn->value.data() + i * k * n;
                            if (an->requires_grad) {
                              T* ga = an->ensure_grad().data() + i * m * k;
                              if (!trans_a)
                                detail::gemm(false, !trans_b, m, k, n, g, bv, ga, true);
                              else
                                detail::gemm(trans_b, true, k, m, n, bv, g, ga, true);
                            }
                            if (bn->requires_grad) {
                              T* gb = bn->ensure_grad().data() + i * k * n;
                              if (!trans_b)
                                detail::gemm(!trans_a, false, k, n, m, av, g, gb, true);
                              else
                                detail::gemm(true, trans_a, n, k, m, g, av, gb, true);
                            }
                          }
                        });
}

/// x[N, in] * W[out, in]^T + b[out]; `b` may be undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  FTGAN_EXPECTS(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1), "linear: input ", to_string(x.shape()),
                " does not match weight ", to_string(w.shape()));
  auto y = matmul(x, w, false, true);
  if (b.defined()) y = add_channels(y, b);
  return y;
}

// ---------------------------------------------------------------------------
// Softmax, embedding, masking

/// Softmax over the last axis. With `lengths`, entry `lengths[b]` gives
/// the number of valid leading positions for every row belonging to
/// batch item b (axis 0); the rest get exactly zero weight. Rows with no
/// valid position are all zero.
template <class T>
Tensor<T> softmax_last(const Tensor<T>& x, const std::vector<std::int64_t>* lengths = nullptr) {
  FTGAN_EXPECTS(x.rank() >= 1, "softmax of a scalar");
  const std::int64_t l = x.dim(-1);
  const std::int64_t rows = l == 0 ? 0 : x.numel() / l;
  const std::int64_t batch = x.rank() >= 2 ? x.dim(0) : 1;
  const std::int64_t rows_per_item = batch == 0 ? 0 : rows / batch;
  if (lengths) FTGAN_EXPECTS(static_cast<std::int64_t>(lengths->size()) == batch, "softmax_last: lengths size");
  std::vector<std::int64_t> valid(static_cast<std::size_t>(rows), l);
  if (lengths) {
    for (std::int64_t r = 0; r < rows; ++r) valid[r] = std::clamp<std::int64_t>((*lengths)[r / rows_per_item], 0, l);
  }
  std::vector<T> out(x.values().size(), T(0));
  const auto& xv = x.values();
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t v = valid[r];
    if (v == 0) continue;
    const T* in = xv.data() + r * l;
    T* o = out.data() + r * l;
    T mx = *std::max_element(in, in + v);
    T s = 0;
    for (std::int64_t j = 0; j < v; ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    for (std::int64_t j = 0; j < v; ++j) o[j] /= s;
  }
  auto xn = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {&x}, "softmax", [xn, valid, rows, l](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * l;
      const T* gy = self.grad.data() + r * l;
      T dot = 0;
      for (std::int64_t j = 0; j < valid[r]; ++j) dot += y[j] * gy[j];
      for (std::int64_t j = 0; j < valid[r]; ++j) g[r * l + j] += y[j] * (gy[j] - dot);
    }
  });
}

/// Rows of `table` [V, E] selected by `ids`; result [ids.size(), E].
template <class T>
Tensor<T> embedding(const std::vector<std::int64_t>& ids, const Tensor<T>& table) {
  FTGAN_EXPECTS(table.rank() == 2, "embedding table must be 2-D");
  const std::int64_t v = table.dim(0), e = table.dim(1);
  const auto n = static_cast<std::int64_t>(ids.size());
  std::vector<T> out(static_cast<std::size_t>(n * e));
  for (std::int64_t i = 0; i < n; ++i) {
    FTGAN_EXPECTS(ids[i] >= 0 && ids[i] < v, "token id ", ids[i], " outside vocabulary of size ", v);
    std::copy_n(table.values().begin() + ids[i] * e, e, out.begin() + i * e);
  }
  auto tn = table.node_ptr();
  return make_result<T>({n, e}, std::move(out), {&table}, "embedding", [tn, ids, e](Node<T>& self) {
    auto& g = tn->ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::int64_t j = 0; j < e; ++j) g[ids[i] * e + j] += self.grad[i * e + j];
  });
}

/// Inverted dropout; identity when rate is 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  FTGAN_EXPECTS(rate < 1.0, "dropout rate must be < 1");
  const T keep_scale = T(1) / static_cast<T>(1.0 - rate);
  std::vector<T> mask(x.values().size());
  for (auto& m : mask) m = rng.uniform() < rate ? T(0) : keep_scale;
  std::vector<T> out(x.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  auto xn = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {&x}, "dropout", [xn, mask](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

/// Row-wise select: row r comes from `a` where keep[r] is set, else from
/// `b`. Rows are slices along axis 0. The chosen row is copied exactly.
template <class T>
Tensor<T> select_rows(const std::vector<std::uint8_t>& keep, const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect_same_shape(a, b, "select_rows");
  const std::int64_t rows = a.dim(0), width = a.numel() / std::max<std::int64_t>(rows, 1);
  FTGAN_EXPECTS(static_cast<std::int64_t>(keep.size()) == rows, "select_rows: mask size ", keep.size(),
                " vs rows ", rows);
  std::vector<T> out(a.values().size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto& src = keep[r] ? a.values() : b.values();
    std::copy_n(src.begin() + r * width, width, out.begin() + r * width);
  }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, "select_rows", [an, bn, keep, width](Node<T>& self) {
    for (std::size_t r = 0; r < keep.size(); ++r) {
      auto& n = keep[r] ? an : bn;
      if (!n->requires_grad) continue;
      auto& g = n->ensure_grad();
      for (std::int64_t j = 0; j < width; ++j) g[r * width + j] += self.grad[r * width + j];
    }
  });
}

}  // namespace ftgan::ag
