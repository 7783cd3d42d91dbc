#pragma once

// Fused ops for cosine similarities, log-sum-exp pooling and
// cross-entropy, each with a hand-written backward pass.

#include <algorithm>
#include <cmath>
#include <vector>

#include "ftgan/autograd/ops.hpp"

namespace ftgan::ag {

/// Cosine similarity between matching columns: a, b [B, D, L] -> [B, L].
/// The denominator is max(|a| |b|, eps).
template <class T>
Tensor<T> cosine_columns(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8)) {
  detail::expect_same_shape(a, b, "cosine_columns");
  FTGAN_EXPECTS(a.rank() == 3, "cosine_columns expects [B, D, L]");
  const std::int64_t bs = a.dim(0), d = a.dim(1), l = a.dim(2);
  std::vector<T> out(static_cast<std::size_t>(bs * l)), na(out.size()), nb(out.size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::int64_t i = 0; i < bs; ++i)
    for (std::int64_t j = 0; j < l; ++j) {
      T dot = 0, sa = 0, sb = 0;
      for (std::int64_t k = 0; k < d; ++k) {
        const T x = av[(i * d + k) * l + j], y = bv[(i * d + k) * l + j];
        dot += x * y;
        sa += x * x;
        sb += y * y;
      }
      const auto o = i * l + j;
      na[o] = std::sqrt(sa);
      nb[o] = std::sqrt(sb);
      out[o] = dot / std::max(na[o] * nb[o], eps);
    }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>({bs, l}, std::move(out), {&a, &b}, "cosine_columns",
                        [an, bn, na, nb, bs, d, l, eps](Node<T>& self) {
                          for (std::int64_t i = 0; i < bs; ++i)
                            for (std::int64_t j = 0; j < l; ++j) {
                              const auto o = i * l + j;
                              const T g = self.grad[o], cos = self.value[o];
                              const T denom = na[o] * nb[o];
                              const bool clamped = denom <= eps;
                              const T inv = T(1) / std::max(denom, eps);
                              for (std::int64_t k = 0; k < d; ++k) {
                                const auto idx = (i * d + k) * l + j;
                                const T x = an->value[idx], y = bn->value[idx];
                                if (an->requires_grad) {
                                  T dx = y * inv;
                                  if (!clamped) dx -= cos * x / (na[o] * na[o]);
                                  an->ensure_grad()[idx] += g * dx;
                                }
                                if (bn->requires_grad) {
                                  T dy = x * inv;
                                  if (!clamped) dy -= cos * y / (nb[o] * nb[o]);
                                  bn->ensure_grad()[idx] += g * dy;
                                }
                              }
                            }
                        });
}

/// All-pairs cosine similarity between rows: a [N, D], b [M, D] -> [N, M].
template <class T>
Tensor<T> cosine_matrix(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8)) {
  FTGAN_EXPECTS(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), "cosine_matrix: ", to_string(a.shape()),
                " vs ", to_string(b.shape()));
  const std::int64_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  auto row_norms = [d](const std::vector<T>& v, std::int64_t rows) {
    std::vector<T> out(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
      T s = 0;
      for (std::int64_t k = 0; k < d; ++k) s += v[r * d + k] * v[r * d + k];
      out[r] = std::sqrt(s);
    }
    return out;
  };
  const auto na = row_norms(a.values(), n), nb = row_norms(b.values(), m);
  std::vector<T> out(static_cast<std::size_t>(n * m));
  detail::gemm(false, true, n, m, d, a.values().data(), b.values().data(), out.data(), false);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < m; ++j) out[i * m + j] /= std::max(na[i] * nb[j], eps);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>({n, m}, std::move(out), {&a, &b}, "cosine_matrix",
                        [an, bn, na, nb, n, m, d, eps](Node<T>& self) {
                          for (std::int64_t i = 0; i < n; ++i)
                            for (std::int64_t j = 0; j < m; ++j) {
                              const T g = self.grad[i * m + j], cos = self.value[i * m + j];
                              const T denom = na[i] * nb[j];
                              const bool clamped = denom <= eps;
                              const T inv = T(1) / std::max(denom, eps);
                              for (std::int64_t k = 0; k < d; ++k) {
                                const T x = an->value[i * d + k], y = bn->value[j * d + k];
                                if (an->requires_grad) {
                                  T dx = y * inv;
                                  if (!clamped) dx -= cos * x / (na[i] * na[i]);
                                  an->ensure_grad()[i * d + k] += g * dx;
                                }
                                if (bn->requires_grad) {
                                  T dy = x * inv;
                                  if (!clamped) dy -= cos * y / (nb[j] * nb[j]);
                                  bn->ensure_grad()[j * d + k] += g * dy;
                                }
                              }
                            }
                        });
}

/// log(sum(exp(x))) over the last axis: [..., L] -> [...] (rank >= 2) or [1].
template <class T>
Tensor<T> logsumexp_last(const Tensor<T>& x) {
  const std::int64_t l = x.dim(-1);
  FTGAN_EXPECTS(l > 0, "logsumexp over an empty axis");
  const std::int64_t rows = x.numel() / l;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<T> out(static_cast<std::size_t>(rows));
  const auto& xv = x.values();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * l;
    const T mx = *std::max_element(in, in + l);
    T s = 0;
    for (std::int64_t j = 0; j < l; ++j) s += std::exp(in[j] - mx);
    out[r] = mx + std::log(s);
  }
  auto xn = x.node_ptr();
  return make_result<T>(out_shape, std::move(out), {&x}, "logsumexp", [xn, rows, l](Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < l; ++j)
        g[r * l + j] += self.grad[r] * std::exp(xn->value[r * l + j] - self.value[r]);
  });
}

/// Mean cross-entropy of logits [N, C] against integer labels.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::int64_t>& labels) {
  FTGAN_EXPECTS(logits.rank() == 2, "cross_entropy expects [N, C] logits");
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  FTGAN_EXPECTS(static_cast<std::int64_t>(labels.size()) == n && n > 0, "cross_entropy: ", labels.size(),
                " labels for ", n, " rows");
  std::vector<T> prob(logits.values().size());
  T loss = 0;
  const auto& xv = logits.values();
  for (std::int64_t i = 0; i < n; ++i) {
    FTGAN_EXPECTS(labels[i] >= 0 && labels[i] < c, "cross_entropy: label out of range");
    const T* row = xv.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T s = 0;
    for (std::int64_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    for (std::int64_t j = 0; j < c; ++j) prob[i * c + j] = std::exp(row[j] - lse);
    loss += lse - row[labels[i]];
  }
  loss /= static_cast<T>(n);
  auto xn = logits.node_ptr();
  return make_result<T>({1}, {loss}, {&logits}, "cross_entropy", [xn, prob, labels, n, c](Node<T>& self) {
    auto& g = xn->ensure_grad();
    const T scale = self.grad[0] / static_cast<T>(n);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < c; ++j)
        g[i * c + j] += scale * (prob[i * c + j] - (j == labels[i] ? T(1) : T(0)));
  });
}

}  // namespace ftgan::ag
