#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ftgan/autograd/ops.hpp"

namespace ftgan::ag {

namespace detail {

struct ConvGeometry {
  std::int64_t channels, height, width, kernel, stride, pad, out_h, out_w;
  std::int64_t col_rows() const { return channels * kernel * kernel; }
  std::int64_t col_cols() const { return out_h * out_w; }
};

/// Unfold one image [C, H, W] into columns [C*k*k, out_h*out_w].
template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::int64_t cols = g.col_cols();
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t ky = 0; ky < g.kernel; ++ky)
      for (std::int64_t kx = 0; kx < g.kernel; ++kx) {
        T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill_n(dst, g.out_w, T(0));
            continue;
          }
          const T* src = img + (c * g.height + iy) * g.width;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : T(0);
          }
        }
      }
}

/// Adjoint of im2col: scatter-add columns back into an image.
template <class T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
  const std::int64_t cols = g.col_cols();
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t ky = 0; ky < g.kernel; ++ky)
      for (std::int64_t kx = 0; kx < g.kernel; ++kx) {
        const T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          T* dst = img + (c * g.height + iy) * g.width;
          const T* src = row + oy * g.out_w;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution. x [N, Ci, H, W], w [Co, Ci, k, k], optional bias [Co].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::int64_t stride, std::int64_t pad) {
  FTGAN_EXPECTS(x.rank() == 4 && w.rank() == 4, "conv2d expects 4-D input and weight");
  FTGAN_EXPECTS(x.dim(1) == w.dim(1), "conv2d: input has ", x.dim(1), " channels, weight expects ", w.dim(1));
  FTGAN_EXPECTS(w.dim(2) == w.dim(3), "conv2d: square kernels only");
  const std::int64_t n = x.dim(0), co = w.dim(0), k = w.dim(2);
  detail::ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), k, stride, pad, 0, 0};
  g.out_h = (g.height + 2 * pad - k) / stride + 1;
  g.out_w = (g.width + 2 * pad - k) / stride + 1;
  FTGAN_EXPECTS(g.out_h > 0 && g.out_w > 0, "conv2d: empty output for input ", to_string(x.shape()));
  const std::int64_t in_sz = g.channels * g.height * g.width, out_sz = co * g.col_cols();
  std::vector<T> out(static_cast<std::size_t>(n * out_sz));
  std::vector<T> col(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
  for (std::int64_t i = 0; i < n; ++i) {
    detail::im2col(x.values().data() + i * in_sz, g, col.data());
    detail::gemm(false, false, co, g.col_cols(), g.col_rows(), w.values().data(), col.data(),
                 out.data() + i * out_sz, false);
  }
  auto xn = x.node_ptr(), wn = w.node_ptr();
  auto y = make_result<T>({n, co, g.out_h, g.out_w}, std::move(out), {&x, &w}, "conv2d",
                          [xn, wn, g, n, co, in_sz, out_sz](Node<T>& self) {
                            std::vector<T> col(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
                            for (std::int64_t i = 0; i < n; ++i) {
                              const T* gy = self.grad.data() + i * out_sz;
                              if (wn->requires_grad) {
                                detail::im2col(xn->value.data() + i * in_sz, g, col.data());
                                detail::gemm(false, true, co, g.col_rows(), g.col_cols(), gy, col.data(),
                                             wn->ensure_grad().data(), true);
                              }
                              if (xn->requires_grad) {
                                detail::gemm(true, false, g.col_rows(), g.col_cols(), co, wn->value.data(), gy,
                                             col.data(), false);
                                detail::col2im(col.data(), g, xn->ensure_grad().data() + i * in_sz);
                              }
                            }
                          });
  if (b.defined()) y = add_channels(y, b);
  return y;
}

/// Transposed convolution. x [N, Ci, H, W], w [Ci, Co, k, k]. Output size
/// (H - 1) * stride - 2 * pad + k.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::int64_t stride,
                           std::int64_t pad) {
  FTGAN_EXPECTS(x.rank() == 4 && w.rank() == 4, "conv_transpose2d expects 4-D input and weight");
  FTGAN_EXPECTS(x.dim(1) == w.dim(0), "conv_transpose2d: input has ", x.dim(1), " channels, weight expects ",
                w.dim(0));
  const std::int64_t n = x.dim(0), ci = x.dim(1), co = w.dim(1), k = w.dim(2);
  const std::int64_t h = x.dim(2), wd = x.dim(3);
  // Geometry of the equivalent forward convolution on the output.
  detail::ConvGeometry g{co, (h - 1) * stride - 2 * pad + k, (wd - 1) * stride - 2 * pad + k, k, stride, pad, h, wd};
  FTGAN_EXPECTS(g.height > 0 && g.width > 0, "conv_transpose2d: empty output");
  const std::int64_t in_sz = ci * h * wd, out_sz = co * g.height * g.width;
  std::vector<T> out(static_cast<std::size_t>(n * out_sz), T(0));
  std::vector<T> col(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
  for (std::int64_t i = 0; i < n; ++i) {
    detail::gemm(true, false, g.col_rows(), g.col_cols(), ci, w.values().data(), x.values().data() + i * in_sz,
                 col.data(), false);
    detail::col2im(col.data(), g, out.data() + i * out_sz);
  }
  auto xn = x.node_ptr(), wn = w.node_ptr();
  auto y = make_result<T>({n, co, g.height, g.width}, std::move(out), {&x, &w}, "conv_transpose2d",
                          [xn, wn, g, n, ci, in_sz, out_sz](Node<T>& self) {
                            std::vector<T> col(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
                            for (std::int64_t i = 0; i < n; ++i) {
                              detail::im2col(self.grad.data() + i * out_sz, g, col.data());
                              if (xn->requires_grad)
                                detail::gemm(false, false, ci, g.col_cols(), g.col_rows(), wn->value.data(),
                                             col.data(), xn->ensure_grad().data() + i * in_sz, true);
                              if (wn->requires_grad)
                                detail::gemm(false, true, ci, g.col_rows(), g.col_cols(),
                                             xn->value.data() + i * in_sz, col.data(), wn->ensure_grad().data(),
                                             true);
                            }
                          });
  if (b.defined()) y = add_channels(y, b);
  return y;
}

/// Nearest-neighbour 2x upsampling of [N, C, H, W].
template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  FTGAN_EXPECTS(x.rank() == 4, "upsample expects [N, C, H, W]");
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(planes * 4 * h * w));
  const auto& xv = x.values();
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t y = 0; y < 2 * h; ++y)
      for (std::int64_t xx = 0; xx < 2 * w; ++xx)
        out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
  auto xn = x.node_ptr();
  return make_result<T>({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {&x}, "upsample",
                        [xn, planes, h, w](Node<T>& self) {
                          auto& g = xn->ensure_grad();
                          for (std::int64_t p = 0; p < planes; ++p)
                            for (std::int64_t y = 0; y < 2 * h; ++y)
                              for (std::int64_t xx = 0; xx < 2 * w; ++xx)
                                g[(p * h + y / 2) * w + xx / 2] += self.grad[(p * 2 * h + y) * 2 * w + xx];
                        });
}

/// Adaptive average pooling to [N, C, out_h, out_w]; bin i covers
/// [floor(i*H/out), ceil((i+1)*H/out)).
template <class T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  FTGAN_EXPECTS(x.rank() == 4 && out_h > 0 && out_w > 0, "adaptive_avg_pool2d: bad arguments");
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  auto lo = [](std::int64_t i, std::int64_t in, std::int64_t out) { return (i * in) / out; };
  auto hi = [](std::int64_t i, std::int64_t in, std::int64_t out) { return ((i + 1) * in + out - 1) / out; };
  std::vector<T> out(static_cast<std::size_t>(planes * out_h * out_w));
  const auto& xv = x.values();
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t oy = 0; oy < out_h; ++oy)
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const auto y0 = lo(oy, h, out_h), y1 = hi(oy, h, out_h), x0 = lo(ox, w, out_w), x1 = hi(ox, w, out_w);
        T acc = 0;
        for (auto y = y0; y < y1; ++y)
          for (auto xx = x0; xx < x1; ++xx) acc += xv[(p * h + y) * w + xx];
        out[(p * out_h + oy) * out_w + ox] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
      }
  auto xn = x.node_ptr();
  return make_result<T>({x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {&x}, "adaptive_avg_pool2d",
                        [xn, planes, h, w, out_h, out_w, lo, hi](Node<T>& self) {
                          auto& g = xn->ensure_grad();
                          for (std::int64_t p = 0; p < planes; ++p)
                            for (std::int64_t oy = 0; oy < out_h; ++oy)
                              for (std::int64_t ox = 0; ox < out_w; ++ox) {
                                const auto y0 = lo(oy, h, out_h), y1 = hi(oy, h, out_h);
                                const auto x0 = lo(ox, w, out_w), x1 = hi(ox, w, out_w);
                                const T share = self.grad[(p * out_h + oy) * out_w + ox] /
                                                static_cast<T>((y1 - y0) * (x1 - x0));
                                for (auto y = y0; y < y1; ++y)
                                  for (auto xx = x0; xx < x1; ++xx) g[(p * h + y) * w + xx] += share;
                              }
                        });
}

/// Mean over the spatial axes: [N, C, H, W] -> [N, C].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  return reshape(adaptive_avg_pool2d(x, 1, 1), {x.dim(0), x.dim(1)});
}

/// Batch normalization over (N, H, W) per channel. In training mode the
/// batch statistics are used and the running buffers updated in place
/// (unbiased variance, PyTorch convention); otherwise the running
/// statistics are used.
template <class T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  FTGAN_EXPECTS(x.rank() == 4 || x.rank() == 2, "batch_norm expects [N, C, H, W] or [N, C]");
  const std::int64_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
  FTGAN_EXPECTS(gamma.numel() == c && beta.numel() == c, "batch_norm: parameter size mismatch");
  const std::int64_t m = n * inner;
  const auto& xv = x.values();
  std::vector<T> mu(c), invstd(c);
  if (training) {
    FTGAN_EXPECTS(m > 1, "batch_norm in training mode needs more than one value per channel");
    for (std::int64_t j = 0; j < c; ++j) {
      T s = 0;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t k = 0; k < inner; ++k) s += xv[(i * c + j) * inner + k];
      const T mean = s / static_cast<T>(m);
      T v = 0;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t k = 0; k < inner; ++k) {
          const T d = xv[(i * c + j) * inner + k] - mean;
          v += d * d;
        }
      const T var = v / static_cast<T>(m);
      mu[j] = mean;
      invstd[j] = T(1) / std::sqrt(var + eps);
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      rm[j] = (T(1) - momentum) * rm[j] + momentum * mean;
      rv[j] = (T(1) - momentum) * rv[j] + momentum * v / static_cast<T>(m - 1);
    }
  } else {
    for (std::int64_t j = 0; j < c; ++j) {
      mu[j] = running_mean[j];
      invstd[j] = T(1) / std::sqrt(running_var[j] + eps);
    }
  }
  std::vector<T> xhat(xv.size()), out(xv.size());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      for (std::int64_t k = 0; k < inner; ++k) {
        const auto idx = (i * c + j) * inner + k;
        xhat[idx] = (xv[idx] - mu[j]) * invstd[j];
        out[idx] = xhat[idx] * gamma[j] + beta[j];
      }
  auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {&x, &gamma, &beta}, "batch_norm",
                        [xn, gn, bn, xhat = std::move(xhat), invstd, n, c, inner, m, training](Node<T>& self) {
                          const auto& gy = self.grad;
                          for (std::int64_t j = 0; j < c; ++j) {
                            T sum_g = 0, sum_gx = 0;
                            for (std::int64_t i = 0; i < n; ++i)
                              for (std::int64_t k = 0; k < inner; ++k) {
                                const auto idx = (i * c + j) * inner + k;
                                sum_g += gy[idx];
                                sum_gx += gy[idx] * xhat[idx];
                              }
                            if (gn->requires_grad) gn->ensure_grad()[j] += sum_gx;
                            if (bn->requires_grad) bn->ensure_grad()[j] += sum_g;
                            if (!xn->requires_grad) continue;
                            auto& gx = xn->ensure_grad();
                            const T gam = gn->value[j];
                            const T inv_m = T(1) / static_cast<T>(m);
                            for (std::int64_t i = 0; i < n; ++i)
                              for (std::int64_t k = 0; k < inner; ++k) {
                                const auto idx = (i * c + j) * inner + k;
                                if (training)
                                  gx[idx] += gam * invstd[j] * inv_m *
                                             (static_cast<T>(m) * gy[idx] - sum_g - xhat[idx] * sum_gx);
                                else
                                  gx[idx] += gam * invstd[j] * gy[idx];
                              }
                          }
                        });
}

}  // namespace ftgan::ag
