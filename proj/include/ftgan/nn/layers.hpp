#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ftgan/autograd/conv.hpp"
#include "ftgan/autograd/ops.hpp"
#include "ftgan/core/random.hpp"
#include "ftgan/nn/module.hpp"

namespace ftgan::nn {

/// Weight initialisation. std > 0 draws N(0, std); otherwise
/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
Tensor<T> init_weight(Shape shape, std::int64_t fan_in, double std, Rng& rng) {
  std::vector<T> v(static_cast<std::size_t>(ag::numel(shape)));
  if (std > 0) {
    for (auto& x : v) x = static_cast<T>(rng.normal() * std);
  } else {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  }
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <class T>
class Linear : public Module<T> {
 public:
  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, bool bias, Rng& rng, double std = 0)
      : weight_(init_weight<T>({out, in}, in, std, rng)) {
    if (bias) bias_ = Tensor<T>::zeros({out}, true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return ag::linear(x, weight_, bias_); }

  void collect_parameters(TensorList<T>& out, const std::string& prefix) const override {
    out.push_back({join_name(prefix, "weight"), weight_});
    if (bias_.defined()) out.push_back({join_name(prefix, "bias"), bias_});
  }

  std::int64_t in_features() const { return weight_.dim(1); }
  std::int64_t out_features() const { return weight_.dim(0); }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
};

/// Conv layer with optional spectral normalisation (one power iteration
/// per training forward; sigma is differentiated through).
template <class T>
class Conv2d : public Module<T> {
 public:
  Conv2d() = default;
  Conv2d(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride, std::int64_t pad, bool bias,
         Rng& rng, double std = 0, bool spectral_norm = false)
      : weight_(init_weight<T>({out, in, kernel, kernel}, in * kernel * kernel, std, rng)),
        stride_(stride),
        pad_(pad) {
    if (bias) bias_ = Tensor<T>::zeros({out}, true);
    if (spectral_norm) {
      const std::int64_t cols = in * kernel * kernel;
      std::vector<T> u(static_cast<std::size_t>(out)), v(static_cast<std::size_t>(cols));
      for (auto& x : u) x = static_cast<T>(rng.normal());
      for (auto& x : v) x = static_cast<T>(rng.normal());
      normalize(u);
      normalize(v);
      sn_u_ = Tensor<T>({out}, std::move(u));
      sn_v_ = Tensor<T>({cols}, std::move(v));
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const { return ag::conv2d(x, effective_weight(), bias_, stride_, pad_); }

  void collect_parameters(TensorList<T>& out, const std::string& prefix) const override {
    out.push_back({join_name(prefix, "weight"), weight_});
    if (bias_.defined()) out.push_back({join_name(prefix, "bias"), bias_});
  }

  void collect_buffers(TensorList<T>& out, const std::string& prefix) const override {
    if (sn_u_.defined()) {
      out.push_back({join_name(prefix, "sn_u"), sn_u_});
      out.push_back({join_name(prefix, "sn_v"), sn_v_});
    }
  }

  bool spectral_norm() const { return sn_u_.defined(); }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  static void normalize(std::vector<T>& v) {
    T s = 0;
    for (T x : v) s += x * x;
    s = std::sqrt(s) + T(1e-12);
    for (T& x : v) x /= s;
  }

  Tensor<T> effective_weight() const {
    if (!sn_u_.defined()) return weight_;
    const std::int64_t rows = weight_.dim(0), cols = weight_.numel() / rows;
    if (this->training()) {
      // Power iteration on the buffers (outside the graph).
      auto w = weight_.data();
      auto u = const_cast<Tensor<T>&>(sn_u_).mutable_data();
      auto v = const_cast<Tensor<T>&>(sn_v_).mutable_data();
      std::vector<T> nv(static_cast<std::size_t>(cols), T(0)), nu(static_cast<std::size_t>(rows), T(0));
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < cols; ++c) nv[c] += w[r * cols + c] * u[r];
      normalize(nv);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < cols; ++c) nu[r] += w[r * cols + c] * nv[c];
      normalize(nu);
      std::copy(nu.begin(), nu.end(), u.begin());
      std::copy(nv.begin(), nv.end(), v.begin());
    }
    auto wmat = ag::reshape(weight_, {rows, cols});
    auto u = ag::reshape(sn_u_, {rows, 1});
    auto v = ag::reshape(sn_v_, {cols, 1});
    auto sigma = ag::reshape(ag::matmul(u, ag::matmul(wmat, v), true, false), {1});
    return ag::mul_scalar(weight_, ag::reciprocal(sigma));
  }

  Tensor<T> weight_;
  Tensor<T> bias_;
  Tensor<T> sn_u_;
  Tensor<T> sn_v_;
  std::int64_t stride_ = 1;
  std::int64_t pad_ = 0;
};

template <class T>
class ConvTranspose2d : public Module<T> {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride, std::int64_t pad,
                  bool bias, Rng& rng, double std = 0)
      : weight_(init_weight<T>({in, out, kernel, kernel}, in * kernel * kernel, std, rng)), stride_(stride), pad_(pad) {
    if (bias) bias_ = Tensor<T>::zeros({out}, true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return ag::conv_transpose2d(x, weight_, bias_, stride_, pad_); }

  void collect_parameters(TensorList<T>& out, const std::string& prefix) const override {
    out.push_back({join_name(prefix, "weight"), weight_});
    if (bias_.defined()) out.push_back({join_name(prefix, "bias"), bias_});
  }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
  std::int64_t stride_ = 2;
  std::int64_t pad_ = 1;
};

template <class T>
class BatchNorm2d : public Module<T> {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::int64_t channels, Rng& rng, double gamma_std = 0)
      : gamma_(Tensor<T>::full({channels}, T(1), true)),
        beta_(Tensor<T>::zeros({channels}, true)),
        running_mean_(Tensor<T>::zeros({channels})),
        running_var_(Tensor<T>::full({channels}, T(1))) {
    if (gamma_std > 0)
      for (auto& g : gamma_.mutable_data()) g = static_cast<T>(1.0 + rng.normal() * gamma_std);
  }

  Tensor<T> forward(const Tensor<T>& x) {
    return ag::batch_norm2d(x, gamma_, beta_, running_mean_, running_var_, this->training());
  }

  void collect_parameters(TensorList<T>& out, const std::string& prefix) const override {
    out.push_back({join_name(prefix, "gamma"), gamma_});
    out.push_back({join_name(prefix, "beta"), beta_});
  }

  void collect_buffers(TensorList<T>& out, const std::string& prefix) const override {
    out.push_back({join_name(prefix, "running_mean"), running_mean_});
    out.push_back({join_name(prefix, "running_var"), running_var_});
  }

 private:
  Tensor<T> gamma_;
  Tensor<T> beta_;
  Tensor<T> running_mean_;
  Tensor<T> running_var_;
};

template <class T>
class Embedding : public Module<T> {
 public:
  Embedding() = default;
  Embedding(std::int64_t vocab, std::int64_t dim, Rng& rng) {
    std::vector<T> v(static_cast<std::size_t>(vocab * dim));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-0.1, 0.1));
    table_ = Tensor<T>({vocab, dim}, std::move(v), true);
  }

  Tensor<T> forward(const std::vector<std::int64_t>& ids) const { return ag::embedding(ids, table_); }

  void collect_parameters(TensorList<T>& out, const std::string& prefix) const override {
    out.push_back({join_name(prefix, "weight"), table_});
  }

  std::int64_t vocab_size() const { return table_.dim(0); }
  Tensor<T>& table() { return table_; }

 private:
  Tensor<T> table_;
};

}  // namespace ftgan::nn
