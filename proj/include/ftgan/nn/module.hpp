#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ftgan/autograd/tensor.hpp"

namespace ftgan::nn {

using ag::Shape;
using ag::Tensor;

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
using TensorList = std::vector<NamedTensor<T>>;

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

/// Base for every network piece. Parameters and buffers are enumerated in
/// a fixed order so that checkpoints and optimizer state line up by name.
///
/// Modules hold tensor handles; copying one would alias its parameters,
/// so modules are move-only.
template <class T>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  Module(Module&&) noexcept = default;
  Module& operator=(Module&&) noexcept = default;
  virtual ~Module() = default;

  virtual void collect_parameters(TensorList<T>& out, const std::string& prefix) const = 0;
  virtual void collect_buffers(TensorList<T>& /*out*/, const std::string& /*prefix*/) const {}
  virtual void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  TensorList<T> parameters(const std::string& prefix = "") const {
    TensorList<T> out;
    collect_parameters(out, prefix);
    return out;
  }

  TensorList<T> buffers(const std::string& prefix = "") const {
    TensorList<T> out;
    collect_buffers(out, prefix);
    return out;
  }

  /// Parameters followed by buffers: everything a checkpoint must hold.
  TensorList<T> state(const std::string& prefix = "") const {
    auto out = parameters(prefix);
    collect_buffers(out, prefix);
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& p : parameters()) p.tensor.set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

 protected:
  bool training_ = true;
};

template <class T>
double squared_grad_norm(const TensorList<T>& params) {
  double acc = 0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
  }
  return acc;
}

template <class T>
double grad_norm(const TensorList<T>& params) {
  return std::sqrt(squared_grad_norm(params));
}

/// Deep copy of the values, for before/after comparisons.
template <class T>
std::vector<std::vector<T>> snapshot(const TensorList<T>& params) {
  std::vector<std::vector<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor.values());
  return out;
}

/// Euclidean norm of the change since `before` was taken.
template <class T>
double delta_norm(const TensorList<T>& params, const std::vector<std::vector<T>>& before) {
  double acc = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto now = params[i].tensor.data();
    for (std::size_t j = 0; j < now.size(); ++j) {
      const double d = static_cast<double>(now[j]) - static_cast<double>(before[i][j]);
      acc += d * d;
    }
  }
  return std::sqrt(acc);
}

}  // namespace ftgan::nn
