#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ftgan/nn/module.hpp"

namespace ftgan::nn {

struct AdamOptions {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive moment estimation over named parameter groups. Parameters
/// without a gradient are skipped for that step.
template <class T>
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  void add_group(const TensorList<T>& params, double lr) {
    groups_.push_back({lr, {}});
    for (const auto& p : params) {
      groups_.back().slots.push_back(
          {p, std::vector<T>(static_cast<std::size_t>(p.tensor.numel()), T(0)),
           std::vector<T>(static_cast<std::size_t>(p.tensor.numel()), T(0)), 0});
    }
  }

  void step() {
    for (auto& g : groups_) {
      for (auto& s : g.slots) {
        if (!s.param.tensor.has_grad()) continue;
        ++s.steps;
        const auto grad = s.param.tensor.grad();
        auto w = s.param.tensor.mutable_data();
        const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(s.steps));
        const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(s.steps));
        const T b1 = static_cast<T>(options_.beta1), b2 = static_cast<T>(options_.beta2);
        const T step_size = static_cast<T>(g.lr / bc1);
        const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
        const T eps = static_cast<T>(options_.eps);
        for (std::size_t i = 0; i < grad.size(); ++i) {
          s.m[i] = b1 * s.m[i] + (T(1) - b1) * grad[i];
          s.v[i] = b2 * s.v[i] + (T(1) - b2) * grad[i] * grad[i];
          w[i] -= step_size * s.m[i] / (std::sqrt(s.v[i]) * inv_sqrt_bc2 + eps);
        }
      }
    }
  }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& s : g.slots) s.param.tensor.zero_grad();
  }

  /// Moment buffers and step counters as named tensors for checkpointing.
  TensorList<T> state_tensors() const {
    TensorList<T> out;
    for (const auto& g : groups_)
      for (const auto& s : g.slots) {
        const auto n = static_cast<std::int64_t>(s.m.size());
        out.push_back({s.param.name + "#m", Tensor<T>({n}, s.m)});
        out.push_back({s.param.name + "#v", Tensor<T>({n}, s.v)});
        out.push_back({s.param.name + "#steps", Tensor<T>({1}, {static_cast<T>(s.steps)})});
      }
    return out;
  }

  /// Counterpart of state_tensors(); `lookup` returns the stored values
  /// for a name or throws.
  template <class Lookup>
  void load_state(Lookup&& lookup) {
    for (auto& g : groups_)
      for (auto& s : g.slots) {
        s.m = lookup(s.param.name + "#m", s.m.size());
        s.v = lookup(s.param.name + "#v", s.v.size());
        s.steps = static_cast<long>(lookup(s.param.name + "#steps", 1)[0]);
      }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& g : groups_) n += g.slots.size();
    return n;
  }

  bool contains(const Tensor<T>& t) const {
    for (const auto& g : groups_)
      for (const auto& s : g.slots)
        if (s.param.tensor.node() == t.node()) return true;
    return false;
  }

  const AdamOptions& options() const { return options_; }

 private:
  struct Slot {
    NamedTensor<T> param;
    std::vector<T> m;
    std::vector<T> v;
    long steps;
  };
  struct Group {
    double lr;
    std::vector<Slot> slots;
  };

  AdamOptions options_;
  std::vector<Group> groups_;
};

}  // namespace ftgan::nn
