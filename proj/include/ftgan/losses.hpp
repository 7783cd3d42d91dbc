#pragma once

// Adversarial losses. The differentiable versions take discriminator
// logits and use log(sigmoid(x)) and log(1 - sigmoid(x)) = log(sigmoid(-x))
// directly, which needs no clamp. The probability versions are the plain
// formulas for checking arithmetic.

#include <cmath>
#include <numeric>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftgan/discriminator.hpp"

namespace ftgan {

namespace detail {
inline void expect_probability(double p, const char* what) {
  FTGAN_EXPECTS(std::isfinite(p) && p > 0.0 && p < 1.0, what, " probability ", p, " outside (0, 1)");
}
inline double mean_log(const std::vector<double>& p, bool complement, const char* what) {
  FTGAN_EXPECTS(!p.empty(), "empty ", what, " scores");
  double acc = 0;
  for (double v : p) {
    expect_probability(v, what);
    acc += complement ? std::log1p(-v) : std::log(v);
  }
  return acc / static_cast<double>(p.size());
}
}  // namespace detail

/// -1/2 mean log D(x) - 1/2 mean log D(x, C) on generated images.
inline double generator_stage_loss(const std::vector<double>& uncond, const std::vector<double>& cond) {
  return -0.5 * detail::mean_log(uncond, false, "unconditional") - 0.5 * detail::mean_log(cond, false, "conditional");
}

/// Discriminator loss from probabilities. `wrong_cond` holds conditional
/// scores of real images paired with mismatched captions; when given it
/// adds -1/2 mean log(1 - D(x, C_wrong)).
inline double discriminator_loss(const std::vector<double>& real_uncond, const std::vector<double>& fake_uncond,
                                 const std::vector<double>& real_cond, const std::vector<double>& fake_cond,
                                 const std::vector<double>* wrong_cond = nullptr) {
  double l = -0.5 * (detail::mean_log(real_uncond, false, "real unconditional") +
                     detail::mean_log(fake_uncond, true, "fake unconditional") +
                     detail::mean_log(real_cond, false, "real conditional") +
                     detail::mean_log(fake_cond, true, "fake conditional"));
  if (wrong_cond) l -= 0.5 * detail::mean_log(*wrong_cond, true, "mismatched conditional");
  return l;
}

inline double total_generator_loss(const std::vector<double>& stage_losses, double damsm, double lambda,
                                   std::size_t stages) {
  FTGAN_EXPECTS(stage_losses.size() == stages, "expected ", stages, " stage losses, got ", stage_losses.size());
  return std::accumulate(stage_losses.begin(), stage_losses.end(), 0.0) + lambda * damsm;
}

/// Differentiable stage loss of the generator from logits.
template <class T>
ag::Tensor<T> generator_stage_loss(const DiscriminatorOutput<T>& fake) {
  auto lu = ag::mean(ag::log_sigmoid(fake.uncond));
  auto lc = ag::mean(ag::log_sigmoid(fake.cond));
  return ag::scale(ag::add(lu, lc), T(-0.5));
}

/// Differentiable discriminator loss from logits.
template <class T>
ag::Tensor<T> discriminator_loss(const DiscriminatorOutput<T>& real, const DiscriminatorOutput<T>& fake,
                                 const ag::Tensor<T>* wrong_cond = nullptr) {
  auto neg = [](const ag::Tensor<T>& x) { return ag::scale(x, T(-1)); };
  auto acc = ag::add(ag::add(ag::mean(ag::log_sigmoid(real.uncond)), ag::mean(ag::log_sigmoid(neg(fake.uncond)))),
                     ag::add(ag::mean(ag::log_sigmoid(real.cond)), ag::mean(ag::log_sigmoid(neg(fake.cond)))));
  if (wrong_cond) acc = ag::add(acc, ag::mean(ag::log_sigmoid(neg(*wrong_cond))));
  return ag::scale(acc, T(-0.5));
}

/// Every loss term of one training step.
struct LossReport {
  std::int64_t step = 0;
  std::vector<double> stage;  // L_stage_i
  double damsm = 0;
  double lambda = 0;
  double generator = 0;  // L_G
  std::vector<double> discriminator;  // L_D_i
  double text_grad_norm = 0;
  double kl = 0;  // conditioning augmentation term, 0 when off
  std::uint64_t seed = 0;

  double stage_sum() const { return std::accumulate(stage.begin(), stage.end(), 0.0); }

  /// L_G recomputed from the stored terms.
  double recompute_generator() const { return stage_sum() + lambda * damsm + kl; }

  nlohmann::json to_json() const {
    return {{"step", step},   {"L_G", generator},  {"L_stage", stage},           {"L_stage_sum", stage_sum()},
            {"L_DAMSM", damsm}, {"lambda", lambda}, {"L_D", discriminator},      {"text_grad_norm", text_grad_norm},
            {"kl", kl},       {"seed", seed}};
  }
  static LossReport from_json(const nlohmann::json& j) {
    LossReport r;
    r.step = j.at("step");
    r.generator = j.at("L_G");
    r.stage = j.at("L_stage").get<std::vector<double>>();
    r.damsm = j.at("L_DAMSM");
    r.lambda = j.at("lambda");
    r.discriminator = j.at("L_D").get<std::vector<double>>();
    r.text_grad_norm = j.value("text_grad_norm", 0.0);
    r.kl = j.value("kl", 0.0);
    r.seed = j.value("seed", std::uint64_t{0});
    return r;
  }
};

}  // namespace ftgan
