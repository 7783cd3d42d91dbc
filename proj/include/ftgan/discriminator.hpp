#pragma once

// Per-scale discriminator: stride-2 conv blocks down to a 4x4 map, an
// unconditional head, and a conditional head that sees the 4x4 map
// concatenated with a projected, spatially repeated sentence vector.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftgan/generator.hpp"

namespace ftgan {

struct DiscriminatorConfig {
  int scale = 64;
  std::int64_t base_channels = 16;  // ndf
  std::int64_t text_dim = 256;
  std::int64_t cond_channels = 32;
  bool spectral_norm = false;

  /// Downsampling blocks from `scale` to 4x4.
  int blocks() const { return log2_exact(scale) - 2; }
  /// Output channels of block k: ndf * 2^k, capped at ndf * 8.
  std::int64_t channels(int k) const { return base_channels << std::min(k, 3); }

  void validate() const {
    FTGAN_EXPECTS(is_power_of_two(scale) && scale >= 8, "discriminator scale must be a power of two >= 8, got ", scale);
    FTGAN_EXPECTS(base_channels > 0 && text_dim > 0 && cond_channels > 0, "discriminator dims must be positive");
  }
  nlohmann::json to_json() const {
    return {{"scale", scale},
            {"base_channels", base_channels},
            {"text_dim", text_dim},
            {"cond_channels", cond_channels},
            {"spectral_norm", spectral_norm}};
  }
  static DiscriminatorConfig from_json(const nlohmann::json& j) {
    DiscriminatorConfig c;
    c.scale = j.at("scale");
    c.base_channels = j.value("base_channels", c.base_channels);
    c.text_dim = j.value("text_dim", c.text_dim);
    c.cond_channels = j.value("cond_channels", c.cond_channels);
    c.spectral_norm = j.value("spectral_norm", c.spectral_norm);
    return c;
  }
};

/// Raw logits of both heads, [B] each. Probabilities are sigmoid(logit).
template <class T>
struct DiscriminatorOutput {
  ag::Tensor<T> uncond;
  ag::Tensor<T> cond;

  static constexpr double kEps = 1e-7;

  /// Probabilities clamped to [eps, 1 - eps].
  static std::vector<double> probabilities(const ag::Tensor<T>& logits) {
    std::vector<double> p;
    for (T v : logits.values())
      p.push_back(std::clamp(static_cast<double>(ag::stable_sigmoid(v)), kEps, 1.0 - kEps));
    return p;
  }
  std::vector<double> uncond_probabilities() const { return probabilities(uncond); }
  std::vector<double> cond_probabilities() const { return probabilities(cond); }
};

inline constexpr const char* kDiscriminatorFormat = "ftgan-discriminator/1";

template <class T>
class Discriminator : public nn::Module<T> {
 public:
  Discriminator() = default;
  Discriminator(const DiscriminatorConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    const auto& c = config_;
    std::int64_t in = 3;
    for (int k = 0; k < c.blocks(); ++k) {
      convs_.emplace_back(in, c.channels(k), 4, 2, 1, false, rng, 0.02, c.spectral_norm);
      bns_.emplace_back(c.channels(k), rng, 0.02);
      in = c.channels(k);
    }
    uncond_head_ = nn::Conv2d<T>(in, 1, 4, 1, 0, true, rng, 0.02, c.spectral_norm);
    cond_proj_ = nn::Linear<T>(c.text_dim, c.cond_channels, true, rng, 0.02);
    joint_conv_ = nn::Conv2d<T>(in + c.cond_channels, in, 3, 1, 1, false, rng, 0.02, c.spectral_norm);
    joint_bn_ = nn::BatchNorm2d<T>(in, rng, 0.02);
    cond_head_ = nn::Conv2d<T>(in, 1, 4, 1, 0, true, rng, 0.02, c.spectral_norm);
  }

  const DiscriminatorConfig& config() const { return config_; }
  int block_count() const { return static_cast<int>(convs_.size()); }

  /// Downsampled 4x4 feature map.
  ag::Tensor<T> features(const ag::Tensor<T>& image) {
    FTGAN_EXPECTS(image.rank() == 4 && image.dim(1) == 3 && image.dim(2) == config_.scale &&
                      image.dim(3) == config_.scale,
                  "discriminator for scale ", config_.scale, " got image ", ag::to_string(image.shape()));
    ag::Tensor<T> h = image;
    for (std::size_t k = 0; k < convs_.size(); ++k) h = ag::leaky_relu(bns_[k].forward(convs_[k].forward(h)), T(0.2));
    return h;
  }

  DiscriminatorOutput<T> forward(const ag::Tensor<T>& image, const ag::Tensor<T>& sentence) {
    FTGAN_EXPECTS(sentence.rank() == 2 && sentence.dim(0) == image.dim(0) && sentence.dim(1) == config_.text_dim,
                  "discriminator expects C [", image.dim(0), ", ", config_.text_dim, "], got ",
                  ag::to_string(sentence.shape()));
    auto h = features(image);
    const auto b = image.dim(0);
    DiscriminatorOutput<T> out;
    out.uncond = ag::reshape(uncond_head_.forward(h), {b});
    auto c = ag::repeat_spatial(cond_proj_.forward(sentence), h.dim(2), h.dim(3));
    auto j = ag::leaky_relu(joint_bn_.forward(joint_conv_.forward(ag::concat<T>({h, c}, 1))), T(0.2));
    out.cond = ag::reshape(cond_head_.forward(j), {b});
    return out;
  }

  void set_training(bool on) override {
    nn::Module<T>::set_training(on);
    for (auto& m : convs_) m.set_training(on);
    for (auto& m : bns_) m.set_training(on);
    for (auto* m : {&uncond_head_, &joint_conv_, &cond_head_}) m->set_training(on);
    joint_bn_.set_training(on);
  }

  void collect_parameters(nn::TensorList<T>& out, const std::string& prefix) const override {
    for (std::size_t k = 0; k < convs_.size(); ++k) {
      convs_[k].collect_parameters(out, nn::join_name(prefix, "down" + std::to_string(k) + ".conv"));
      bns_[k].collect_parameters(out, nn::join_name(prefix, "down" + std::to_string(k) + ".bn"));
    }
    uncond_head_.collect_parameters(out, nn::join_name(prefix, "uncond_head"));
    cond_proj_.collect_parameters(out, nn::join_name(prefix, "cond_proj"));
    joint_conv_.collect_parameters(out, nn::join_name(prefix, "joint.conv"));
    joint_bn_.collect_parameters(out, nn::join_name(prefix, "joint.bn"));
    cond_head_.collect_parameters(out, nn::join_name(prefix, "cond_head"));
  }

  void collect_buffers(nn::TensorList<T>& out, const std::string& prefix) const override {
    for (std::size_t k = 0; k < convs_.size(); ++k) {
      convs_[k].collect_buffers(out, nn::join_name(prefix, "down" + std::to_string(k) + ".conv"));
      bns_[k].collect_buffers(out, nn::join_name(prefix, "down" + std::to_string(k) + ".bn"));
    }
    uncond_head_.collect_buffers(out, nn::join_name(prefix, "uncond_head"));
    joint_conv_.collect_buffers(out, nn::join_name(prefix, "joint.conv"));
    joint_bn_.collect_buffers(out, nn::join_name(prefix, "joint.bn"));
    cond_head_.collect_buffers(out, nn::join_name(prefix, "cond_head"));
  }

  void save(const std::filesystem::path& path) const {
    nn::write_archive(path, this->state(), {{"format", kDiscriminatorFormat}, {"config", config_.to_json()}});
  }
  void load(const std::filesystem::path& path) {
    const auto ar = nn::read_archive(path);
    if (ar.meta.value("format", "") != kDiscriminatorFormat)
      throw LoadError(path.string() + ": not a discriminator checkpoint");
    nn::load_into(ar, this->state(), path);
  }

 private:
  DiscriminatorConfig config_;
  std::vector<nn::Conv2d<T>> convs_;
  std::vector<nn::BatchNorm2d<T>> bns_;
  nn::Conv2d<T> uncond_head_;
  nn::Linear<T> cond_proj_;
  nn::Conv2d<T> joint_conv_;
  nn::BatchNorm2d<T> joint_bn_;
  nn::Conv2d<T> cond_head_;
};

}  // namespace ftgan
