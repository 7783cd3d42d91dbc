#pragma once

// Multi-stage image decoder.
//
// Stage 1: FC([C, z]) -> 4x4 map -> upsample blocks to the first stage
// scale, with transformed noise added at the configured feature-map
// scales. Later stages: word attention over the previous stage's features,
// concatenation, one upsample block and one finetune block. Every stage
// ends in conv3x3 + tanh, so pixels live in [-1, 1].

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftgan/nn/archive.hpp"
#include "ftgan/nn/layers.hpp"
#include "ftgan/text_encoder.hpp"

namespace ftgan {

enum class UpsampleMode { nearest, transposed };

inline std::string to_string(UpsampleMode m) { return m == UpsampleMode::nearest ? "nearest" : "transposed"; }
inline UpsampleMode parse_upsample_mode(const std::string& s) {
  if (s == "nearest") return UpsampleMode::nearest;
  if (s == "transposed") return UpsampleMode::transposed;
  throw ValidationError("unknown upsample mode '" + s + "' (expected nearest or transposed)");
}

inline bool is_power_of_two(std::int64_t v) { return v > 0 && (v & (v - 1)) == 0; }
inline int log2_exact(std::int64_t v) {
  int k = 0;
  while ((std::int64_t{1} << k) < v) ++k;
  return k;
}

struct GeneratorConfig {
  std::vector<int> stage_scales{16, 32, 64};
  std::int64_t base_channels = 16;  // ngf; channels at the first stage scale and after
  std::int64_t text_dim = 256;      // D
  std::int64_t z_dim = 100;
  std::vector<int> noise_injection_scales{4, 8, 16};
  bool per_channel_noise_weight = false;
  double noise_weight_init = 0.1;
  UpsampleMode upsample = UpsampleMode::nearest;
  bool conditioning_augmentation = false;
  std::int64_t ca_dim = 100;

  static GeneratorConfig full_scale() {
    GeneratorConfig c;
    c.stage_scales = {64, 128, 256};
    c.base_channels = 32;
    c.noise_injection_scales = {8, 16, 32};
    return c;
  }

  /// Three stage-1 injection scales for first stage scale s0: s0/8, s0/4,
  /// s0/2 where those are at least 4, topped up with s0.
  static std::vector<int> default_injection_scales(int s0) {
    std::vector<int> out;
    for (int d : {8, 4, 2})
      if (s0 / d >= 4) out.push_back(s0 / d);
    if (out.size() < 3) out.push_back(s0);
    return out;
  }

  /// Replace the stage scales and reset the injection scales to match.
  void set_scales(std::vector<int> scales) {
    stage_scales = std::move(scales);
    FTGAN_EXPECTS(!stage_scales.empty(), "generator needs at least one stage");
    noise_injection_scales = default_injection_scales(stage_scales.front());
  }

  int stages() const { return static_cast<int>(stage_scales.size()); }
  int largest_scale() const { return stage_scales.back(); }
  /// Number of 2x blocks from the 4x4 base to the first stage scale.
  int stage1_blocks() const { return log2_exact(stage_scales.front()) - 2; }
  /// Channels of the stage-1 map at 4 * 2^k.
  std::int64_t stage1_channels(int k) const { return base_channels << (stage1_blocks() - k); }
  std::int64_t condition_dim() const { return conditioning_augmentation ? ca_dim : text_dim; }

  void validate() const {
    FTGAN_EXPECTS(!stage_scales.empty(), "generator needs at least one stage");
    FTGAN_EXPECTS(stage_scales.front() >= 4 && is_power_of_two(stage_scales.front()),
                  "first stage scale must be a power of two >= 4, got ", stage_scales.front());
    for (std::size_t i = 1; i < stage_scales.size(); ++i)
      FTGAN_EXPECTS(stage_scales[i] == 2 * stage_scales[i - 1], "stage scales must double, got ", stage_scales[i - 1],
                    " then ", stage_scales[i]);
    FTGAN_EXPECTS(base_channels > 0 && text_dim > 0 && z_dim > 0, "generator dims must be positive");
    FTGAN_EXPECTS(!conditioning_augmentation || ca_dim > 0, "ca_dim must be positive");
    for (std::size_t i = 0; i < noise_injection_scales.size(); ++i) {
      const int s = noise_injection_scales[i];
      FTGAN_EXPECTS(is_power_of_two(s) && s >= 4 && s <= stage_scales.front(), "noise injection scale ", s,
                    " is not a stage-1 feature-map scale (4..", stage_scales.front(), ")");
      FTGAN_EXPECTS(i == 0 || s > noise_injection_scales[i - 1], "noise injection scales must be ascending");
    }
  }

  nlohmann::json to_json() const {
    return {{"stage_scales", stage_scales},
            {"base_channels", base_channels},
            {"text_dim", text_dim},
            {"z_dim", z_dim},
            {"noise_injection_scales", noise_injection_scales},
            {"per_channel_noise_weight", per_channel_noise_weight},
            {"noise_weight_init", noise_weight_init},
            {"upsample", to_string(upsample)},
            {"conditioning_augmentation", conditioning_augmentation},
            {"ca_dim", ca_dim}};
  }
  static GeneratorConfig from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    c.stage_scales = j.value("stage_scales", c.stage_scales);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.text_dim = j.value("text_dim", c.text_dim);
    c.z_dim = j.value("z_dim", c.z_dim);
    c.noise_injection_scales = j.value("noise_injection_scales", c.noise_injection_scales);
    c.per_channel_noise_weight = j.value("per_channel_noise_weight", c.per_channel_noise_weight);
    c.noise_weight_init = j.value("noise_weight_init", c.noise_weight_init);
    c.upsample = parse_upsample_mode(j.value("upsample", to_string(c.upsample)));
    c.conditioning_augmentation = j.value("conditioning_augmentation", c.conditioning_augmentation);
    c.ca_dim = j.value("ca_dim", c.ca_dim);
    return c;
  }
};

/// z ~ N(0, I), [batch, z_dim].
template <class T>
ag::Tensor<T> sample_noise(std::int64_t batch, std::int64_t z_dim, Rng& rng) {
  std::vector<T> v(static_cast<std::size_t>(batch * z_dim));
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return ag::Tensor<T>({batch, z_dim}, std::move(v));
}

/// Word attention maps of one stage, [batch, T_max, H, W]; plain values.
template <class T>
struct AttentionMaps {
  std::int64_t batch = 0, words = 0, height = 0, width = 0;
  std::vector<std::int64_t> lengths;
  std::vector<T> values;

  T at(std::int64_t b, std::int64_t t, std::int64_t y, std::int64_t x) const {
    return values[static_cast<std::size_t>(((b * words + t) * height + y) * width + x)];
  }
};

template <class T>
struct GeneratorOutput {
  std::vector<ag::Tensor<T>> images;        // one per stage, [B, 3, s, s]
  std::vector<AttentionMaps<T>> attention;  // one per attended stage (stages 2..m)
  ag::Tensor<T> kl;                         // conditioning-augmentation KL, defined only with CA
};

/// 2x upsampling block: nearest resize + conv3x3, or a 4x4 stride-2
/// transposed convolution; then batch norm and ReLU.
template <class T>
class UpBlock : public nn::Module<T> {
 public:
  UpBlock() = default;
  UpBlock(std::int64_t in, std::int64_t out, UpsampleMode mode, Rng& rng) : mode_(mode) {
    if (mode == UpsampleMode::nearest)
      conv_ = nn::Conv2d<T>(in, out, 3, 1, 1, false, rng, 0.02);
    else
      deconv_ = nn::ConvTranspose2d<T>(in, out, 4, 2, 1, false, rng, 0.02);
    bn_ = nn::BatchNorm2d<T>(out, rng, 0.02);
  }

  ag::Tensor<T> forward(const ag::Tensor<T>& x) {
    auto y = mode_ == UpsampleMode::nearest ? conv_.forward(ag::upsample_nearest2x(x)) : deconv_.forward(x);
    return ag::relu(bn_.forward(y));
  }

  void set_training(bool on) override {
    nn::Module<T>::set_training(on);
    bn_.set_training(on);
  }

  void collect_parameters(nn::TensorList<T>& out, const std::string& prefix) const override {
    if (mode_ == UpsampleMode::nearest)
      conv_.collect_parameters(out, nn::join_name(prefix, "conv"));
    else
      deconv_.collect_parameters(out, nn::join_name(prefix, "deconv"));
    bn_.collect_parameters(out, nn::join_name(prefix, "bn"));
  }
  void collect_buffers(nn::TensorList<T>& out, const std::string& prefix) const override {
    bn_.collect_buffers(out, nn::join_name(prefix, "bn"));
  }

 private:
  UpsampleMode mode_ = UpsampleMode::nearest;
  nn::Conv2d<T> conv_;
  nn::ConvTranspose2d<T> deconv_;
  nn::BatchNorm2d<T> bn_;
};

/// conv3x3 + batch norm + ReLU at constant resolution.
template <class T>
class FinetuneBlock : public nn::Module<T> {
 public:
  FinetuneBlock() = default;
  FinetuneBlock(std::int64_t in, std::int64_t out, Rng& rng)
      : conv_(in, out, 3, 1, 1, false, rng, 0.02), bn_(out, rng, 0.02) {}

  ag::Tensor<T> forward(const ag::Tensor<T>& x) { return ag::relu(bn_.forward(conv_.forward(x))); }

  void set_training(bool on) override {
    nn::Module<T>::set_training(on);
    bn_.set_training(on);
  }
  void collect_parameters(nn::TensorList<T>& out, const std::string& prefix) const override {
    conv_.collect_parameters(out, nn::join_name(prefix, "conv"));
    bn_.collect_parameters(out, nn::join_name(prefix, "bn"));
  }
  void collect_buffers(nn::TensorList<T>& out, const std::string& prefix) const override {
    bn_.collect_buffers(out, nn::join_name(prefix, "bn"));
  }

 private:
  nn::Conv2d<T> conv_;
  nn::BatchNorm2d<T> bn_;
};

/// Spatial attention over words. Words are projected to the feature
/// channel count; each location takes a softmax over the valid words of
/// its caption and receives the weighted sum of projected words.
template <class T>
class WordAttention : public nn::Module<T> {
 public:
  WordAttention() = default;
  WordAttention(std::int64_t text_dim, std::int64_t channels, Rng& rng)
      : proj_(text_dim, channels, false, rng, 0.02) {}

  struct Result {
    ag::Tensor<T> context;  // [B, C, H, W]
    ag::Tensor<T> weights;  // [B, H*W, T], zero on pad words
  };

  Result forward(const ag::Tensor<T>& h, const WordFeatures<T>& words) const {
    FTGAN_EXPECTS(h.rank() == 4 && words.e.rank() == 3 && h.dim(0) == words.e.dim(0),
                  "attention: feature map ", ag::to_string(h.shape()), " vs words ", ag::to_string(words.e.shape()));
    FTGAN_EXPECTS(words.e.dim(1) == proj_.in_features(), "attention: word dim ", words.e.dim(1), " != ",
                  proj_.in_features());
    const auto b = h.dim(0), c = h.dim(1), hh = h.dim(2), ww = h.dim(3), t = words.e.dim(2);
    FTGAN_EXPECTS(c == proj_.out_features(), "attention: feature channels ", c, " != ", proj_.out_features());
    // [B, D, T] -> [B*T, D] -> [B, T, C]
    auto flat_words = ag::reshape(ag::transpose_last2(words.e), {b * t, words.e.dim(1)});
    auto pw = ag::reshape(proj_.forward(flat_words), {b, t, c});
    auto hf = ag::reshape(h, {b, c, hh * ww});
    auto weights = ag::softmax_last(ag::bmm(hf, pw, true, true), &words.lengths);  // [B, HW, T]
    auto ctx = ag::bmm(pw, weights, true, true);                                  // [B, C, HW]
    return {ag::reshape(ctx, {b, c, hh, ww}), weights};
  }

  void collect_parameters(nn::TensorList<T>& out, const std::string& prefix) const override {
    proj_.collect_parameters(out, nn::join_name(prefix, "proj"));
  }

 private:
  nn::Linear<T> proj_;
};

inline constexpr const char* kGeneratorFormat = "ftgan-generator/1";

template <class T>
class Generator : public nn::Module<T> {
 public:
  Generator() = default;
  Generator(const GeneratorConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    const auto& c = config_;
    if (c.conditioning_augmentation) ca_fc_ = nn::Linear<T>(c.text_dim, 2 * c.ca_dim, true, rng, 0.02);
    const auto c0 = c.stage1_channels(0);
    fc_ = nn::Linear<T>(c.condition_dim() + c.z_dim, c0 * 16, false, rng, 0.02);
    fc_bn_ = nn::BatchNorm2d<T>(c0, rng, 0.02);
    for (int k = 0; k < c.stage1_blocks(); ++k)
      stage1_.emplace_back(c.stage1_channels(k), c.stage1_channels(k + 1), c.upsample, rng);
    for (int s : c.noise_injection_scales) {
      const auto ch = c.stage1_channels(log2_exact(s) - 2);
      noise_fc_.emplace_back(c.z_dim, ch * s * s, true, rng, 0.02);
      noise_w_.push_back(ag::Tensor<T>::full({c.per_channel_noise_weight ? ch : 1},
                                             static_cast<T>(c.noise_weight_init), true));
    }
    to_image_.emplace_back(c.base_channels, 3, 3, 1, 1, true, rng, 0.02);
    for (int i = 1; i < c.stages(); ++i) {
      attn_.emplace_back(c.text_dim, c.base_channels, rng);
      up_.emplace_back(2 * c.base_channels, c.base_channels, c.upsample, rng);
      finetune_.emplace_back(c.base_channels, c.base_channels, rng);
      to_image_.emplace_back(c.base_channels, 3, 3, 1, 1, true, rng, 0.02);
    }
  }

  const GeneratorConfig& config() const { return config_; }

  /// feature_map + W_i * reshape(FC_i(z)) for injection slot `i`.
  ag::Tensor<T> inject_noise(const ag::Tensor<T>& feature_map, const ag::Tensor<T>& z, std::size_t i) const {
    FTGAN_EXPECTS(i < noise_fc_.size(), "no noise injection slot ", i);
    const int s = config_.noise_injection_scales[i];
    const auto ch = config_.stage1_channels(log2_exact(s) - 2);
    FTGAN_EXPECTS(feature_map.rank() == 4 && feature_map.dim(1) == ch && feature_map.dim(2) == s &&
                      feature_map.dim(3) == s,
                  "noise slot ", i, " expects [B, ", ch, ", ", s, ", ", s, "], got ",
                  ag::to_string(feature_map.shape()));
    auto noise = ag::reshape(noise_fc_[i].forward(z), {z.dim(0), ch, s, s});
    const auto& w = noise_w_[i];
    return ag::add(feature_map, w.numel() == 1 ? ag::mul_scalar(noise, w) : ag::mul_channels(noise, w));
  }

  ag::Tensor<T>& noise_weight(std::size_t i) { return noise_w_.at(i); }
  const WordAttention<T>& attention(std::size_t stage) const { return attn_.at(stage - 1); }

  /// Generate the image pyramid. `ca_rng` supplies the augmentation
  /// noise and is required only with conditioning augmentation.
  GeneratorOutput<T> synthesize(const ag::Tensor<T>& sentence, const ag::Tensor<T>& z, const WordFeatures<T>& words,
                                Rng* ca_rng = nullptr) {
    const auto& c = config_;
    const auto b = sentence.dim(0);
    FTGAN_EXPECTS(sentence.rank() == 2 && sentence.dim(1) == c.text_dim, "generator expects C [B, ", c.text_dim,
                  "], got ", ag::to_string(sentence.shape()));
    FTGAN_EXPECTS(z.rank() == 2 && z.dim(0) == b && z.dim(1) == c.z_dim, "generator expects z [", b, ", ", c.z_dim,
                  "], got ", ag::to_string(z.shape()));
    FTGAN_EXPECTS(words.e.rank() == 3 && words.e.dim(0) == b && words.e.dim(1) == c.text_dim,
                  "generator expects words [", b, ", ", c.text_dim, ", T], got ", ag::to_string(words.e.shape()));
    GeneratorOutput<T> out;
    auto cond = sentence;
    if (c.conditioning_augmentation) {
      FTGAN_EXPECTS(ca_rng != nullptr, "conditioning augmentation needs a random source");
      auto stats = ca_fc_.forward(sentence);
      auto mu = ag::narrow(stats, 1, 0, c.ca_dim);
      auto logvar = ag::narrow(stats, 1, c.ca_dim, c.ca_dim);
      auto eps = sample_noise<T>(b, c.ca_dim, *ca_rng);
      cond = ag::add(mu, ag::mul(eps, ag::exp(ag::scale(logvar, T(0.5)))));
      // KL(N(mu, var) || N(0, 1)), averaged over the batch and dimensions.
      auto kl = ag::sub(ag::add(ag::mul(mu, mu), ag::exp(logvar)), ag::add_scalar(logvar, T(1)));
      out.kl = ag::scale(ag::mean(kl), T(0.5));
    }
    auto h = ag::reshape(fc_.forward(ag::concat<T>({cond, z}, 1)), {b, c.stage1_channels(0), 4, 4});
    h = ag::relu(fc_bn_.forward(h));
    std::size_t slot = 0;
    auto maybe_inject = [&](int scale) {
      if (slot < noise_fc_.size() && c.noise_injection_scales[slot] == scale) h = inject_noise(h, z, slot++);
    };
    maybe_inject(4);
    for (std::size_t k = 0; k < stage1_.size(); ++k) {
      h = stage1_[k].forward(h);
      maybe_inject(4 << (k + 1));
    }
    out.images.push_back(ag::tanh(to_image_[0].forward(h)));
    for (int i = 1; i < c.stages(); ++i) {
      auto a = attn_[i - 1].forward(h, words);
      AttentionMaps<T> maps;
      maps.batch = b;
      maps.words = words.e.dim(2);
      maps.height = h.dim(2);
      maps.width = h.dim(3);
      maps.lengths = words.lengths;
      maps.values = ag::transpose_last2(a.weights.detach()).values();
      out.attention.push_back(std::move(maps));
      h = up_[i - 1].forward(ag::concat<T>({h, a.context}, 1));
      h = finetune_[i - 1].forward(h);
      out.images.push_back(ag::tanh(to_image_[i].forward(h)));
    }
    return out;
  }

  void set_training(bool on) override {
    nn::Module<T>::set_training(on);
    fc_bn_.set_training(on);
    for (auto& m : stage1_) m.set_training(on);
    for (auto& m : up_) m.set_training(on);
    for (auto& m : finetune_) m.set_training(on);
  }

  void collect_parameters(nn::TensorList<T>& out, const std::string& prefix) const override {
    if (config_.conditioning_augmentation) ca_fc_.collect_parameters(out, nn::join_name(prefix, "ca"));
    fc_.collect_parameters(out, nn::join_name(prefix, "fc"));
    fc_bn_.collect_parameters(out, nn::join_name(prefix, "fc_bn"));
    for (std::size_t k = 0; k < stage1_.size(); ++k)
      stage1_[k].collect_parameters(out, nn::join_name(prefix, "stage0.up" + std::to_string(k)));
    for (std::size_t i = 0; i < noise_fc_.size(); ++i) {
      noise_fc_[i].collect_parameters(out, nn::join_name(prefix, "noise" + std::to_string(i) + ".fc"));
      out.push_back({nn::join_name(prefix, "noise" + std::to_string(i) + ".W"), noise_w_[i]});
    }
    for (std::size_t i = 0; i < attn_.size(); ++i) {
      const auto p = nn::join_name(prefix, "stage" + std::to_string(i + 1));
      attn_[i].collect_parameters(out, nn::join_name(p, "attn"));
      up_[i].collect_parameters(out, nn::join_name(p, "up"));
      finetune_[i].collect_parameters(out, nn::join_name(p, "finetune"));
    }
    for (std::size_t i = 0; i < to_image_.size(); ++i)
      to_image_[i].collect_parameters(out, nn::join_name(prefix, "to_image" + std::to_string(i)));
  }

  void collect_buffers(nn::TensorList<T>& out, const std::string& prefix) const override {
    fc_bn_.collect_buffers(out, nn::join_name(prefix, "fc_bn"));
    for (std::size_t k = 0; k < stage1_.size(); ++k)
      stage1_[k].collect_buffers(out, nn::join_name(prefix, "stage0.up" + std::to_string(k)));
    for (std::size_t i = 0; i < up_.size(); ++i) {
      const auto p = nn::join_name(prefix, "stage" + std::to_string(i + 1));
      up_[i].collect_buffers(out, nn::join_name(p, "up"));
      finetune_[i].collect_buffers(out, nn::join_name(p, "finetune"));
    }
  }

  void save(const std::filesystem::path& path) const {
    nn::write_archive(path, this->state(), {{"format", kGeneratorFormat}, {"config", config_.to_json()}});
  }
  void load(const std::filesystem::path& path) {
    const auto ar = nn::read_archive(path);
    if (ar.meta.value("format", "") != kGeneratorFormat) throw LoadError(path.string() + ": not a generator checkpoint");
    nn::load_into(ar, this->state(), path);
  }
  static Generator from_checkpoint(const std::filesystem::path& path) {
    const auto ar = nn::read_archive(path);
    if (ar.meta.value("format", "") != kGeneratorFormat) throw LoadError(path.string() + ": not a generator checkpoint");
    Rng rng(0);
    Generator g(GeneratorConfig::from_json(ar.meta.at("config")), rng);
    nn::load_into(ar, g.state(), path);
    return g;
  }

 private:
  GeneratorConfig config_;
  nn::Linear<T> ca_fc_;
  nn::Linear<T> fc_;
  nn::BatchNorm2d<T> fc_bn_;
  std::vector<UpBlock<T>> stage1_;
  std::vector<nn::Linear<T>> noise_fc_;
  std::vector<ag::Tensor<T>> noise_w_;
  std::vector<WordAttention<T>> attn_;
  std::vector<UpBlock<T>> up_;
  std::vector<FinetuneBlock<T>> finetune_;
  std::vector<nn::Conv2d<T>> to_image_;
};

}  // namespace ftgan
