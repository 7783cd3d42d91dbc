#pragma once

// Deep attentional multimodal similarity: an image encoder producing
// region and global features, attention-based word/region matching and
// the four-term image-text matching loss. Also the text-encoder
// pretraining loop.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftgan/autograd/similarity.hpp"
#include "ftgan/nn/adam.hpp"
#include "ftgan/text_encoder.hpp"

namespace ftgan {

struct DamsmConfig {
  double gamma1 = 5.0;
  double gamma2 = 5.0;
  double gamma3 = 10.0;
  double word_weight = 1.0;
  double sentence_weight = 1.0;

  void validate() const {
    FTGAN_EXPECTS(gamma1 > 0 && gamma2 > 0 && gamma3 > 0, "DAMSM gammas must be positive");
    FTGAN_EXPECTS(word_weight >= 0 && sentence_weight >= 0, "DAMSM loss weights must be nonnegative");
  }
  nlohmann::json to_json() const {
    return {{"gamma1", gamma1},
            {"gamma2", gamma2},
            {"gamma3", gamma3},
            {"word_weight", word_weight},
            {"sentence_weight", sentence_weight}};
  }
  static DamsmConfig from_json(const nlohmann::json& j) {
    DamsmConfig c;
    c.gamma1 = j.value("gamma1", c.gamma1);
    c.gamma2 = j.value("gamma2", c.gamma2);
    c.gamma3 = j.value("gamma3", c.gamma3);
    c.word_weight = j.value("word_weight", c.word_weight);
    c.sentence_weight = j.value("sentence_weight", c.sentence_weight);
    return c;
  }
};

struct ImageEncoderConfig {
  std::int64_t input_size = 64;
  std::int64_t feature_dim = 256;
  std::int64_t base_channels = 32;

  /// Side of the region grid: 17 when the s/8 map is at least that
  /// large, else the map itself.
  std::int64_t grid() const { return std::min<std::int64_t>(17, input_size / 8); }
  std::int64_t regions() const { return grid() * grid(); }

  void validate() const {
    FTGAN_EXPECTS(input_size >= 8 && input_size % 8 == 0, "image encoder input size must be a multiple of 8, got ",
                  input_size);
    FTGAN_EXPECTS(feature_dim > 0 && base_channels > 0, "image encoder dims must be positive");
  }
  nlohmann::json to_json() const {
    return {{"input_size", input_size}, {"feature_dim", feature_dim}, {"base_channels", base_channels}};
  }
  static ImageEncoderConfig from_json(const nlohmann::json& j) {
    ImageEncoderConfig c;
    c.input_size = j.at("input_size");
    c.feature_dim = j.at("feature_dim");
    c.base_channels = j.value("base_channels", c.base_channels);
    return c;
  }
};

template <class T>
struct ImageFeatures {
  ag::Tensor<T> regions;  // [B, D, R]
  ag::Tensor<T> global;   // [B, D]
};

inline constexpr const char* kImageEncoderFormat = "ftgan-image-encoder/1";

/// Three stride-2 convolutions (leaky rectifier, no normalization) to
/// s/8, adaptive pooling to the region grid, 1x1 projection to D for
/// regions and a linear projection of the pooled map for the global
/// feature.
template <class T>
class ImageEncoder : public nn::Module<T> {
 public:
  ImageEncoder() = default;
  ImageEncoder(const ImageEncoderConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    const auto c = config.base_channels;
    convs_.emplace_back(3, c, 4, 2, 1, true, rng, 0.02);
    convs_.emplace_back(c, 2 * c, 4, 2, 1, true, rng, 0.02);
    convs_.emplace_back(2 * c, 4 * c, 4, 2, 1, true, rng, 0.02);
    region_proj_ = nn::Conv2d<T>(4 * c, config.feature_dim, 1, 1, 0, true, rng, 0.02);
    global_proj_ = nn::Linear<T>(4 * c, config.feature_dim, true, rng, 0.02);
  }

  const ImageEncoderConfig& config() const { return config_; }

  ImageFeatures<T> encode(const ag::Tensor<T>& images) const {
    FTGAN_EXPECTS(images.rank() == 4 && images.dim(1) == 3 && images.dim(2) == config_.input_size &&
                      images.dim(3) == config_.input_size,
                  "image encoder expects [B, 3, ", config_.input_size, ", ", config_.input_size, "], got ",
                  ag::to_string(images.shape()));
    ag::Tensor<T> h = images;
    for (const auto& conv : convs_) h = ag::leaky_relu(conv.forward(h), T(0.2));
    const auto g = config_.grid();
    auto pooled = h.dim(2) == g ? h : ag::adaptive_avg_pool2d(h, g, g);
    ImageFeatures<T> f;
    f.regions = ag::reshape(region_proj_.forward(pooled), {images.dim(0), config_.feature_dim, g * g});
    f.global = global_proj_.forward(ag::global_avg_pool(h));
    return f;
  }

  void collect_parameters(nn::TensorList<T>& out, const std::string& prefix) const override {
    for (std::size_t i = 0; i < convs_.size(); ++i)
      convs_[i].collect_parameters(out, nn::join_name(prefix, "conv" + std::to_string(i)));
    region_proj_.collect_parameters(out, nn::join_name(prefix, "region_proj"));
    global_proj_.collect_parameters(out, nn::join_name(prefix, "global_proj"));
  }

  void save(const std::filesystem::path& path) const {
    nn::write_archive(path, this->state(), {{"format", kImageEncoderFormat}, {"config", config_.to_json()}});
  }
  void load(const std::filesystem::path& path) {
    const auto ar = nn::read_archive(path);
    if (ar.meta.value("format", "") != kImageEncoderFormat)
      throw LoadError(path.string() + ": not an image encoder checkpoint");
    nn::load_into(ar, this->state(), path);
  }
  static ImageEncoder from_checkpoint(const std::filesystem::path& path) {
    const auto ar = nn::read_archive(path);
    if (ar.meta.value("format", "") != kImageEncoderFormat)
      throw LoadError(path.string() + ": not an image encoder checkpoint");
    Rng rng(0);
    ImageEncoder enc(ImageEncoderConfig::from_json(ar.meta.at("config")), rng);
    nn::load_into(ar, enc.state(), path);
    return enc;
  }

 private:
  ImageEncoderConfig config_;
  std::vector<nn::Conv2d<T>> convs_;
  nn::Conv2d<T> region_proj_;
  nn::Linear<T> global_proj_;
};

/// Attention-pooled word/region score of one caption against every image.
/// `words` is [1, D, L] (valid words only), `regions` [B, D, R].
/// Returns [B]: log(sum_l exp(gamma2 * cos(c_l, e_l))) / gamma2, where
/// c_l is the region context attended by word l.
template <class T>
ag::Tensor<T> caption_scores(const ag::Tensor<T>& words, const ag::Tensor<T>& regions, double gamma1,
                             double gamma2) {
  const auto b = regions.dim(0);
  auto w = b == 1 ? words : ag::repeat_batch(words, b);  // [B, D, L]
  auto attn = ag::softmax_last(ag::bmm(regions, w, true, false));  // [B, R, L], over words
  attn = ag::softmax_last(ag::scale(ag::transpose_last2(attn), static_cast<T>(gamma1)));  // [B, L, R], over regions
  auto context = ag::bmm(regions, attn, false, true);                                    // [B, D, L]
  auto sim = ag::cosine_columns(context, w);                                             // [B, L]
  return ag::scale(ag::logsumexp_last(ag::scale(sim, static_cast<T>(gamma2))), static_cast<T>(1.0 / gamma2));
}

/// Word-level score matrix S[i, j] between image i and caption j, [B_img, B_cap].
template <class T>
ag::Tensor<T> matching_scores(const WordFeatures<T>& words, const ag::Tensor<T>& regions, double gamma1,
                              double gamma2) {
  FTGAN_EXPECTS(words.e.dim(1) == regions.dim(1), "word dim ", words.e.dim(1), " != region dim ", regions.dim(1));
  std::vector<ag::Tensor<T>> cols;
  for (std::int64_t j = 0; j < words.e.dim(0); ++j) {
    const auto len = words.lengths[static_cast<std::size_t>(j)];
    FTGAN_EXPECTS(len >= 1, "caption ", j, " has no words");
    auto wj = ag::narrow(ag::narrow(words.e, 0, j, 1), 2, 0, len);
    cols.push_back(caption_scores(wj, regions, gamma1, gamma2));
  }
  return ag::stack(cols, 1);
}

template <class T>
struct DamsmLoss {
  ag::Tensor<T> total;
  double word0 = 0, word1 = 0, sentence0 = 0, sentence1 = 0;
};

/// Matching loss for a batch of paired features (pair i = image i,
/// caption i). Cross-entropy of gamma3-scaled similarity matrices in both
/// directions, at word and sentence level.
template <class T>
DamsmLoss<T> damsm_loss(const ImageFeatures<T>& image, const TextEncoding<T>& text, const DamsmConfig& cfg) {
  cfg.validate();
  const auto b = image.regions.dim(0);
  FTGAN_EXPECTS(b >= 2,
                "the matching loss needs a batch of at least 2: each pair is scored against the other pairs "
                "in the batch as negatives");
  FTGAN_EXPECTS(text.sentence.dim(0) == b, "image and caption batch sizes differ");
  std::vector<std::int64_t> labels(static_cast<std::size_t>(b));
  std::iota(labels.begin(), labels.end(), 0);
  const auto g3 = static_cast<T>(cfg.gamma3);
  auto word = ag::scale(matching_scores(text.words, image.regions, cfg.gamma1, cfg.gamma2), g3);
  auto sent = ag::scale(ag::cosine_matrix(image.global, text.sentence), g3);
  auto w0 = ag::cross_entropy(word, labels);                      // each image against all captions
  auto w1 = ag::cross_entropy(ag::transpose_last2(word), labels);  // each caption against all images
  auto s0 = ag::cross_entropy(sent, labels);
  auto s1 = ag::cross_entropy(ag::transpose_last2(sent), labels);
  DamsmLoss<T> out;
  out.word0 = w0.item();
  out.word1 = w1.item();
  out.sentence0 = s0.item();
  out.sentence1 = s1.item();
  out.total = ag::add(ag::scale(ag::add(w0, w1), static_cast<T>(cfg.word_weight)),
                      ag::scale(ag::add(s0, s1), static_cast<T>(cfg.sentence_weight)));
  return out;
}

struct PretrainOptions {
  int epochs = 200;
  std::size_t batch_size = 8;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  double text_dropout = 0.5;
  DamsmConfig damsm;
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  int checkpoint_every = 0;              // epochs; 0 = only at the end
  bool resume = false;
  std::function<void(const nlohmann::json&)> on_log;
};

struct PretrainResult {
  double initial_loss = 0;
  double final_loss = 0;
  std::vector<nlohmann::json> log;
  int epochs_run = 0;
};

/// Split `idx` into consecutive chunks of `size`; a trailing chunk of one
/// is merged into the previous chunk since the loss needs negatives.
inline std::vector<std::vector<std::size_t>> pair_batches(const std::vector<std::size_t>& idx, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < idx.size(); i += size)
    out.emplace_back(idx.begin() + i, idx.begin() + std::min(idx.size(), i + size));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  if (!out.empty() && out.back().size() < 2) out.pop_back();
  return out;
}

/// Loss over the whole train split in evaluation mode, caption 0 per
/// image, in fixed batches.
template <class T>
double evaluate_damsm(const corpus::Corpus& data, TextEncoder<T>& text, ImageEncoder<T>& image,
                      const DamsmConfig& cfg, std::size_t batch_size) {
  ag::NoGradGuard guard;
  const bool tt = text.training(), it = image.training();
  text.set_training(false);
  image.set_training(false);
  const auto idx = data.manifest().indices(corpus::Split::train);
  double total = 0;
  int batches = 0;
  for (const auto& chunk : pair_batches(idx, batch_size)) {
    auto b = data.make_batch<T>(chunk, corpus::CaptionChoice::fixed(0), {static_cast<int>(image.config().input_size)});
    total += damsm_loss(image.encode(b.images.images[0]), text.encode(b.captions), cfg).total.item();
    ++batches;
  }
  text.set_training(tt);
  image.set_training(it);
  return batches ? total / batches : 0.0;
}

template <class T>
void save_pretrain_state(const std::filesystem::path& dir, int epoch, const PretrainOptions& opt,
                         const TextEncoder<T>& text, const ImageEncoder<T>& image, const nn::Adam<T>& adam) {
  std::filesystem::create_directories(dir);
  text.save(dir / "text_encoder.bin");
  image.save(dir / "image_encoder.bin");
  nn::write_archive(dir / "damsm_optimizer.bin", adam.state_tensors(), {{"format", "ftgan-adam/1"}});
  std::ofstream(dir / "damsm_state.json") << nlohmann::json{{"epoch", epoch},
                                                           {"seed", opt.seed},
                                                           {"batch_size", opt.batch_size},
                                                           {"lr", opt.lr},
                                                           {"damsm", opt.damsm.to_json()}}
                                                 .dump(1)
                                          << "\n";
}

/// Jointly train both encoders on the matching loss. Every random draw is
/// keyed on (seed, epoch, batch), so a resumed run continues exactly where
/// the saved one stopped.
template <class T>
PretrainResult pretrain_damsm(const corpus::Corpus& data, TextEncoder<T>& text, ImageEncoder<T>& image,
                              const PretrainOptions& opt) {
  const auto train = data.manifest().indices(corpus::Split::train);
  FTGAN_EXPECTS(train.size() >= 2, "pretraining needs at least 2 training records, have ", train.size());
  FTGAN_EXPECTS(opt.batch_size >= 2, "pretraining batch size must be >= 2");
  const int scale = static_cast<int>(image.config().input_size);
  text.set_requires_grad(true);
  image.set_requires_grad(true);
  nn::Adam<T> adam({opt.lr, 0.5, 0.999, 1e-8});
  adam.add_group(text.parameters("text"), opt.lr);
  adam.add_group(image.parameters("image"), opt.lr);

  int start = 0;
  if (opt.resume && std::filesystem::exists(opt.checkpoint_dir / "damsm_state.json")) {
    std::ifstream is(opt.checkpoint_dir / "damsm_state.json");
    const auto st = nlohmann::json::parse(is);
    start = st.at("epoch");
    text.load(opt.checkpoint_dir / "text_encoder.bin");
    image.load(opt.checkpoint_dir / "image_encoder.bin");
    const auto ar = nn::read_archive(opt.checkpoint_dir / "damsm_optimizer.bin");
    adam.load_state([&](const std::string& name, std::size_t) {
      return ar.values_as<T>(name, opt.checkpoint_dir / "damsm_optimizer.bin");
    });
  }

  PretrainResult res;
  res.initial_loss = evaluate_damsm(data, text, image, opt.damsm, opt.batch_size);
  const double saved_dropout = text.config().dropout;
  text.set_dropout(opt.text_dropout);
  text.set_training(true);
  image.set_training(true);
  for (int epoch = start; epoch < opt.epochs; ++epoch) {
    auto order = train;
    Rng shuffle(derive_seed(opt.seed, static_cast<std::uint64_t>(epoch), 200));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    double sum = 0, w0 = 0, w1 = 0, s0 = 0, s1 = 0;
    int n = 0;
    for (const auto& chunk : pair_batches(order, opt.batch_size)) {
      const auto key = derive_seed(opt.seed, static_cast<std::uint64_t>(epoch), 300 + static_cast<std::uint64_t>(n));
      auto b = data.make_batch<T>(chunk, corpus::CaptionChoice::random(key), {scale});
      Rng drop(derive_seed(key, 1));
      auto loss = damsm_loss(image.encode(b.images.images[0]), text.encode(b.captions, &drop), opt.damsm);
      if (!std::isfinite(loss.total.item())) throw NanError("L_DAMSM became non-finite at epoch " + std::to_string(epoch));
      adam.zero_grad();
      ag::backward(loss.total);
      adam.step();
      sum += loss.total.item();
      w0 += loss.word0;
      w1 += loss.word1;
      s0 += loss.sentence0;
      s1 += loss.sentence1;
      ++n;
    }
    nlohmann::json line = {{"epoch", epoch + 1}, {"L_DAMSM", sum / n}, {"word0", w0 / n}, {"word1", w1 / n},
                           {"sentence0", s0 / n}, {"sentence1", s1 / n}, {"seed", opt.seed}};
    res.log.push_back(line);
    if (opt.on_log) opt.on_log(line);
    ++res.epochs_run;
    if (!opt.checkpoint_dir.empty() && opt.checkpoint_every > 0 && (epoch + 1) % opt.checkpoint_every == 0)
      save_pretrain_state(opt.checkpoint_dir, epoch + 1, opt, text, image, adam);
  }
  text.set_dropout(saved_dropout);
  if (!opt.checkpoint_dir.empty()) save_pretrain_state(opt.checkpoint_dir, std::max(start, opt.epochs), opt, text, image, adam);
  res.final_loss = evaluate_damsm(data, text, image, opt.damsm, opt.batch_size);
  return res;
}

}  // namespace ftgan
