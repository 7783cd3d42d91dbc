#pragma once

// Adversarial training. One step:
//   1. encode the captions (with gradients only in fully-trained mode)
//   2. draw z and synthesize the pyramid
//   3. update each discriminator on its scale against detached fakes
//   4. recompute fake scores and update the generator side (generator,
//      plus the text encoder in fully-trained mode) on
//      sum_i L_stage_i + lambda * L_DAMSM
//
// Randomness is keyed on (seed, step), so a resumed run continues exactly.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftgan/damsm.hpp"
#include "ftgan/losses.hpp"

namespace ftgan {

enum class TrainMode { fully_trained, split };

inline std::string to_string(TrainMode m) { return m == TrainMode::fully_trained ? "fully-trained" : "split"; }
inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "fully-trained" || s == "fully_trained") return TrainMode::fully_trained;
  if (s == "split") return TrainMode::split;
  throw ValidationError("unknown training mode '" + s + "' (expected fully-trained or split)");
}

struct TrainConfig {
  TrainMode mode = TrainMode::fully_trained;
  double lambda = 5.0;
  double lr_g = 2e-4;
  double lr_d = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double text_lr_mult = 1.0;
  std::size_t batch_size = 8;
  std::int64_t max_steps = 2000;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_interval = 0;  // 0: only the final checkpoint
  bool mismatched_pairs = false;         // extra real-image/wrong-caption term in L_D
  bool unfreeze_image_encoder = false;
  DamsmConfig damsm;

  void validate() const {
    FTGAN_EXPECTS(lambda >= 0, "lambda must be nonnegative");
    FTGAN_EXPECTS(lr_g > 0 && lr_d > 0 && text_lr_mult >= 0, "learning rates must be positive");
    FTGAN_EXPECTS(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "Adam betas must be in [0, 1)");
    FTGAN_EXPECTS(batch_size >= 2, "batch size must be >= 2 (the matching loss contrasts pairs), got ", batch_size);
    FTGAN_EXPECTS(max_steps >= 0 && checkpoint_interval >= 0, "step counts must be nonnegative");
    damsm.validate();
  }

  nlohmann::json to_json() const {
    return {{"mode", to_string(mode)},
            {"lambda", lambda},
            {"optimizer", {{"type", "adam"}, {"lr_g", lr_g}, {"lr_d", lr_d}, {"beta1", beta1}, {"beta2", beta2}}},
            {"text_lr_mult", text_lr_mult},
            {"batch_size", batch_size},
            {"max_steps", max_steps},
            {"seed", seed},
            {"checkpoint_interval", checkpoint_interval},
            {"mismatched_pairs", mismatched_pairs},
            {"unfreeze_image_encoder", unfreeze_image_encoder},
            {"damsm", damsm.to_json()}};
  }
  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.mode = parse_train_mode(j.value("mode", to_string(c.mode)));
    c.lambda = j.value("lambda", c.lambda);
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      if (o.value("type", std::string("adam")) != "adam")
        throw ValidationError("only the adam optimizer is supported, got '" + o.value("type", std::string()) + "'");
      c.lr_g = o.value("lr_g", c.lr_g);
      c.lr_d = o.value("lr_d", c.lr_d);
      c.beta1 = o.value("beta1", c.beta1);
      c.beta2 = o.value("beta2", c.beta2);
    }
    c.text_lr_mult = j.value("text_lr_mult", c.text_lr_mult);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.mismatched_pairs = j.value("mismatched_pairs", c.mismatched_pairs);
    c.unfreeze_image_encoder = j.value("unfreeze_image_encoder", c.unfreeze_image_encoder);
    if (j.contains("damsm")) c.damsm = DamsmConfig::from_json(j.at("damsm"));
    return c;
  }
};

/// Architecture of every network in a run.
struct ModelConfig {
  TextEncoderConfig text;
  ImageEncoderConfig image;
  GeneratorConfig generator;
  std::int64_t disc_channels = 16;
  std::int64_t disc_cond_channels = 32;
  bool spectral_norm = false;

  /// Small CPU configuration at scales 16/32/64.
  static ModelConfig desk(std::int64_t vocab_size) {
    ModelConfig c;
    c.text = {vocab_size, 32, 16, 0.0};
    c.image = {64, 32, 8};
    c.generator.base_channels = 16;
    c.generator.text_dim = 32;
    c.generator.z_dim = 32;
    c.disc_channels = 16;
    c.disc_cond_channels = 16;
    return c;
  }

  /// Full-resolution configuration at scales 64/128/256.
  static ModelConfig full_scale(std::int64_t vocab_size) {
    ModelConfig c;
    c.text = {vocab_size, 300, 128, 0.0};
    c.image = {256, 256, 32};
    c.generator = GeneratorConfig::full_scale();
    c.disc_channels = 64;
    c.disc_cond_channels = 32;
    return c;
  }

  std::vector<DiscriminatorConfig> discriminators() const {
    std::vector<DiscriminatorConfig> out;
    for (int s : generator.stage_scales)
      out.push_back({s, disc_channels, generator.text_dim, disc_cond_channels, spectral_norm});
    return out;
  }

  void validate() const {
    text.validate();
    image.validate();
    generator.validate();
    FTGAN_EXPECTS(generator.text_dim == text.feature_dim(), "generator text_dim ", generator.text_dim,
                  " != text encoder feature dim ", text.feature_dim());
    FTGAN_EXPECTS(image.feature_dim == text.feature_dim(), "image encoder feature_dim ", image.feature_dim,
                  " != text encoder feature dim ", text.feature_dim());
    FTGAN_EXPECTS(image.input_size == generator.largest_scale(), "image encoder input size ", image.input_size,
                  " != largest stage scale ", generator.largest_scale());
    for (const auto& d : discriminators()) d.validate();
  }

  nlohmann::json to_json() const {
    return {{"text_encoder", text.to_json()},
            {"image_encoder", image.to_json()},
            {"generator", generator.to_json()},
            {"discriminator", {{"base_channels", disc_channels},
                               {"cond_channels", disc_cond_channels},
                               {"spectral_norm", spectral_norm}}}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.text = TextEncoderConfig::from_json(j.at("text_encoder"));
    c.image = ImageEncoderConfig::from_json(j.at("image_encoder"));
    c.generator = GeneratorConfig::from_json(j.at("generator"));
    if (j.contains("discriminator")) {
      const auto& d = j.at("discriminator");
      c.disc_channels = d.value("base_channels", c.disc_channels);
      c.disc_cond_channels = d.value("cond_channels", c.disc_cond_channels);
      c.spectral_norm = d.value("spectral_norm", c.spectral_norm);
    }
    return c;
  }
};

template <class T>
struct Models {
  ModelConfig config;
  TextEncoder<T> text;
  ImageEncoder<T> image;
  Generator<T> generator;
  std::vector<Discriminator<T>> discriminators;

  /// Fresh networks. Each network draws from its own stream of `seed`.
  static Models create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Models m;
    m.config = cfg;
    Rng rt(derive_seed(seed, 0, 1)), ri(derive_seed(seed, 0, 2)), rg(derive_seed(seed, 0, 3));
    m.text = TextEncoder<T>(cfg.text, rt);
    m.image = ImageEncoder<T>(cfg.image, ri);
    m.generator = Generator<T>(cfg.generator, rg);
    const auto dcs = cfg.discriminators();
    for (std::size_t i = 0; i < dcs.size(); ++i) {
      Rng rd(derive_seed(seed, i, 4));
      m.discriminators.emplace_back(dcs[i], rd);
    }
    return m;
  }

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    text.save(dir / "text_encoder.bin");
    image.save(dir / "image_encoder.bin");
    generator.save(dir / "generator.bin");
    for (std::size_t i = 0; i < discriminators.size(); ++i)
      discriminators[i].save(dir / ("discriminator" + std::to_string(i) + ".bin"));
  }

  void load(const std::filesystem::path& dir) {
    text.load(dir / "text_encoder.bin");
    image.load(dir / "image_encoder.bin");
    generator.load(dir / "generator.bin");
    for (std::size_t i = 0; i < discriminators.size(); ++i)
      discriminators[i].load(dir / ("discriminator" + std::to_string(i) + ".bin"));
  }
};

inline constexpr const char* kCheckpointFormat = "ftgan-checkpoint/1";

inline void check_finite(double v, const std::string& name, std::int64_t step) {
  if (!std::isfinite(v)) throw NanError(name + " is " + (std::isnan(v) ? "NaN" : "infinite") + " at step " +
                                        std::to_string(step));
}

template <class T>
class Trainer {
 public:
  Trainer(const TrainConfig& config, Models<T> models) : config_(config), m_(std::move(models)) {
    config_.validate();
    m_.config.validate();
    const nn::AdamOptions opt{config_.lr_g, config_.beta1, config_.beta2, 1e-8};
    m_.text.set_dropout(0.0);
    m_.text.set_training(true);
    m_.generator.set_training(true);
    m_.image.set_training(false);
    const bool joint = config_.mode == TrainMode::fully_trained;
    m_.text.set_requires_grad(joint);
    m_.image.set_requires_grad(config_.unfreeze_image_encoder);
    adam_g_ = nn::Adam<T>(opt);
    adam_g_.add_group(m_.generator.parameters("generator"), config_.lr_g);
    if (joint) adam_g_.add_group(m_.text.parameters("text_encoder"), config_.lr_g * config_.text_lr_mult);
    if (config_.unfreeze_image_encoder) adam_g_.add_group(m_.image.parameters("image_encoder"), config_.lr_g);
    for (auto& d : m_.discriminators) {
      d.set_training(true);
      d.set_requires_grad(true);
      adam_d_.emplace_back(nn::AdamOptions{config_.lr_d, config_.beta1, config_.beta2, 1e-8});
      adam_d_.back().add_group(d.parameters("discriminator"), config_.lr_d);
    }
  }

  const TrainConfig& config() const { return config_; }
  Models<T>& models() { return m_; }
  const Models<T>& models() const { return m_; }
  std::int64_t step_count() const { return step_; }
  const nn::Adam<T>& generator_optimizer() const { return adam_g_; }
  const std::vector<int>& scales() const { return m_.config.generator.stage_scales; }

  /// Training batch for the next step.
  corpus::Batch<T> next_batch(const corpus::Corpus& data) const {
    return data.training_batch<T>(config_.seed, step_, config_.batch_size, scales());
  }

  /// Steps (1) and (2): text encoding and the generated pyramid.
  struct Forward {
    TextEncoding<T> text;
    ag::Tensor<T> z;
    GeneratorOutput<T> fake;
    ag::Tensor<T> sentence_fixed;  // detached C for the discriminators
  };

  Forward forward(const corpus::Batch<T>& batch) {
    const auto& gc = m_.config.generator;
    const auto stages = static_cast<std::size_t>(gc.stages());
    FTGAN_EXPECTS(batch.images.images.size() == stages, "batch has ", batch.images.images.size(),
                  " scales, generator has ", stages, " stages");
    for (std::size_t i = 0; i < stages; ++i)
      FTGAN_EXPECTS(batch.images.scales[i] == gc.stage_scales[i], "batch scale ", batch.images.scales[i],
                    " != stage scale ", gc.stage_scales[i]);
    const auto k = static_cast<std::uint64_t>(step_);
    Forward f;
    f.text = m_.text.encode(batch.captions);
    Rng zr(derive_seed(config_.seed, k, 102)), car(derive_seed(config_.seed, k, 103));
    f.z = sample_noise<T>(batch.captions.batch(), gc.z_dim, zr);
    f.fake = m_.generator.synthesize(f.text.sentence, f.z, f.text.words, &car);
    f.sentence_fixed = f.text.sentence.detach();
    return f;
  }

  /// Step (3) for discriminator i. Returns L_D_i.
  double update_discriminator(std::size_t i, const corpus::Batch<T>& batch, const Forward& f) {
    auto& d = m_.discriminators.at(i);
    const auto& real = batch.images.images[i];
    auto real_out = d.forward(real, f.sentence_fixed);
    auto fake_out = d.forward(f.fake.images[i].detach(), f.sentence_fixed);
    ag::Tensor<T> loss;
    if (config_.mismatched_pairs) {
      auto wrong = d.forward(real, roll_rows(f.sentence_fixed)).cond;
      loss = discriminator_loss(real_out, fake_out, &wrong);
    } else {
      loss = discriminator_loss(real_out, fake_out);
    }
    const double v = static_cast<double>(loss.item());
    check_finite(v, "L_D_" + std::to_string(i), step_ + 1);
    adam_d_[i].zero_grad();
    ag::backward(loss);
    adam_d_[i].step();
    adam_d_[i].zero_grad();
    return v;
  }

  /// Step (4). Fills the generator-side fields of `rep`.
  void update_generator(const Forward& f, LossReport& rep) {
    const std::int64_t reported = step_ + 1;
    rep.stage.clear();
    for (auto& d : m_.discriminators) d.set_requires_grad(false);
    ag::Tensor<T> total;
    for (std::size_t i = 0; i < f.fake.images.size(); ++i) {
      auto l = generator_stage_loss(m_.discriminators[i].forward(f.fake.images[i], f.text.sentence));
      rep.stage.push_back(static_cast<double>(l.item()));
      check_finite(rep.stage.back(), "L_stage_" + std::to_string(i), reported);
      total = total.defined() ? ag::add(total, l) : l;
    }
    for (auto& d : m_.discriminators) d.set_requires_grad(true);
    auto feats = m_.image.encode(f.fake.images.back());
    auto dm = damsm_loss(feats, f.text, config_.damsm);
    rep.damsm = static_cast<double>(dm.total.item());
    check_finite(rep.damsm, "L_DAMSM", reported);
    total = ag::add(total, ag::scale(dm.total, static_cast<T>(config_.lambda)));
    rep.kl = 0;
    if (f.fake.kl.defined()) {
      rep.kl = static_cast<double>(f.fake.kl.item());
      check_finite(rep.kl, "KL", reported);
      total = ag::add(total, f.fake.kl);
    }
    rep.lambda = config_.lambda;
    rep.generator = rep.recompute_generator();
    check_finite(static_cast<double>(total.item()), "L_G", reported);
    adam_g_.zero_grad();
    ag::backward(total);
    rep.text_grad_norm = nn::grad_norm(m_.text.parameters());
    check_finite(rep.text_grad_norm, "text encoder gradient", reported);
    adam_g_.step();
    adam_g_.zero_grad();
  }

  LossReport step(const corpus::Batch<T>& batch) {
    LossReport rep;
    rep.step = step_ + 1;
    rep.seed = config_.seed;
    auto f = forward(batch);
    for (std::size_t i = 0; i < m_.discriminators.size(); ++i)
      rep.discriminator.push_back(update_discriminator(i, batch, f));
    update_generator(f, rep);
    ++step_;
    return rep;
  }

  /// Write the full training state into `dir`.
  void save(const std::filesystem::path& dir) const {
    m_.save(dir);
    nn::write_archive(dir / "optimizer_g.bin", adam_g_.state_tensors(), {{"format", "ftgan-adam/1"}});
    for (std::size_t i = 0; i < adam_d_.size(); ++i)
      nn::write_archive(dir / ("optimizer_d" + std::to_string(i) + ".bin"), adam_d_[i].state_tensors(),
                        {{"format", "ftgan-adam/1"}});
    const nlohmann::json st{{"format", kCheckpointFormat},
                            {"step", step_},
                            {"seed", config_.seed},
                            {"train", config_.to_json()},
                            {"model", m_.config.to_json()}};
    const auto tmp = dir / "state.json.tmp";
    {
      std::ofstream os(tmp);
      if (!os) throw Error("cannot write " + tmp.string());
      os << st.dump(1) << "\n";
    }
    std::filesystem::rename(tmp, dir / "state.json");
  }

  /// Restore a state written by save(). Architecture comes from the
  /// checkpoint; the training config may be overridden.
  static Trainer resume(const std::filesystem::path& dir, const std::optional<TrainConfig>& override_config = {}) {
    const auto st = read_state(dir);
    const auto mc = ModelConfig::from_json(st.at("model"));
    auto tc = override_config ? *override_config : TrainConfig::from_json(st.at("train"));
    auto models = Models<T>::create(mc, tc.seed);
    models.load(dir);
    Trainer tr(tc, std::move(models));
    tr.step_ = st.at("step");
    load_adam(tr.adam_g_, dir / "optimizer_g.bin");
    for (std::size_t i = 0; i < tr.adam_d_.size(); ++i)
      load_adam(tr.adam_d_[i], dir / ("optimizer_d" + std::to_string(i) + ".bin"));
    return tr;
  }

  static nlohmann::json read_state(const std::filesystem::path& dir) {
    const auto p = dir / "state.json";
    std::ifstream is(p);
    if (!is) throw LoadError(p.string() + ": no training checkpoint here");
    nlohmann::json st;
    try {
      st = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(p.string() + ": " + e.what());
    }
    if (st.value("format", "") != kCheckpointFormat) throw LoadError(p.string() + ": unknown checkpoint format");
    return st;
  }

 private:
  static ag::Tensor<T> roll_rows(const ag::Tensor<T>& x) {
    const auto n = x.dim(0);
    return ag::concat<T>({ag::narrow(x, 0, 1, n - 1), ag::narrow(x, 0, 0, 1)}, 0);
  }

  static void load_adam(nn::Adam<T>& adam, const std::filesystem::path& path) {
    const auto ar = nn::read_archive(path);
    adam.load_state([&](const std::string& name, std::size_t) { return ar.values_as<T>(name, path); });
  }

  TrainConfig config_;
  Models<T> m_;
  nn::Adam<T> adam_g_;
  std::vector<nn::Adam<T>> adam_d_;
  std::int64_t step_ = 0;
};

struct TrainOptions {
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::filesystem::path log_path;        // JSON lines; appended to
  int prefetch_workers = 0;
  std::function<void(const LossReport&)> on_step;
};

/// Run until config.max_steps steps have completed, starting wherever the
/// trainer currently is. Checkpoints go to checkpoint_dir every
/// checkpoint_interval steps and at the end.
template <class T>
std::vector<LossReport> train(Trainer<T>& trainer, const corpus::Corpus& data, const TrainOptions& opt = {}) {
  const auto& cfg = trainer.config();
  FTGAN_EXPECTS(!data.manifest().indices(corpus::Split::train).empty(), "training split is empty");
  std::ofstream log;
  if (!opt.log_path.empty()) {
    if (opt.log_path.has_parent_path()) std::filesystem::create_directories(opt.log_path.parent_path());
    log.open(opt.log_path, std::ios::app);
    if (!log) throw Error("cannot open training log " + opt.log_path.string());
  }
  std::vector<LossReport> reports;
  const auto first = trainer.step_count();
  if (first < cfg.max_steps) {
    const auto seed = cfg.seed;
    const auto bs = cfg.batch_size;
    const auto scales = trainer.scales();
    corpus::Prefetcher<corpus::Batch<T>> batches(
        [&data, seed, bs, scales](std::int64_t s) { return data.training_batch<T>(seed, s, bs, scales); }, first,
        opt.prefetch_workers);
    for (auto s = first; s < cfg.max_steps; ++s) {
      auto rep = trainer.step(batches.next());
      if (log) log << rep.to_json().dump() << "\n" << std::flush;
      if (opt.on_step) opt.on_step(rep);
      reports.push_back(std::move(rep));
      if (!opt.checkpoint_dir.empty() && cfg.checkpoint_interval > 0 && trainer.step_count() % cfg.checkpoint_interval == 0)
        trainer.save(opt.checkpoint_dir);
    }
  }
  if (!opt.checkpoint_dir.empty()) trainer.save(opt.checkpoint_dir);
  return reports;
}

// ---------------------------------------------------------------------------
// Sampling

template <class T>
struct SampleSet {
  std::vector<std::string> captions;
  std::vector<corpus::EncodedCaption> encoded;
  std::vector<std::vector<corpus::Image>> images;  // [caption][sample], largest scale
  std::vector<std::vector<AttentionMaps<T>>> attention;  // [caption][attended stage], sample 0
  std::vector<std::string> warnings;
};

/// Generate `n_per_caption` images per caption. Sample j of caption c
/// uses noise keyed on (seed, c, j) and the networks in eval mode, so
/// every image is independent of how the work is batched.
template <class T>
SampleSet<T> sample(Models<T>& m, const corpus::Vocabulary& vocab, const std::vector<std::string>& captions,
                    int n_per_caption, std::uint64_t seed, std::int64_t t_max = 18, std::size_t chunk = 16) {
  FTGAN_EXPECTS(n_per_caption >= 1, "n_per_caption must be >= 1");
  ag::NoGradGuard guard;
  const bool tt = m.text.training(), gt = m.generator.training();
  m.text.set_training(false);
  m.generator.set_training(false);
  SampleSet<T> out;
  const auto& gc = m.generator.config();
  const int size = gc.largest_scale();
  for (std::size_t c = 0; c < captions.size(); ++c) {
    auto enc = vocab.encode(captions[c], t_max);
    bool any_known = false;
    for (std::int64_t t = 0; t < enc.length; ++t)
      any_known |= enc.ids[static_cast<std::size_t>(t)] != corpus::Vocabulary::kUnknown;
    if (!any_known)
      out.warnings.push_back("caption " + std::to_string(c) + " (\"" + captions[c] +
                             "\") has no in-vocabulary words; using the all-unknown encoding");
    out.captions.push_back(captions[c]);
    out.encoded.push_back(enc);
    out.images.emplace_back();
    out.attention.emplace_back();
    for (int j0 = 0; j0 < n_per_caption; j0 += static_cast<int>(chunk)) {
      const int nb = std::min<int>(static_cast<int>(chunk), n_per_caption - j0);
      auto cb = corpus::pack_captions(std::vector<corpus::EncodedCaption>(static_cast<std::size_t>(nb), enc));
      auto text = m.text.encode(cb);
      std::vector<T> zv;
      for (int j = j0; j < j0 + nb; ++j) {
        Rng r(derive_seed(derive_seed(seed, c, 104), static_cast<std::uint64_t>(j)));
        auto zj = sample_noise<T>(1, gc.z_dim, r);
        zv.insert(zv.end(), zj.values().begin(), zj.values().end());
      }
      Rng car(derive_seed(seed, c, 105));
      auto g = m.generator.synthesize(text.sentence, ag::Tensor<T>({nb, gc.z_dim}, std::move(zv)), text.words, &car);
      const auto& img = g.images.back().values();
      const std::size_t per = 3 * static_cast<std::size_t>(size) * size;
      for (int j = 0; j < nb; ++j) out.images.back().push_back(corpus::from_planar(img.data() + j * per, size, size));
      if (j0 == 0)
        for (auto& a : g.attention) {
          // Keep sample 0 only.
          AttentionMaps<T> one = a;
          one.batch = 1;
          one.lengths.resize(1);
          one.values.resize(static_cast<std::size_t>(a.words * a.height * a.width));
          out.attention.back().push_back(std::move(one));
        }
    }
  }
  m.text.set_training(tt);
  m.generator.set_training(gt);
  return out;
}

/// Attention grid for one caption: one row per valid word; each row holds
/// the generated image followed by its attention map at every attended
/// stage, shown as the image modulated by the normalized map.
template <class T>
corpus::Image attention_grid(const corpus::Image& image, const std::vector<AttentionMaps<T>>& maps,
                             std::int64_t words) {
  std::vector<corpus::Image> tiles;
  const int s = image.width;
  for (std::int64_t t = 0; t < words; ++t) {
    tiles.push_back(image);
    for (const auto& a : maps) {
      std::vector<float> m(static_cast<std::size_t>(a.height * a.width));
      for (std::int64_t y = 0; y < a.height; ++y)
        for (std::int64_t x = 0; x < a.width; ++x) m[y * a.width + x] = static_cast<float>(a.at(0, t, y, x));
      auto up = corpus::resize_planar(m, 1, static_cast<int>(a.width), static_cast<int>(a.height), s, s);
      const float hi = *std::max_element(up.begin(), up.end());
      corpus::Image tile = image;
      for (int p = 0; p < s * s; ++p) {
        const float w = hi > 0 ? up[p] / hi : 0.f;
        for (int ch = 0; ch < 3; ++ch) {
          auto& v = tile.rgb[static_cast<std::size_t>(p) * 3 + ch];
          v = static_cast<std::uint8_t>(std::lround(v * (0.15f + 0.85f * w)));
        }
      }
      tiles.push_back(std::move(tile));
    }
  }
  return corpus::tile(tiles, static_cast<int>(1 + maps.size()));
}

}  // namespace ftgan
