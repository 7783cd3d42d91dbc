#pragma once

// Bidirectional LSTM caption encoder. Produces per-word features
// e [B, D, T] (forward and backward hidden states concatenated per word)
// and a sentence vector C [B, D] (final forward state, final backward
// state). Pad positions never touch the recurrent state.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftgan/autograd/ops.hpp"
#include "ftgan/corpus/batch.hpp"
#include "ftgan/nn/archive.hpp"
#include "ftgan/nn/layers.hpp"

namespace ftgan {

struct TextEncoderConfig {
  std::int64_t vocab_size = 0;
  std::int64_t embed_dim = 300;
  std::int64_t hidden_per_direction = 128;
  double dropout = 0.0;

  std::int64_t feature_dim() const { return 2 * hidden_per_direction; }

  void validate() const {
    FTGAN_EXPECTS(vocab_size > corpus::Vocabulary::kEnd, "text encoder vocab_size must cover the special ids, got ",
                  vocab_size);
    FTGAN_EXPECTS(embed_dim > 0 && hidden_per_direction > 0, "text encoder dims must be positive");
    FTGAN_EXPECTS(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size},
            {"embed_dim", embed_dim},
            {"hidden_per_direction", hidden_per_direction},
            {"D", feature_dim()},
            {"dropout", dropout}};
  }
  static TextEncoderConfig from_json(const nlohmann::json& j) {
    TextEncoderConfig c;
    c.vocab_size = j.at("vocab_size");
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.hidden_per_direction = j.value("hidden_per_direction", c.hidden_per_direction);
    c.dropout = j.value("dropout", c.dropout);
    return c;
  }
};

template <class T>
struct WordFeatures {
  ag::Tensor<T> e;                    // [B, D, T]; pad columns are zero
  std::vector<std::int64_t> lengths;  // valid words per caption
  std::int64_t t_max = 0;

  bool valid(std::int64_t b, std::int64_t t) const { return t < lengths[static_cast<std::size_t>(b)]; }
  std::vector<std::uint8_t> valid_mask() const {
    std::vector<std::uint8_t> m;
    for (auto len : lengths)
      for (std::int64_t t = 0; t < t_max; ++t) m.push_back(t < len ? 1 : 0);
    return m;
  }
};

template <class T>
struct TextEncoding {
  WordFeatures<T> words;
  ag::Tensor<T> sentence;  // C [B, D]
};

template <class T>
class LSTMDirection : public nn::Module<T> {
 public:
  LSTMDirection() = default;
  LSTMDirection(std::int64_t input, std::int64_t hidden, Rng& rng) : hidden_(hidden) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    auto uni = [&](ag::Shape s) {
      std::vector<T> v(static_cast<std::size_t>(ag::numel(s)));
      for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
      return ag::Tensor<T>(std::move(s), std::move(v), true);
    };
    w_ih_ = uni({4 * hidden, input});
    w_hh_ = uni({4 * hidden, hidden});
    bias_ = uni({4 * hidden});
  }

  /// `x_proj` is the precomputed input projection [T*B, 4H] in time-major
  /// order. Returns the per-step hidden states (zero at pad steps) and
  /// the final state.
  std::pair<std::vector<ag::Tensor<T>>, ag::Tensor<T>> run(const ag::Tensor<T>& x_proj,
                                                          const std::vector<std::int64_t>& lengths,
                                                          std::int64_t steps, bool reverse) const {
    const auto batch = static_cast<std::int64_t>(lengths.size());
    const auto zeros = ag::Tensor<T>::zeros({batch, hidden_});
    ag::Tensor<T> h = zeros, c = zeros;
    std::vector<ag::Tensor<T>> outputs(static_cast<std::size_t>(steps));
    for (std::int64_t k = 0; k < steps; ++k) {
      const std::int64_t t = reverse ? steps - 1 - k : k;
      std::vector<std::uint8_t> keep(static_cast<std::size_t>(batch));
      bool any = false;
      for (std::int64_t b = 0; b < batch; ++b) any |= (keep[b] = t < lengths[b] ? 1 : 0) != 0;
      if (!any) {
        outputs[t] = zeros;
        continue;
      }
      auto gates = ag::add(ag::narrow(x_proj, 0, t * batch, batch), ag::matmul(h, w_hh_, false, true));
      auto i = ag::sigmoid(ag::narrow(gates, 1, 0, hidden_));
      auto f = ag::sigmoid(ag::narrow(gates, 1, hidden_, hidden_));
      auto g = ag::tanh(ag::narrow(gates, 1, 2 * hidden_, hidden_));
      auto o = ag::sigmoid(ag::narrow(gates, 1, 3 * hidden_, hidden_));
      auto c_new = ag::add(ag::mul(f, c), ag::mul(i, g));
      auto h_new = ag::mul(o, ag::tanh(c_new));
      c = ag::select_rows(keep, c_new, c);
      h = ag::select_rows(keep, h_new, h);
      outputs[t] = ag::select_rows(keep, h_new, zeros);
    }
    return {std::move(outputs), h};
  }

  ag::Tensor<T> project(const ag::Tensor<T>& x) const { return ag::linear(x, w_ih_, bias_); }

  void collect_parameters(nn::TensorList<T>& out, const std::string& prefix) const override {
    out.push_back({nn::join_name(prefix, "w_ih"), w_ih_});
    out.push_back({nn::join_name(prefix, "w_hh"), w_hh_});
    out.push_back({nn::join_name(prefix, "bias"), bias_});
  }

 private:
  std::int64_t hidden_ = 0;
  ag::Tensor<T> w_ih_, w_hh_, bias_;
};

inline constexpr const char* kTextEncoderFormat = "ftgan-text-encoder/1";

template <class T>
class TextEncoder : public nn::Module<T> {
 public:
  TextEncoder() = default;
  TextEncoder(const TextEncoderConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    embedding_ = nn::Embedding<T>(config.vocab_size, config.embed_dim, rng);
    forward_ = LSTMDirection<T>(config.embed_dim, config.hidden_per_direction, rng);
    backward_ = LSTMDirection<T>(config.embed_dim, config.hidden_per_direction, rng);
  }

  const TextEncoderConfig& config() const { return config_; }
  void set_dropout(double rate) {
    FTGAN_EXPECTS(rate >= 0.0 && rate < 1.0, "dropout must be in [0, 1)");
    config_.dropout = rate;
  }

  /// `rng` drives embedding dropout and is only used in training mode
  /// with a nonzero dropout rate.
  TextEncoding<T> encode(const corpus::CaptionBatch& batch, Rng* rng = nullptr) const {
    const std::int64_t b = batch.batch(), steps = batch.t_max;
    FTGAN_EXPECTS(b >= 1 && steps >= 1, "empty caption batch");
    FTGAN_EXPECTS(static_cast<std::int64_t>(batch.token_ids.size()) == b * steps, "caption batch size mismatch");
    for (auto len : batch.lengths) FTGAN_EXPECTS(len >= 0 && len <= steps, "caption length ", len, " exceeds T_max");
    // Time-major ids so each step is a contiguous row block.
    std::vector<std::int64_t> ids(static_cast<std::size_t>(b * steps));
    for (std::int64_t t = 0; t < steps; ++t)
      for (std::int64_t i = 0; i < b; ++i) {
        const auto id = batch.at(i, t);
        FTGAN_EXPECTS(id >= 0 && id < config_.vocab_size, "token id ", id, " outside vocabulary of size ",
                      config_.vocab_size);
        ids[t * b + i] = id;
      }
    auto x = embedding_.forward(ids);
    if (this->training() && config_.dropout > 0) {
      FTGAN_EXPECTS(rng != nullptr, "dropout needs a random source");
      x = ag::dropout(x, config_.dropout, *rng);
    }
    auto [fw, fw_last] = forward_.run(forward_.project(x), batch.lengths, steps, false);
    auto [bw, bw_last] = backward_.run(backward_.project(x), batch.lengths, steps, true);
    std::vector<ag::Tensor<T>> cols;
    cols.reserve(static_cast<std::size_t>(steps));
    for (std::int64_t t = 0; t < steps; ++t) cols.push_back(ag::concat<T>({fw[t], bw[t]}, 1));
    TextEncoding<T> out;
    out.words.e = ag::stack(cols, 2);
    out.words.lengths = batch.lengths;
    out.words.t_max = steps;
    out.sentence = ag::concat<T>({fw_last, bw_last}, 1);
    return out;
  }

  void collect_parameters(nn::TensorList<T>& out, const std::string& prefix) const override {
    embedding_.collect_parameters(out, nn::join_name(prefix, "embedding"));
    forward_.collect_parameters(out, nn::join_name(prefix, "lstm_fw"));
    backward_.collect_parameters(out, nn::join_name(prefix, "lstm_bw"));
  }

  nn::Embedding<T>& embedding() { return embedding_; }

  void save(const std::filesystem::path& path) const {
    nn::write_archive(path, this->state(), {{"format", kTextEncoderFormat}, {"config", config_.to_json()}});
  }

  /// Load parameters into this encoder. Dimension mismatches raise a
  /// LoadError listing expected and found shapes.
  void load(const std::filesystem::path& path) {
    const auto ar = nn::read_archive(path);
    if (ar.meta.value("format", "") != kTextEncoderFormat)
      throw LoadError(path.string() + ": not a text encoder checkpoint");
    nn::load_into(ar, this->state(), path);
  }

  /// Construct from a checkpoint using the stored config.
  static TextEncoder from_checkpoint(const std::filesystem::path& path) {
    const auto ar = nn::read_archive(path);
    if (ar.meta.value("format", "") != kTextEncoderFormat)
      throw LoadError(path.string() + ": not a text encoder checkpoint");
    Rng rng(0);
    TextEncoder enc(TextEncoderConfig::from_json(ar.meta.at("config")), rng);
    nn::load_into(ar, enc.state(), path);
    return enc;
  }

 private:
  TextEncoderConfig config_;
  nn::Embedding<T> embedding_;
  LSTMDirection<T> forward_, backward_;
};

}  // namespace ftgan
