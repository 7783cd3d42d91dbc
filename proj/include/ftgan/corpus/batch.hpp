#pragma once

// Caption/image batches and a prefetching producer.
//
// Pixel range: every ImageBatch tensor holds planar RGB in [-1, 1]
// (byte / 127.5 - 1). Each scale is an area resize of the same decoded
// source image, computed in float without re-quantization.

#include <algorithm>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "ftgan/autograd/tensor.hpp"
#include "ftgan/core/random.hpp"
#include "ftgan/corpus/manifest.hpp"

namespace ftgan::corpus {

struct CaptionBatch {
  std::vector<std::int64_t> token_ids;  // [batch x t_max], row-major
  std::vector<std::int64_t> lengths;    // [batch]
  std::int64_t t_max = 0;

  std::int64_t batch() const { return static_cast<std::int64_t>(lengths.size()); }
  std::int64_t at(std::int64_t b, std::int64_t t) const { return token_ids[static_cast<std::size_t>(b * t_max + t)]; }
  std::vector<std::int64_t> row(std::int64_t b) const {
    return {token_ids.begin() + b * t_max, token_ids.begin() + (b + 1) * t_max};
  }
  bool operator==(const CaptionBatch&) const = default;
};

/// Pack encoded captions into a batch as wide as the longest caption
/// (at least 1 column).
inline CaptionBatch pack_captions(const std::vector<EncodedCaption>& caps) {
  CaptionBatch cb;
  cb.t_max = 1;
  for (const auto& c : caps) cb.t_max = std::max(cb.t_max, c.length);
  for (const auto& c : caps) {
    cb.lengths.push_back(c.length);
    for (std::int64_t t = 0; t < cb.t_max; ++t)
      cb.token_ids.push_back(t < static_cast<std::int64_t>(c.ids.size()) ? c.ids[static_cast<std::size_t>(t)]
                                                                          : Vocabulary::kPad);
  }
  return cb;
}

inline CaptionBatch encode_captions(const Vocabulary& vocab, const std::vector<std::string>& texts,
                                    std::int64_t t_max) {
  std::vector<EncodedCaption> caps;
  for (const auto& t : texts) caps.push_back(vocab.encode(t, t_max));
  return pack_captions(caps);
}

template <class T>
struct ImageBatch {
  std::vector<int> scales;
  std::vector<ag::Tensor<T>> images;  // images[i] is [batch, 3, scales[i], scales[i]]
};

template <class T>
struct Batch {
  CaptionBatch captions;
  ImageBatch<T> images;
  std::vector<std::size_t> records;
  std::vector<int> caption_index;
};

/// Fixed caption index (evaluation) or a seed for uniform random choice
/// among each image's captions (training).
struct CaptionChoice {
  std::optional<int> index;
  std::uint64_t seed = 0;

  static CaptionChoice fixed(int i) { return {i, 0}; }
  static CaptionChoice random(std::uint64_t seed) { return {std::nullopt, seed}; }
};

/// Manifest plus vocabulary plus a cache of decoded, resized images.
/// Safe to share between producer threads.
class Corpus {
 public:
  Corpus(DatasetManifest manifest, Vocabulary vocab, std::int64_t t_max = 18)
      : manifest_(std::move(manifest)), vocab_(std::move(vocab)), t_max_(t_max) {
    FTGAN_EXPECTS(t_max_ >= 1, "T_max must be >= 1");
  }

  const DatasetManifest& manifest() const { return manifest_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  std::int64_t t_max() const { return t_max_; }
  std::size_t size() const { return manifest_.records.size(); }

  /// Planar [3, scale, scale] pixels of record `i` in [-1, 1].
  std::shared_ptr<const std::vector<float>> level(std::size_t i, int scale) const {
    FTGAN_EXPECTS(i < size(), "record index ", i, " out of range (", size(), " records)");
    FTGAN_EXPECTS(scale > 0, "scale must be positive");
    const auto key = std::make_pair(i, scale);
    {
      std::lock_guard<std::mutex> lock(cache_->mu);
      if (auto it = cache_->levels.find(key); it != cache_->levels.end()) return it->second;
    }
    auto src = source(i);
    std::shared_ptr<const std::vector<float>> out;
    if (src->first.width == scale && src->first.height == scale) {
      out = std::make_shared<const std::vector<float>>(src->second);
    } else {
      out = std::make_shared<const std::vector<float>>(
          resize_planar(src->second, 3, src->first.width, src->first.height, scale, scale));
    }
    std::lock_guard<std::mutex> lock(cache_->mu);
    return cache_->levels.emplace(key, out).first->second;
  }

  /// Build the batch for `indices`. Scales must be ascending.
  template <class T>
  Batch<T> make_batch(const std::vector<std::size_t>& indices, const CaptionChoice& choice,
                      const std::vector<int>& scales) const {
    FTGAN_EXPECTS(std::is_sorted(scales.begin(), scales.end()) &&
                      std::adjacent_find(scales.begin(), scales.end()) == scales.end(),
                  "scales must be strictly ascending");
    Batch<T> b;
    b.records = indices;
    Rng rng(choice.seed);
    std::vector<EncodedCaption> caps;
    for (auto idx : indices) {
      FTGAN_EXPECTS(idx < size(), "record index ", idx, " out of range (", size(), " records)");
      const auto& rec = manifest_.records[idx];
      int k;
      if (choice.index) {
        k = *choice.index;
        FTGAN_EXPECTS(k >= 0 && k < static_cast<int>(rec.captions.size()), "caption index ", k, " out of range");
      } else {
        k = static_cast<int>(rng.below(rec.captions.size()));
      }
      b.caption_index.push_back(k);
      caps.push_back(vocab_.encode(rec.captions[static_cast<std::size_t>(k)], t_max_));
    }
    b.captions = pack_captions(caps);
    b.images.scales = scales;
    const auto n = static_cast<std::int64_t>(indices.size());
    for (int s : scales) {
      const std::size_t per = 3 * static_cast<std::size_t>(s) * s;
      std::vector<T> data(per * indices.size());
      for (std::size_t j = 0; j < indices.size(); ++j) {
        auto lv = level(indices[j], s);
        std::copy(lv->begin(), lv->end(), data.begin() + static_cast<std::ptrdiff_t>(j * per));
      }
      b.images.images.emplace_back(ag::Shape{n, 3, s, s}, std::move(data));
    }
    return b;
  }

  /// Training batch for `step`: records drawn without replacement from the
  /// train split, captions chosen at random, all keyed on (seed, step).
  template <class T>
  Batch<T> training_batch(std::uint64_t seed, std::int64_t step, std::size_t batch_size,
                          const std::vector<int>& scales) const {
    auto pool = manifest_.indices(Split::train);
    FTGAN_EXPECTS(batch_size >= 1 && batch_size <= pool.size(), "batch size ", batch_size,
                  " must be in [1, number of training records = ", pool.size(), "]");
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(step), 100));
    for (std::size_t i = 0; i < batch_size; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    pool.resize(batch_size);
    return make_batch<T>(pool, CaptionChoice::random(derive_seed(seed, static_cast<std::uint64_t>(step), 101)),
                         scales);
  }

 private:
  using Source = std::pair<Image, std::vector<float>>;

  std::shared_ptr<const Source> source(std::size_t i) const {
    {
      std::lock_guard<std::mutex> lock(cache_->mu);
      if (auto it = cache_->sources.find(i); it != cache_->sources.end()) return it->second;
    }
    const auto& rec = manifest_.records[i];
    Image img;
    try {
      img = read_image(rec.image_path);
    } catch (const LoadError& e) {
      throw LoadError("record '" + rec.image + "': " + e.what());
    }
    auto planar = to_planar(img);
    auto src = std::make_shared<const Source>(std::move(img), std::move(planar));
    std::lock_guard<std::mutex> lock(cache_->mu);
    return cache_->sources.emplace(i, src).first->second;
  }

  DatasetManifest manifest_;
  Vocabulary vocab_;
  std::int64_t t_max_;
  struct Cache {
    std::mutex mu;
    std::map<std::size_t, std::shared_ptr<const Source>> sources;
    std::map<std::pair<std::size_t, int>, std::shared_ptr<const std::vector<float>>> levels;
  };
  std::unique_ptr<Cache> cache_ = std::make_unique<Cache>();
};

/// Produces items for consecutive steps on worker threads. Items are
/// handed out strictly in step order, so the consumer sees the same
/// sequence for any worker count as long as `produce` depends only on
/// the step. With zero workers production is synchronous.
template <class Item>
class Prefetcher {
 public:
  Prefetcher(std::function<Item(std::int64_t)> produce, std::int64_t first, int workers = 1, int depth = 4)
      : produce_(std::move(produce)), next_claim_(first), next_take_(first), depth_(std::max(depth, 1)) {
    for (int w = 0; w < workers; ++w) threads_.emplace_back([this] { run(); });
  }

  ~Prefetcher() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  Prefetcher(const Prefetcher&) = delete;
  Prefetcher& operator=(const Prefetcher&) = delete;

  Item next() {
    if (threads_.empty()) return produce_(next_take_++);
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [this] { return ready_.count(next_take_) != 0; });
    auto node = ready_.extract(next_take_++);
    cv_.notify_all();
    lock.unlock();
    auto& slot = node.mapped();
    if (slot.error) std::rethrow_exception(slot.error);
    return std::move(*slot.item);
  }

 private:
  struct Slot {
    std::optional<Item> item;
    std::exception_ptr error;
  };

  void run() {
    for (;;) {
      std::int64_t step;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [this] { return stop_ || next_claim_ < next_take_ + depth_; });
        if (stop_) return;
        step = next_claim_++;
      }
      Slot slot;
      try {
        slot.item.emplace(produce_(step));
      } catch (...) {
        slot.error = std::current_exception();
      }
      {
        std::lock_guard<std::mutex> lock(mu_);
        ready_.emplace(step, std::move(slot));
      }
      cv_.notify_all();
    }
  }

  std::function<Item(std::int64_t)> produce_;
  std::int64_t next_claim_;
  std::int64_t next_take_;
  std::int64_t depth_;
  bool stop_ = false;
  std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::int64_t, Slot> ready_;
  std::vector<std::thread> threads_;
};

}  // namespace ftgan::corpus
