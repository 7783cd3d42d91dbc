#pragma once

// Evaluation protocol: generate n images for every caption of a split,
// pair each with its ground-truth image and score the set.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "ftgan/metrics.hpp"
#include "ftgan/trainer.hpp"

namespace ftgan {

struct EvalOptions {
  corpus::Split split = corpus::Split::test;
  int n_per_caption = 10;
  std::uint64_t seed = 0;
  int is_splits = 10;
  metrics::DistanceNorm fsd_norm = metrics::DistanceNorm::l2;
  std::size_t chunk = 16;
  std::filesystem::path image_dir;  // empty: keep images in memory only
  metrics::FeatureCache* cache = nullptr;
};

struct Evaluation {
  metrics::MetricReport report;
  std::size_t captions = 0;
  std::size_t images_written = 0;
  std::vector<std::string> warnings;
};

/// File name of sample j of caption c.
inline std::string sample_file_name(std::size_t c, int j) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "c%05zu_s%03d.png", c, j);
  return buf;
}

template <class T>
Evaluation evaluate(Models<T>& m, const corpus::Corpus& data, const metrics::EmbeddingBackend& backend,
                    const EvalOptions& opt) {
  const auto records = data.manifest().indices(opt.split);
  FTGAN_EXPECTS(!records.empty(), "the ", corpus::to_string(opt.split), " split is empty");
  const int size = m.generator.config().largest_scale();

  std::vector<std::string> captions;
  std::vector<std::size_t> truth_of;  // caption -> position in `truth`
  std::vector<corpus::Image> truth;
  for (std::size_t k = 0; k < records.size(); ++k) {
    const auto& r = data.manifest().records[records[k]];
    truth.push_back(corpus::resize(corpus::read_image(r.image_path), size, size));
    for (const auto& c : r.captions) {
      captions.push_back(c);
      truth_of.push_back(k);
    }
  }

  auto set = sample(m, data.vocabulary(), captions, opt.n_per_caption, opt.seed, data.t_max(), opt.chunk);
  Evaluation ev;
  ev.captions = captions.size();
  ev.warnings = set.warnings;
  if (!opt.image_dir.empty()) std::filesystem::create_directories(opt.image_dir);

  std::vector<corpus::Image> generated, paired_truth;
  for (std::size_t c = 0; c < set.images.size(); ++c)
    for (int j = 0; j < opt.n_per_caption; ++j) {
      const auto& img = set.images[c][static_cast<std::size_t>(j)];
      if (!opt.image_dir.empty()) {
        corpus::write_png(opt.image_dir / sample_file_name(c, j), img);
        ++ev.images_written;
      }
      generated.push_back(img);
      paired_truth.push_back(truth[truth_of[c]]);
    }

  const auto fake = metrics::embed_all(backend, generated, opt.cache);
  const auto real = metrics::embed_all(backend, truth, opt.cache);
  std::vector<metrics::Vector> pairs;
  pairs.reserve(fake.size());
  for (std::size_t c = 0; c < captions.size(); ++c)
    for (int j = 0; j < opt.n_per_caption; ++j) pairs.push_back(real[truth_of[c]]);

  auto& rep = ev.report;
  rep.backend = backend.name();
  rep.n = generated.size();
  if (backend.classes() > 0 && static_cast<int>(generated.size()) >= opt.is_splits) {
    std::vector<metrics::Vector> probs;
    probs.reserve(generated.size());
    for (const auto& g : generated) probs.push_back(backend.classify(g));
    rep.inception = metrics::inception_score(probs, opt.is_splits);
  } else {
    rep.notes.push_back("inception score skipped: backend has no classifier or too few images");
  }
  if (real.size() >= 2) {
    const auto f = metrics::fid(real, fake);
    rep.fid = f.value;
    if (f.clamped) rep.notes.push_back("FID: negative roundoff total clamped to 0");
  } else {
    rep.notes.push_back("FID skipped: fewer than 2 ground-truth images");
  }
  rep.fsd = metrics::fsd(fake, pairs, opt.fsd_norm);
  const auto s = metrics::fss(fake, pairs);
  rep.fss = s.value;
  if (s.guarded > 0) rep.notes.push_back("FSS: " + std::to_string(s.guarded) + " zero embeddings epsilon-guarded");
  if (opt.fsd_norm == metrics::DistanceNorm::l1) rep.notes.push_back("FSD uses the L1 norm");
  return ev;
}

}  // namespace ftgan
