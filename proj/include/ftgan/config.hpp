#pragma once

// Fully resolved run configuration: defaults, then a config file, then
// command-line overrides, merged as JSON merge patches.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "ftgan/metrics.hpp"
#include "ftgan/trainer.hpp"

namespace ftgan {

struct CorpusConfig {
  int min_freq = 1;
  std::int64_t t_max = 18;
  std::size_t prefetch_workers = 0;

  nlohmann::json to_json() const {
    return {{"min_freq", min_freq}, {"t_max", t_max}, {"prefetch_workers", prefetch_workers}};
  }
  static CorpusConfig from_json(const nlohmann::json& j) {
    CorpusConfig c;
    c.min_freq = j.value("min_freq", c.min_freq);
    c.t_max = j.value("t_max", c.t_max);
    c.prefetch_workers = j.value("prefetch_workers", c.prefetch_workers);
    return c;
  }
};

struct PretrainConfig {
  int epochs = 200;
  std::size_t batch_size = 8;
  double lr = 2e-3;
  double text_dropout = 0.5;
  DamsmConfig damsm;

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"lr", lr},
            {"text_dropout", text_dropout},
            {"damsm", damsm.to_json()}};
  }
  static PretrainConfig from_json(const nlohmann::json& j) {
    PretrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.text_dropout = j.value("text_dropout", c.text_dropout);
    if (j.contains("damsm")) c.damsm = DamsmConfig::from_json(j.at("damsm"));
    return c;
  }
};

struct MetricsConfig {
  std::string backend = "toy";
  int n_per_caption = 10;
  int is_splits = 10;
  metrics::DistanceNorm fsd_norm = metrics::DistanceNorm::l2;
  std::size_t sample_chunk = 16;

  nlohmann::json to_json() const {
    return {{"backend", backend},
            {"n_per_caption", n_per_caption},
            {"is_splits", is_splits},
            {"fsd_norm", fsd_norm == metrics::DistanceNorm::l2 ? "l2" : "l1"},
            {"sample_chunk", sample_chunk}};
  }
  static MetricsConfig from_json(const nlohmann::json& j) {
    MetricsConfig c;
    c.backend = j.value("backend", c.backend);
    c.n_per_caption = j.value("n_per_caption", c.n_per_caption);
    c.is_splits = j.value("is_splits", c.is_splits);
    const auto norm = j.value("fsd_norm", std::string("l2"));
    if (norm != "l2" && norm != "l1") throw ValidationError("fsd_norm must be l2 or l1, got '" + norm + "'");
    c.fsd_norm = norm == "l2" ? metrics::DistanceNorm::l2 : metrics::DistanceNorm::l1;
    c.sample_chunk = j.value("sample_chunk", c.sample_chunk);
    return c;
  }
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir;
  std::string data_dir;  // prepared dataset directory
  CorpusConfig corpus;
  ModelConfig model;
  TrainConfig train;
  PretrainConfig pretrain;
  MetricsConfig metrics;

  /// Defaults for a vocabulary of `vocab_size` tokens: desk-scale model.
  static RunConfig defaults(std::int64_t vocab_size) {
    RunConfig c;
    c.model = ModelConfig::desk(vocab_size);
    return c;
  }

  void validate() const {
    try {
      model.validate();
      train.validate();
    } catch (const ContractViolation& e) {
      throw ValidationError(e.what());
    }
    if (corpus.t_max < 1) throw ValidationError("corpus.t_max must be >= 1");
    if (pretrain.epochs < 0 || pretrain.batch_size < 2) throw ValidationError("pretrain needs epochs >= 0, batch >= 2");
    if (metrics.n_per_caption < 1 || metrics.is_splits < 1) throw ValidationError("metrics counts must be >= 1");
    if (metrics.backend != "toy") throw ValidationError("unknown embedding backend '" + metrics.backend + "'");
  }

  nlohmann::json to_json() const {
    return {{"seed", seed},
            {"output_dir", output_dir},
            {"data_dir", data_dir},
            {"corpus", corpus.to_json()},
            {"model", model.to_json()},
            {"train", train.to_json()},
            {"pretrain", pretrain.to_json()},
            {"metrics", metrics.to_json()}};
  }

  /// The top-level seed wins over train.seed.
  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    try {
      c.seed = j.value("seed", c.seed);
      c.output_dir = j.value("output_dir", c.output_dir);
      c.data_dir = j.value("data_dir", c.data_dir);
      if (j.contains("corpus")) c.corpus = CorpusConfig::from_json(j.at("corpus"));
      if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
      if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
      if (j.contains("pretrain")) c.pretrain = PretrainConfig::from_json(j.at("pretrain"));
      if (j.contains("metrics")) c.metrics = MetricsConfig::from_json(j.at("metrics"));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("bad config: ") + e.what());
    } catch (const ContractViolation& e) {
      throw ValidationError(std::string("bad config: ") + e.what());
    }
    c.train.seed = c.seed;
    return c;
  }

  /// Merge `file` (may be empty) and `overrides` over `base`, then parse
  /// and validate.
  static RunConfig resolve(const RunConfig& base, const std::filesystem::path& file,
                           const nlohmann::json& overrides) {
    auto j = base.to_json();
    if (!file.empty()) {
      std::ifstream is(file);
      if (!is) throw ValidationError("cannot open config file " + file.string());
      try {
        j.merge_patch(nlohmann::json::parse(is));
      } catch (const nlohmann::json::exception& e) {
        throw ValidationError(file.string() + ": " + e.what());
      }
    }
    j.merge_patch(overrides);
    auto c = from_json(j);
    c.validate();
    return c;
  }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path.string());
    os << to_json().dump(2) << "\n";
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw LoadError("cannot open " + path.string());
    try {
      return from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(path.string() + ": " + e.what());
    }
  }
};

}  // namespace ftgan
