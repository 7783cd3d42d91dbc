#pragma once

// Command implementations behind the `ftgan` tool. Each command takes a
// plain options struct so it can be driven from tests without a process.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftgan/config.hpp"
#include "ftgan/evaluation.hpp"

namespace ftgan::cli {

namespace fs = std::filesystem;

/// Bad flags, bad config or a missing prerequisite: exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

inline constexpr const char* kPreparedFormat = "ftgan-prepared/1";

// ---------------------------------------------------------------------------
// Run directories

inline fs::path output_root() {
  const char* env = std::getenv("FTGAN_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

/// `explicit_dir` when given, else <root>/<command>-YYYYmmdd-HHMMSS with a
/// numeric suffix on collision.
inline fs::path make_run_dir(const std::string& explicit_dir, const std::string& command) {
  if (!explicit_dir.empty()) {
    fs::create_directories(explicit_dir);
    return explicit_dir;
  }
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  const auto base = output_root() / (command + "-" + stamp);
  auto dir = base;
  for (int k = 2; fs::exists(dir); ++k) dir = base.string() + "-" + std::to_string(k);
  fs::create_directories(dir);
  return dir;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp);
    if (!os) throw Error("cannot write " + tmp.string());
    os << j.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// prepare-data

struct PrepareOptions {
  fs::path manifest;
  fs::path out;
  int min_freq = 1;
  std::int64_t t_max = 18;
};

struct Prepared {
  fs::path dir;
  nlohmann::json meta;
  corpus::Corpus data;
};

/// Validate the manifest and write <out>/dataset.meta and
/// <out>/vocabulary.json. Output depends only on the inputs.
inline nlohmann::json prepare_data(const PrepareOptions& opt) {
  if (!fs::exists(opt.manifest)) throw UsageError("manifest not found: " + opt.manifest.string());
  if (opt.min_freq < 1 || opt.t_max < 1) throw UsageError("--min-freq and --t-max must be >= 1");
  const auto m = corpus::load_manifest(opt.manifest);
  const auto vocab = corpus::build_vocabulary(m, opt.min_freq);
  fs::create_directories(opt.out);
  nlohmann::json meta{{"format", kPreparedFormat},
                      {"manifest", fs::absolute(opt.manifest).lexically_normal().string()},
                      {"records", m.records.size()},
                      {"train", m.indices(corpus::Split::train).size()},
                      {"test", m.indices(corpus::Split::test).size()},
                      {"captions_per_image", m.captions_per_image},
                      {"image_size", m.image_size},
                      {"min_freq", opt.min_freq},
                      {"t_max", opt.t_max},
                      {"vocab_size", vocab.size()}};
  write_json(opt.out / "dataset.meta", meta);
  vocab.save(opt.out / "vocabulary.json");
  return meta;
}

inline Prepared load_prepared(const fs::path& dir) {
  if (dir.empty()) throw UsageError("no dataset given; pass --data DIR (created by `ftgan prepare-data`)");
  const auto meta_path = dir / "dataset.meta";
  if (!fs::exists(meta_path))
    throw UsageError("no prepared dataset in " + dir.string() + "; run `ftgan prepare-data --manifest M --out " +
                     dir.string() + "` first");
  auto meta = read_json(meta_path);
  if (meta.value("format", "") != kPreparedFormat) throw LoadError(meta_path.string() + ": unknown format");
  auto m = corpus::load_manifest(meta.at("manifest").get<std::string>());
  auto v = corpus::Vocabulary::load(dir / "vocabulary.json");
  const std::int64_t t_max = meta.at("t_max");
  return {dir, std::move(meta), corpus::Corpus(std::move(m), std::move(v), t_max)};
}

/// Comma-separated ascending scales, e.g. "16,32,64".
inline std::vector<int> parse_scales(const std::string& s) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const auto comma = s.find(',', pos);
    const auto tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError("bad --scales '" + s + "': expected comma-separated integers");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

/// Apply stage scales to a model config: generator stages, matching
/// injection scales, and the image encoder input at the largest scale.
inline void apply_scales(ModelConfig& m, const std::vector<int>& scales) {
  m.generator.set_scales(scales);
  m.image.input_size = scales.back();
}

// ---------------------------------------------------------------------------
// Checkpoints

struct LoadedCheckpoint {
  fs::path dir;
  RunConfig config;
  Models<float> models;
  corpus::Vocabulary vocab;
};

/// Accepts a training run directory or its checkpoint/ subdirectory.
inline fs::path checkpoint_dir(const fs::path& p) {
  if (fs::exists(p / "checkpoint" / "state.json")) return p / "checkpoint";
  if (fs::exists(p / "state.json")) return p;
  throw UsageError("no training checkpoint at " + p.string() + "; run `ftgan train` first");
}

inline LoadedCheckpoint load_checkpoint(const fs::path& p) {
  const auto dir = checkpoint_dir(p);
  const auto st = Trainer<float>::read_state(dir);
  auto cfg = RunConfig::load(dir / "run_config.json");
  auto models = Models<float>::create(ModelConfig::from_json(st.at("model")), cfg.seed);
  models.load(dir);
  return {dir, std::move(cfg), std::move(models), corpus::Vocabulary::load(dir / "vocabulary.json")};
}

// ---------------------------------------------------------------------------
// pretrain-damsm

struct PretrainCommand {
  fs::path data;
  fs::path config_file;
  nlohmann::json overrides = nlohmann::json::object();
  std::string scales;
  std::string out;
};

inline fs::path damsm_dir(const fs::path& p) {
  if (fs::exists(p / "damsm" / "text_encoder.bin")) return p / "damsm";
  if (fs::exists(p / "text_encoder.bin") && fs::exists(p / "image_encoder.bin")) return p;
  throw UsageError("no DAMSM checkpoint at " + p.string() + "; run `ftgan pretrain-damsm` first");
}

inline fs::path cmd_pretrain_damsm(const PretrainCommand& c, std::ostream& log) {
  auto prep = load_prepared(c.data);
  auto base = RunConfig::defaults(static_cast<std::int64_t>(prep.data.vocabulary().size()));
  base.corpus.t_max = prep.meta.at("t_max");
  base.data_dir = fs::absolute(c.data).string();
  auto cfg = RunConfig::resolve(base, c.config_file, c.overrides);
  if (!c.scales.empty()) apply_scales(cfg.model, parse_scales(c.scales));
  cfg.model.text.vocab_size = static_cast<std::int64_t>(prep.data.vocabulary().size());
  cfg.validate();
  const auto run = make_run_dir(c.out, "pretrain-damsm");
  cfg.output_dir = run.string();
  cfg.save(run / "config.json");

  Rng rt(derive_seed(cfg.seed, 0, 1)), ri(derive_seed(cfg.seed, 0, 2));
  TextEncoder<float> text(cfg.model.text, rt);
  ImageEncoder<float> image(cfg.model.image, ri);
  PretrainOptions po;
  po.epochs = cfg.pretrain.epochs;
  po.batch_size = cfg.pretrain.batch_size;
  po.lr = cfg.pretrain.lr;
  po.seed = cfg.seed;
  po.text_dropout = cfg.pretrain.text_dropout;
  po.damsm = cfg.pretrain.damsm;
  po.checkpoint_dir = run / "damsm";
  std::ofstream jl(run / "pretrain_log.jsonl");
  po.on_log = [&](const nlohmann::json& j) { jl << j.dump() << "\n"; };
  pretrain_damsm(prep.data, text, image, po);
  prep.data.vocabulary().save(run / "damsm" / "vocabulary.json");
  log << "DAMSM checkpoint written to " << (run / "damsm").string() << "\n";
  return run;
}

// ---------------------------------------------------------------------------
// train

struct TrainCommand {
  fs::path data;
  fs::path config_file;
  nlohmann::json overrides = nlohmann::json::object();
  std::string scales;
  fs::path damsm;
  bool from_scratch = false;
  fs::path resume;
  std::string out;
  bool quiet = false;
};

/// Keep only log lines at or before `step`.
inline void truncate_log(const fs::path& path, std::int64_t step) {
  std::ifstream is(path);
  if (!is) return;
  std::vector<std::string> keep;
  for (std::string line; std::getline(is, line);) {
    if (line.empty()) continue;
    if (nlohmann::json::parse(line).value("step", std::int64_t{0}) <= step) keep.push_back(line);
  }
  is.close();
  std::ofstream os(path, std::ios::trunc);
  for (const auto& l : keep) os << l << "\n";
}

inline fs::path cmd_train(const TrainCommand& c, std::ostream& log) {
  fs::path run;
  RunConfig cfg;
  std::optional<Trainer<float>> trainer;
  std::optional<Prepared> prep;

  if (!c.resume.empty()) {
    const auto ck = checkpoint_dir(c.resume);
    run = ck.parent_path();
    auto j = RunConfig::load(ck / "run_config.json").to_json();
    j.merge_patch(c.overrides);
    cfg = RunConfig::from_json(j);
    cfg.validate();
    prep = load_prepared(c.data.empty() ? fs::path(cfg.data_dir) : c.data);
    trainer.emplace(Trainer<float>::resume(ck, cfg.train));
    truncate_log(run / "train_log.jsonl", trainer->step_count());
    log << "resuming " << run.string() << " at step " << trainer->step_count() << "\n";
  } else {
    if (c.damsm.empty() && !c.from_scratch)
      throw UsageError("train needs a DAMSM checkpoint: run `ftgan pretrain-damsm` and pass --damsm DIR, or pass "
                       "--from-scratch");
    prep = load_prepared(c.data);
    const auto vs = static_cast<std::int64_t>(prep->data.vocabulary().size());
    auto base = RunConfig::defaults(vs);
    base.corpus.t_max = prep->meta.at("t_max");
    base.data_dir = fs::absolute(c.data).string();
    std::optional<TextEncoder<float>> text;
    std::optional<ImageEncoder<float>> image;
    if (!c.damsm.empty()) {
      const auto dd = damsm_dir(c.damsm);
      text = TextEncoder<float>::from_checkpoint(dd / "text_encoder.bin");
      image = ImageEncoder<float>::from_checkpoint(dd / "image_encoder.bin");
      if (text->config().vocab_size != vs)
        throw UsageError("DAMSM checkpoint " + dd.string() + " was trained on a different vocabulary (" +
                         std::to_string(text->config().vocab_size) + " tokens, dataset has " + std::to_string(vs) +
                         ")");
      base.model.text = text->config();
      base.model.image = image->config();
      base.model.generator.text_dim = text->config().feature_dim();
    }
    cfg = RunConfig::resolve(base, c.config_file, c.overrides);
    if (!c.scales.empty()) {
      const auto s = parse_scales(c.scales);
      if (image && image->config().input_size != s.back())
        throw UsageError("--scales ends at " + std::to_string(s.back()) + " but the DAMSM image encoder takes " +
                         std::to_string(image->config().input_size) + " px; pretrain DAMSM with the same --scales");
      apply_scales(cfg.model, s);
    }
    cfg.model.text.vocab_size = vs;
    if (text) {
      cfg.model.text = text->config();
      cfg.model.image = image->config();
    }
    cfg.validate();
    run = make_run_dir(c.out, "train");
    cfg.output_dir = run.string();
    cfg.save(run / "config.json");
    auto models = Models<float>::create(cfg.model, cfg.seed);
    if (text) {
      models.text = std::move(*text);
      models.image = std::move(*image);
    }
    trainer.emplace(cfg.train, std::move(models));
    fs::remove(run / "train_log.jsonl");
  }

  const auto ck = run / "checkpoint";
  fs::create_directories(ck);
  cfg.save(ck / "run_config.json");
  prep->data.vocabulary().save(ck / "vocabulary.json");
  TrainOptions to;
  to.checkpoint_dir = ck;
  to.log_path = run / "train_log.jsonl";
  to.prefetch_workers = static_cast<int>(cfg.corpus.prefetch_workers);
  const auto every = std::max<std::int64_t>(1, cfg.train.max_steps / 20);
  to.on_step = [&](const LossReport& r) {
    if (!c.quiet && (r.step % every == 0 || r.step == cfg.train.max_steps))
      log << "step " << r.step << "  L_G " << r.generator << "  L_DAMSM " << r.damsm << "  text_grad_norm "
          << r.text_grad_norm << "\n";
  };
  train(*trainer, prep->data, to);
  log << "checkpoint written to " << ck.string() << "\n";
  return run;
}

// ---------------------------------------------------------------------------
// sample / export-attn

struct SampleCommand {
  fs::path checkpoint;
  std::vector<std::string> captions;
  fs::path captions_file;
  int n = 1;
  std::optional<std::uint64_t> seed;
  std::string out;
};

inline std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw UsageError("cannot open captions file " + p.string());
  std::vector<std::string> out;
  for (std::string line; std::getline(is, line);)
    if (line.find_first_not_of(" \t\r") != std::string::npos) out.push_back(line);
  return out;
}

inline fs::path cmd_sample(const SampleCommand& c, std::ostream& log) {
  auto captions = c.captions;
  if (!c.captions_file.empty())
    for (auto& l : read_lines(c.captions_file)) captions.push_back(l);
  if (captions.empty()) throw UsageError("no captions given; pass --caption TEXT or --captions-file FILE");
  if (c.n < 1) throw UsageError("--n must be >= 1");
  auto ck = load_checkpoint(c.checkpoint);
  const auto seed = c.seed.value_or(ck.config.seed);
  const auto run = make_run_dir(c.out, "sample");
  auto cfg = ck.config;
  cfg.output_dir = run.string();
  cfg.metrics.n_per_caption = c.n;
  cfg.seed = seed;
  cfg.save(run / "config.json");
  auto set = sample(ck.models, ck.vocab, captions, c.n, seed, cfg.corpus.t_max, cfg.metrics.sample_chunk);
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i = 0; i < set.images.size(); ++i) {
    for (int j = 0; j < c.n; ++j) corpus::write_png(run / sample_file_name(i, j), set.images[i][j]);
    char grid[32];
    std::snprintf(grid, sizeof grid, "grid_c%05zu.png", i);
    corpus::write_png(run / grid, corpus::tile(set.images[i], std::min(c.n, 10)));
    index.push_back({{"caption", captions[i]}, {"grid", grid}, {"samples", c.n}});
  }
  for (const auto& w : set.warnings) log << "warning: " << w << "\n";
  write_json(run / "samples.json", {{"seed", seed}, {"captions", index}, {"warnings", set.warnings}});
  log << set.images.size() * static_cast<std::size_t>(c.n) << " images written to " << run.string() << "\n";
  return run;
}

struct ExportAttnCommand {
  fs::path checkpoint;
  std::string caption;
  std::optional<std::uint64_t> seed;
  std::string out;
};

inline fs::path cmd_export_attn(const ExportAttnCommand& c, std::ostream& log) {
  auto ck = load_checkpoint(c.checkpoint);
  const auto seed = c.seed.value_or(ck.config.seed);
  if (ck.models.generator.config().stages() < 2)
    throw UsageError("the checkpoint has a single stage; there are no word attention maps to export");
  const auto run = make_run_dir(c.out, "export-attn");
  auto cfg = ck.config;
  cfg.output_dir = run.string();
  cfg.seed = seed;
  cfg.save(run / "config.json");
  auto set = sample(ck.models, ck.vocab, {c.caption}, 1, seed, cfg.corpus.t_max);
  const auto& enc = set.encoded[0];
  std::vector<std::string> words;
  for (std::int64_t t = 0; t < enc.length; ++t) words.push_back(ck.vocab.token(enc.ids[static_cast<std::size_t>(t)]));
  corpus::write_png(run / "image.png", set.images[0][0]);
  corpus::write_png(run / "attention.png", attention_grid(set.images[0][0], set.attention[0], enc.length));
  std::vector<std::string> columns{"image"};
  for (const auto& a : set.attention[0]) columns.push_back("attention " + std::to_string(a.height) + "x" +
                                                           std::to_string(a.width));
  write_json(run / "attention.json",
             {{"caption", c.caption}, {"seed", seed}, {"rows", words}, {"columns", columns}, {"warnings", set.warnings}});
  for (const auto& w : set.warnings) log << "warning: " << w << "\n";
  log << "attention grid with " << words.size() << " rows written to " << (run / "attention.png").string() << "\n";
  return run;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateCommand {
  fs::path checkpoint;
  fs::path data;  // default: the dataset the checkpoint was trained on
  std::optional<int> n_per_caption;
  std::optional<std::uint64_t> seed;
  std::string split = "test";
  std::optional<int> is_splits;
  std::string fsd_norm;
  fs::path feature_cache;
  std::string out;
};

inline std::unique_ptr<metrics::EmbeddingBackend> make_backend(const std::string& name) {
  if (name == "toy") {
    auto b = std::make_unique<metrics::ToyBackend>();
    b->fit_shapes();
    return b;
  }
  throw UsageError("unknown embedding backend '" + name + "'");
}

inline fs::path cmd_evaluate(const EvaluateCommand& c, std::ostream& log) {
  auto ck = load_checkpoint(c.checkpoint);
  auto cfg = ck.config;
  if (c.n_per_caption) cfg.metrics.n_per_caption = *c.n_per_caption;
  if (c.is_splits) cfg.metrics.is_splits = *c.is_splits;
  if (!c.fsd_norm.empty()) cfg.metrics = MetricsConfig::from_json({{"fsd_norm", c.fsd_norm}, {"n_per_caption",
      cfg.metrics.n_per_caption}, {"is_splits", cfg.metrics.is_splits}, {"backend", cfg.metrics.backend}});
  if (c.seed) cfg.seed = *c.seed;
  if (cfg.metrics.n_per_caption < 1) throw UsageError("--n-per-caption must be >= 1");
  auto prep = load_prepared(c.data.empty() ? fs::path(cfg.data_dir) : c.data);
  if (prep.data.vocabulary().to_json() != ck.vocab.to_json())
    throw UsageError("dataset vocabulary differs from the checkpoint's; evaluate on the dataset it was trained on");
  EvalOptions eo;
  eo.split = corpus::parse_split(c.split);
  eo.n_per_caption = cfg.metrics.n_per_caption;
  eo.seed = cfg.seed;
  eo.is_splits = cfg.metrics.is_splits;
  eo.fsd_norm = cfg.metrics.fsd_norm;
  eo.chunk = cfg.metrics.sample_chunk;
  const auto run = make_run_dir(c.out, "evaluate");
  cfg.output_dir = run.string();
  cfg.data_dir = fs::absolute(prep.dir).string();
  cfg.save(run / "config.json");
  eo.image_dir = run / "images";
  std::optional<metrics::FeatureCache> cache;
  if (!c.feature_cache.empty()) {
    cache.emplace(c.feature_cache);
    eo.cache = &*cache;
  }
  const auto backend = make_backend(cfg.metrics.backend);
  auto ev = evaluate(ck.models, prep.data, *backend, eo);
  auto j = ev.report.to_json();
  j["split"] = c.split;
  j["captions"] = ev.captions;
  j["n_per_caption"] = eo.n_per_caption;
  j["seed"] = eo.seed;
  j["checkpoint"] = fs::absolute(ck.dir).string();
  write_json(run / "metrics.json", j);
  for (const auto& w : ev.warnings) log << "warning: " << w << "\n";
  log << ev.report.table() << ev.images_written << " images written to " << eo.image_dir.string() << "\n";
  return run;
}

// ---------------------------------------------------------------------------
// make-toy

struct MakeToyCommand {
  fs::path out;
  corpus::FixtureOptions fixture;
};

inline fs::path cmd_make_toy(const MakeToyCommand& c, std::ostream& log) {
  if (c.out.empty()) throw UsageError("make-toy needs --out DIR");
  if (c.fixture.num_train < 0 || c.fixture.num_test < 0) throw UsageError("image counts must be >= 0");
  const auto m = corpus::write_shape_fixture(c.out, c.fixture);
  log << "wrote " << c.fixture.num_train + c.fixture.num_test << " images and " << m.string() << "\n";
  return m;
}

}  // namespace ftgan::cli
