#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ftgan/cli.hpp"

using namespace ftgan;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Tiny networks so a CLI training step takes milliseconds.
nlohmann::json tiny_config() {
  return {{"model",
           {{"text_encoder", {{"vocab_size", 3}, {"embed_dim", 8}, {"hidden_per_direction", 4}}},
            {"image_encoder", {{"input_size", 64}, {"feature_dim", 8}, {"base_channels", 4}}},
            {"generator", {{"base_channels", 4}, {"text_dim", 8}, {"z_dim", 8}}},
            {"discriminator", {{"base_channels", 4}, {"cond_channels", 4}}}}},
          {"train", {{"batch_size", 4}}},
          {"pretrain", {{"batch_size", 4}}}};
}

struct Workspace {
  fs::path root, data, config;
};

Workspace prepared(const std::string& name) {
  Workspace w;
  w.root = fresh_dir(name);
  corpus::FixtureOptions fo;
  fo.num_train = 8;
  fo.num_test = 2;
  const auto manifest = corpus::write_shape_fixture(w.root / "toy", fo);
  w.data = w.root / "prep";
  cli::prepare_data({manifest, w.data});
  w.config = w.root / "tiny.json";
  std::ofstream(w.config) << tiny_config().dump();
  return w;
}

int run_tool(const std::string& args) {
  const std::string cmd = std::string(FTGAN_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(RunConfig, ResolvePrecedenceAndRoundTrip) {
  const auto dir = fresh_dir("ftgan_cli_config");
  const auto file = dir / "c.json";
  std::ofstream(file) << R"({"seed": 5, "train": {"lambda": 2.0, "batch_size": 6}, "model": {"generator": {"z_dim": 7}}})";
  auto base = RunConfig::defaults(20);
  auto c = RunConfig::resolve(base, file, {{"train", {{"lambda", 0.5}}}});
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.train.seed, 5u);
  EXPECT_EQ(c.train.lambda, 0.5);  // flag beats file
  EXPECT_EQ(c.train.batch_size, 6);
  EXPECT_EQ(c.model.generator.z_dim, 7);
  EXPECT_EQ(c.model.generator.base_channels, base.model.generator.base_channels);
  EXPECT_EQ(RunConfig::from_json(c.to_json()).to_json(), c.to_json());
  c.save(dir / "saved.json");
  EXPECT_EQ(RunConfig::load(dir / "saved.json").to_json(), c.to_json());

  EXPECT_THROW(RunConfig::resolve(base, {}, {{"train", {{"mode", "sideways"}}}}), ValidationError);
  EXPECT_THROW(RunConfig::resolve(base, {}, {{"train", {{"batch_size", 1}}}}), ValidationError);
  EXPECT_THROW(RunConfig::resolve(base, {}, {{"metrics", {{"backend", "facenet"}}}}), ValidationError);
  EXPECT_THROW(RunConfig::resolve(base, dir / "missing.json", {}), ValidationError);
}

TEST(Cli, ScalesFlag) {
  EXPECT_EQ(cli::parse_scales("16,32,64"), (std::vector<int>{16, 32, 64}));
  EXPECT_THROW(cli::parse_scales("16,x"), cli::UsageError);
  EXPECT_THROW(cli::parse_scales(""), cli::UsageError);
  auto m = ModelConfig::desk(10);
  cli::apply_scales(m, {32, 64, 128});
  EXPECT_EQ(m.image.input_size, 128);
  EXPECT_EQ(m.generator.noise_injection_scales, (std::vector<int>{4, 8, 16}));
  EXPECT_NO_THROW(m.validate());
}

TEST(Cli, PrepareDataIsIdempotentAndRejectsMissingManifest) {
  auto w = prepared("ftgan_cli_prepare");
  const auto meta = slurp(w.data / "dataset.meta"), vocab = slurp(w.data / "vocabulary.json");
  cli::prepare_data({w.root / "toy" / "manifest.jsonl", w.data});
  EXPECT_EQ(slurp(w.data / "dataset.meta"), meta);
  EXPECT_EQ(slurp(w.data / "vocabulary.json"), vocab);
  const auto j = nlohmann::json::parse(meta);
  EXPECT_EQ(j["captions_per_image"], 5);
  EXPECT_EQ(j["image_size"], 64);
  EXPECT_EQ(j["train"], 8);
  EXPECT_EQ(j["test"], 2);
  try {
    cli::prepare_data({w.root / "nowhere.jsonl", w.root / "x"});
    FAIL();
  } catch (const cli::UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("nowhere.jsonl"), std::string::npos);
  }
}

TEST(Cli, TrainNeedsDamsmOrFromScratch) {
  auto w = prepared("ftgan_cli_prereq");
  cli::TrainCommand c;
  c.data = w.data;
  c.out = (w.root / "run").string();
  std::ostringstream log;
  try {
    cli::cmd_train(c, log);
    FAIL();
  } catch (const cli::UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("pretrain-damsm"), std::string::npos);
  }
  c.damsm = w.root / "nothing";
  EXPECT_THROW(cli::cmd_train(c, log), cli::UsageError);
  cli::TrainCommand d;
  d.data = w.root / "unprepared";
  d.from_scratch = true;
  EXPECT_THROW(cli::cmd_train(d, log), cli::UsageError);
}

TEST(Cli, ModeChangesTextGradientColumn) {
  auto w = prepared("ftgan_cli_modes");
  std::ostringstream log;
  auto norms = [&](const std::string& mode) {
    cli::TrainCommand c;
    c.data = w.data;
    c.config_file = w.config;
    c.from_scratch = true;
    c.overrides = {{"train", {{"mode", mode}, {"max_steps", 2}}}};
    c.out = (w.root / mode).string();
    c.quiet = true;
    const auto run = cli::cmd_train(c, log);
    std::vector<double> out;
    std::ifstream is(run / "train_log.jsonl");
    for (std::string line; std::getline(is, line);) out.push_back(nlohmann::json::parse(line)["text_grad_norm"]);
    EXPECT_TRUE(fs::exists(run / "config.json"));
    EXPECT_TRUE(fs::exists(run / "checkpoint" / "state.json"));
    return out;
  };
  const auto split = norms("split"), full = norms("fully-trained");
  ASSERT_EQ(split.size(), 2u);
  ASSERT_EQ(full.size(), 2u);
  for (double v : split) EXPECT_EQ(v, 0.0);
  for (double v : full) EXPECT_GT(v, 0.0);
}

TEST(Cli, StoredConfigReproducesRun) {
  auto w = prepared("ftgan_cli_repro");
  std::ostringstream log;
  cli::TrainCommand c;
  c.data = w.data;
  c.config_file = w.config;
  c.from_scratch = true;
  c.overrides = {{"train", {{"max_steps", 2}}}, {"seed", 3}};
  c.out = (w.root / "a").string();
  c.quiet = true;
  const auto a = cli::cmd_train(c, log);
  cli::TrainCommand again;
  again.data = w.data;
  again.config_file = a / "config.json";
  again.from_scratch = true;
  again.out = (w.root / "b").string();
  again.quiet = true;
  const auto b = cli::cmd_train(again, log);
  EXPECT_EQ(slurp(a / "train_log.jsonl"), slurp(b / "train_log.jsonl"));
}

TEST(Cli, SampleEvaluateAndExport) {
  auto w = prepared("ftgan_cli_sample");
  std::ostringstream log;
  cli::TrainCommand t;
  t.data = w.data;
  t.config_file = w.config;
  t.from_scratch = true;
  t.overrides = {{"train", {{"max_steps", 1}}}};
  t.out = (w.root / "train").string();
  t.quiet = true;
  const auto run = cli::cmd_train(t, log);

  cli::SampleCommand s;
  s.checkpoint = run;
  s.captions = {"a red circle", "a blue square"};
  s.n = 1;
  s.seed = 4;
  s.out = (w.root / "s1").string();
  cli::cmd_sample(s, log);
  s.out = (w.root / "s2").string();
  cli::cmd_sample(s, log);
  EXPECT_EQ(slurp(w.root / "s1" / "c00000_s000.png"), slurp(w.root / "s2" / "c00000_s000.png"));
  EXPECT_TRUE(fs::exists(w.root / "s1" / "grid_c00001.png"));

  cli::ExportAttnCommand a;
  a.checkpoint = run;
  a.caption = "a red circle on a white background";
  a.out = (w.root / "attn").string();
  cli::cmd_export_attn(a, log);
  const auto aj = nlohmann::json::parse(slurp(w.root / "attn" / "attention.json"));
  EXPECT_EQ(aj["rows"].size(), 7u);
  const auto grid = corpus::read_image(w.root / "attn" / "attention.png");
  EXPECT_EQ(grid.height, 7 * 64 + 6 * 2);
  EXPECT_EQ(grid.width, 3 * 64 + 2 * 2);

  cli::EvaluateCommand e;
  e.checkpoint = run;
  e.n_per_caption = 2;
  e.is_splits = 2;
  e.out = (w.root / "eval").string();
  cli::cmd_evaluate(e, log);
  std::size_t n = 0;
  for (const auto& f : fs::directory_iterator(w.root / "eval" / "images")) n += f.path().extension() == ".png";
  EXPECT_EQ(n, 2u * 5u * 2u);
  const auto mj = nlohmann::json::parse(slurp(w.root / "eval" / "metrics.json"));
  EXPECT_EQ(mj["N"], 20);
  EXPECT_GE(mj["fid"].get<double>(), 0.0);
  EXPECT_GE(mj["inception_score"]["mean"].get<double>(), 1.0 - 1e-9);
}

TEST(Cli, ExitCodes) {
  const auto dir = fresh_dir("ftgan_cli_exit");
  EXPECT_EQ(run_tool("--help"), 0);
  EXPECT_EQ(run_tool(""), 2);
  EXPECT_EQ(run_tool("frobnicate"), 2);
  EXPECT_EQ(run_tool("prepare-data --manifest " + (dir / "missing.jsonl").string() + " --out " + dir.string()), 2);
  EXPECT_EQ(run_tool("train --data " + dir.string() + " --from-scratch"), 2);
  EXPECT_EQ(run_tool("make-toy --out " + (dir / "toy").string() + " --train 2"), 0);
  // A manifest whose image is missing parses as usage-valid but fails at load time.
  fs::remove(dir / "toy" / "images" / "0001.png");
  EXPECT_EQ(run_tool("prepare-data --manifest " + (dir / "toy" / "manifest.jsonl").string() + " --out " +
                     (dir / "p").string()),
            1);
}

TEST(Cli, TimestampedRunDirectoryUnderOutputRoot) {
  const auto root = fresh_dir("ftgan_cli_root");
  setenv("FTGAN_OUTPUT_ROOT", root.c_str(), 1);
  const auto a = cli::make_run_dir("", "train");
  const auto b = cli::make_run_dir("", "train");
  unsetenv("FTGAN_OUTPUT_ROOT");
  EXPECT_EQ(a.parent_path(), root);
  EXPECT_NE(a, b);
  EXPECT_EQ(a.filename().string().rfind("train-", 0), 0u);
}
