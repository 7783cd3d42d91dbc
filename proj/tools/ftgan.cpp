// ftgan: data preparation, DAMSM pretraining, training, sampling,
// evaluation and attention export.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <iostream>

#include <CLI11.hpp>

#include "ftgan/cli.hpp"

using namespace ftgan;
using nlohmann::json;

namespace {

// Flags that map onto config keys; only set keys are patched in.
struct ConfigFlags {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::optional<double> lambda;
  std::optional<std::int64_t> steps;
  std::optional<std::int64_t> batch_size;
  std::optional<std::int64_t> checkpoint_interval;
  std::optional<int> workers;
  std::optional<int> epochs;
  std::string scales;

  json patch() const {
    json j = json::object();
    if (seed) j["seed"] = *seed;
    if (!mode.empty()) j["train"]["mode"] = mode;
    if (lambda) j["train"]["lambda"] = *lambda;
    if (steps) j["train"]["max_steps"] = *steps;
    if (batch_size) j["train"]["batch_size"] = *batch_size;
    if (checkpoint_interval) j["train"]["checkpoint_interval"] = *checkpoint_interval;
    if (workers) j["corpus"]["prefetch_workers"] = *workers;
    if (epochs) j["pretrain"]["epochs"] = *epochs;
    return j;
  }
};

void add_common(CLI::App* sub, ConfigFlags& f) {
  sub->add_option("--config", f.config_file, "JSON config file; flags override its values")->check(CLI::ExistingFile);
  sub->add_option("--seed", f.seed, "Seed for every random stream of the run");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ftgan: text-to-image GAN with a jointly trained text encoder"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "ftgan 1.0");

  cli::PrepareOptions prep;
  auto* p = app.add_subcommand("prepare-data", "Validate a manifest and write dataset.meta + vocabulary.json");
  p->add_option("--manifest", prep.manifest, "Manifest (JSON lines)")->required();
  p->add_option("--out", prep.out, "Output directory")->required();
  p->add_option("--min-freq", prep.min_freq, "Minimum word frequency for the vocabulary");
  p->add_option("--t-max", prep.t_max, "Maximum words per caption");

  ConfigFlags pf;
  cli::PretrainCommand pre;
  auto* pd = app.add_subcommand("pretrain-damsm", "Pretrain the text and image encoders with the DAMSM loss");
  pd->add_option("--data", pre.data, "Prepared dataset directory")->required();
  pd->add_option("--epochs", pf.epochs, "Pretraining epochs");
  pd->add_option("--scales", pre.scales, "Stage scales, e.g. 16,32,64 (sets the image encoder input)");
  pd->add_option("--out", pre.out, "Run directory (default: timestamped under $FTGAN_OUTPUT_ROOT)");
  add_common(pd, pf);

  ConfigFlags tf;
  cli::TrainCommand tc;
  auto* tr = app.add_subcommand("train", "Train the generator and discriminators");
  tr->add_option("--data", tc.data, "Prepared dataset directory");
  tr->add_option("--damsm", tc.damsm, "DAMSM run directory from pretrain-damsm");
  tr->add_flag("--from-scratch", tc.from_scratch, "Start the text and image encoders from random weights");
  tr->add_option("--resume", tc.resume, "Continue a training run directory from its checkpoint");
  tr->add_option("--mode", tf.mode, "fully-trained or split")
      ->check(CLI::IsMember({"fully-trained", "fully_trained", "split"}));
  tr->add_option("--lambda", tf.lambda, "Weight of the DAMSM term in the generator loss");
  tr->add_option("--scales", tc.scales, "Stage scales, e.g. 16,32,64");
  tr->add_option("--steps", tf.steps, "Total training steps");
  tr->add_option("--batch-size", tf.batch_size, "Batch size");
  tr->add_option("--checkpoint-interval", tf.checkpoint_interval, "Steps between checkpoints (0: only at the end)");
  tr->add_option("--workers", tf.workers, "Prefetch worker threads");
  tr->add_flag("--quiet", tc.quiet, "Only print the final line");
  tr->add_option("--out", tc.out, "Run directory (default: timestamped under $FTGAN_OUTPUT_ROOT)");
  add_common(tr, tf);

  cli::SampleCommand sc;
  std::optional<std::uint64_t> sample_seed;
  auto* sa = app.add_subcommand("sample", "Generate images for captions");
  sa->add_option("--checkpoint", sc.checkpoint, "Training run or checkpoint directory")->required();
  sa->add_option("--caption", sc.captions, "Caption (repeatable)");
  sa->add_option("--captions-file", sc.captions_file, "One caption per line")->check(CLI::ExistingFile);
  sa->add_option("--n", sc.n, "Images per caption");
  sa->add_option("--seed", sample_seed, "Sampling seed (default: the run seed)");
  sa->add_option("--out", sc.out, "Output directory");

  cli::EvaluateCommand ec;
  std::optional<std::uint64_t> eval_seed;
  auto* ev = app.add_subcommand("evaluate", "Generate images for every caption of a split and score them");
  ev->add_option("--checkpoint", ec.checkpoint, "Training run or checkpoint directory")->required();
  ev->add_option("--data", ec.data, "Prepared dataset directory (default: the training dataset)");
  ev->add_option("--n-per-caption", ec.n_per_caption, "Images per caption (default 10)");
  ev->add_option("--split", ec.split, "Split to evaluate")->check(CLI::IsMember({"train", "test"}));
  ev->add_option("--is-splits", ec.is_splits, "Inception Score splits (default 10)");
  ev->add_option("--fsd-norm", ec.fsd_norm, "Norm for FSD")->check(CLI::IsMember({"l2", "l1"}));
  ev->add_option("--feature-cache", ec.feature_cache, "Directory for cached embeddings");
  ev->add_option("--seed", eval_seed, "Sampling seed (default: the run seed)");
  ev->add_option("--out", ec.out, "Output directory");

  cli::ExportAttnCommand ac;
  std::optional<std::uint64_t> attn_seed;
  auto* ea = app.add_subcommand("export-attn", "Write the per-word attention grid for one caption");
  ea->add_option("--checkpoint", ac.checkpoint, "Training run or checkpoint directory")->required();
  ea->add_option("--caption", ac.caption, "Caption")->required();
  ea->add_option("--seed", attn_seed, "Sampling seed (default: the run seed)");
  ea->add_option("--out", ac.out, "Output directory");

  cli::MakeToyCommand mt;
  auto* mk = app.add_subcommand("make-toy", "Write the synthetic shape dataset");
  mk->add_option("--out", mt.out, "Output directory")->required();
  mk->add_option("--train", mt.fixture.num_train, "Training images");
  mk->add_option("--test", mt.fixture.num_test, "Test images");
  mk->add_option("--size", mt.fixture.image_size, "Image side in pixels");
  mk->add_option("--seed", mt.fixture.seed, "Seed for the attribute draws");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (p->parsed()) {
      const auto meta = cli::prepare_data(prep);
      std::cout << "prepared " << meta.at("records") << " records (" << meta.at("captions_per_image")
                << " captions each, " << meta.at("image_size") << " px), vocabulary " << meta.at("vocab_size")
                << " tokens, in " << prep.out.string() << "\n";
    } else if (pd->parsed()) {
      pre.config_file = pf.config_file;
      pre.overrides = pf.patch();
      std::cout << cli::cmd_pretrain_damsm(pre, std::cout).string() << "\n";
    } else if (tr->parsed()) {
      tc.config_file = tf.config_file;
      tc.overrides = tf.patch();
      std::cout << cli::cmd_train(tc, std::cout).string() << "\n";
    } else if (sa->parsed()) {
      sc.seed = sample_seed;
      cli::cmd_sample(sc, std::cout);
    } else if (ev->parsed()) {
      ec.seed = eval_seed;
      cli::cmd_evaluate(ec, std::cout);
    } else if (ea->parsed()) {
      ac.seed = attn_seed;
      cli::cmd_export_attn(ac, std::cout);
    } else if (mk->parsed()) {
      cli::cmd_make_toy(mt, std::cout);
    }
  } catch (const cli::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
