// Acceptance run: one PASS/FAIL line per criterion. Pass criterion
// numbers as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <set>
#include <string>

#include "ftgan/cli.hpp"
#include "ftgan/losses.hpp"
#include "support/gradcheck.hpp"

using namespace ftgan;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

corpus::Corpus toy8() {
  auto m = corpus::load_manifest(fs::path(FTGAN_TEST_DATA) / "toy8" / "manifest.jsonl");
  auto v = corpus::build_vocabulary(m);
  return corpus::Corpus(std::move(m), std::move(v));
}

ModelConfig tiny(std::int64_t vocab) {
  ModelConfig c;
  c.text = {vocab, 8, 4, 0.0};
  c.image = {64, 8, 4};
  c.generator.base_channels = 4;
  c.generator.text_dim = 8;
  c.generator.z_dim = 8;
  c.disc_channels = 4;
  c.disc_cond_channels = 4;
  return c;
}

template <class T>
ag::Tensor<T> normal(ag::Shape s, Rng& rng) {
  std::vector<T> v(static_cast<std::size_t>(ag::numel(s)));
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return ag::Tensor<T>(std::move(s), std::move(v));
}

template <class T>
WordFeatures<T> words(std::int64_t b, std::int64_t d, std::int64_t t, std::vector<std::int64_t> lengths, Rng& rng) {
  std::vector<T> v(static_cast<std::size_t>(b * d * t), T(0));
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t k = 0; k < d; ++k)
      for (std::int64_t j = 0; j < lengths[i]; ++j) v[(i * d + k) * t + j] = static_cast<T>(rng.normal());
  WordFeatures<T> w;
  w.e = ag::Tensor<T>({b, d, t}, std::move(v));
  w.lengths = std::move(lengths);
  w.t_max = t;
  return w;
}

// 1 ----------------------------------------------------------------------
Outcome loss_arithmetic() {
  Clock clock;
  const double ln2 = std::numbers::ln2;
  const double g = generator_stage_loss({0.5}, {0.5});
  const double d = discriminator_loss({0.5}, {0.5}, {0.5}, {0.5});
  const double total = total_generator_loss({0.6931, 0.6931, 0.6931}, 0.2, 5.0, 3);
  // Composition oracle summed by hand: 3 * 0.6931 + 5 * 0.2.
  const bool ok = std::abs(g - ln2) <= 1e-9 && std::abs(d - 2 * ln2) <= 1e-9 && total == 0.6931 + 0.6931 + 0.6931 + 1.0 &&
                  std::abs(total - 3.0793) <= 1e-12;
  const double t = clock.seconds();
  return {ok && t < 1.0, fmt("L_stage %.12f, L_D %.12f, L_G %.12f, %.3f s", g, d, total, t)};
}

// 2 ----------------------------------------------------------------------
Outcome gradient_checks() {
  Clock clock;
  Rng rng(2);
  // D = 8, T = 3, batch = 2.
  DiscriminatorConfig dc;
  dc.scale = 8;
  dc.base_channels = 2;
  dc.text_dim = 8;
  dc.cond_channels = 2;
  Discriminator<double> disc(dc, rng);
  auto fake = ftgan::testing::random_tensor({2, 3, 8, 8}, rng);
  auto real = ftgan::testing::random_tensor({2, 3, 8, 8}, rng);
  auto sent = ftgan::testing::random_tensor({2, 8}, rng);
  std::vector<ag::Tensor<double>> d_inputs{fake, real, sent};
  for (auto& p : disc.parameters()) d_inputs.push_back(p.tensor);
  const auto rs = ftgan::testing::grad_check([&] { return generator_stage_loss(disc.forward(fake, sent)); },
                                             d_inputs, 1e-5);
  const auto rd = ftgan::testing::grad_check(
      [&] { return discriminator_loss(disc.forward(real, sent), disc.forward(fake, sent)); }, d_inputs, 1e-5);

  TextEncoder<double> text({6, 4, 4, 0.0}, rng);
  ImageEncoder<double> image({16, 8, 2}, rng);  // 2x2 regions
  auto imgs = ftgan::testing::random_tensor({2, 3, 16, 16}, rng);
  const auto caps = corpus::pack_captions({{{3, 4, 5}, 3}, {{4, 3, 0}, 2}});
  std::vector<ag::Tensor<double>> m_inputs{imgs};
  for (auto& p : text.parameters()) m_inputs.push_back(p.tensor);
  for (auto& p : image.parameters()) m_inputs.push_back(p.tensor);
  text.set_requires_grad(true);
  image.set_requires_grad(true);
  // The 0.02-scale init leaves region features near zero where cosine
  // normalisation is too steep for central differences; check at a
  // well-scaled point instead.
  for (auto& p : image.parameters())
    for (auto& x : p.tensor.mutable_data()) x = rng.uniform(-0.5, 0.5);
  const auto rm = ftgan::testing::grad_check(
      [&] { return damsm_loss(image.encode(imgs), text.encode(caps), DamsmConfig{}).total; }, m_inputs, 1e-5);

  const double worst = std::max({rs.worst_rel, rd.worst_rel, rm.worst_rel});
  const double t = clock.seconds();
  return {worst <= 1e-2 && t < 60.0,
          fmt("worst relative error L_stage %.2e, L_D %.2e, L_DAMSM %.2e (%s) over %zu entries, %.1f s", rs.worst_rel,
              rd.worst_rel, rm.worst_rel, rm.worst_where.c_str(), rs.checked + rd.checked + rm.checked, t)};
}

// 3 ----------------------------------------------------------------------
Outcome mode_ablation() {
  Clock clock;
  auto data = toy8();
  double delta[2];
  for (int k = 0; k < 2; ++k) {
    TrainConfig tc;
    tc.mode = k == 0 ? TrainMode::fully_trained : TrainMode::split;
    tc.batch_size = 4;
    tc.seed = 3;
    Trainer<float> tr(tc, Models<float>::create(tiny(data.vocabulary().size()), 3));
    const auto before = nn::snapshot(tr.models().text.parameters());
    tr.step(tr.next_batch(data));
    delta[k] = nn::delta_norm(tr.models().text.parameters(), before);
  }
  const double t = clock.seconds();
  return {delta[0] > 0 && delta[1] == 0.0 && t < 60.0,
          fmt("|dtheta_text| fully-trained %.3e, split %.1f, %.1f s", delta[0], delta[1], t)};
}

// 4 ----------------------------------------------------------------------
Outcome attention_properties() {
  Rng rng(4);
  WordAttention<double> attn(8, 6, rng);
  double worst = 0;
  double pad_mass = 0;
  for (int draw = 0; draw < 100; ++draw) {
    const std::int64_t b = 1 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t t = 1 + static_cast<std::int64_t>(rng.below(7));
    std::vector<std::int64_t> lengths;
    for (std::int64_t i = 0; i < b; ++i) lengths.push_back(1 + static_cast<std::int64_t>(rng.below(t)));
    auto w = words<double>(b, 8, t, lengths, rng);
    auto r = attn.forward(normal<double>({b, 6, 4, 5}, rng), w);
    const std::int64_t hw = 20;
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t p = 0; p < hw; ++p) {
        double s = 0;
        for (std::int64_t j = 0; j < t; ++j) {
          const double a = r.weights.data()[(i * hw + p) * t + j];
          if (j >= lengths[i]) pad_mass += std::abs(a);
          s += a;
        }
        worst = std::max(worst, std::abs(s - 1.0));
      }
  }
  return {worst <= 1e-6 && pad_mass == 0.0,
          fmt("100 draws: max |sum - 1| %.2e, total pad attention %.1f", worst, pad_mass)};
}

// 5 ----------------------------------------------------------------------
Outcome architecture_contracts() {
  Rng rng(5);
  std::string why;
  for (auto cfg : {ModelConfig::desk(20).generator, GeneratorConfig::full_scale()}) {
    cfg.base_channels = 2;
    cfg.text_dim = 8;
    cfg.z_dim = 4;
    Generator<float> g(cfg, rng);
    auto out = g.synthesize(normal<float>({2, 8}, rng), sample_noise<float>(2, 4, rng), words<float>(2, 8, 3, {3, 2}, rng));
    for (std::size_t i = 0; i < cfg.stage_scales.size(); ++i)
      if (out.images[i].shape() != ag::Shape{2, 3, cfg.stage_scales[i], cfg.stage_scales[i]})
        why += " stage " + std::to_string(i) + " shape " + ag::to_string(out.images[i].shape());
  }
  for (int s : {16, 32, 64, 128, 256}) {
    Discriminator<float> d({s, 2, 8, 2, false}, rng);
    const auto f = d.features(normal<float>({1, 3, s, s}, rng));
    if (d.block_count() != static_cast<int>(std::log2(s)) - 2 || f.dim(2) != 4 || f.dim(3) != 4)
      why += " D" + std::to_string(s) + " blocks " + std::to_string(d.block_count());
  }
  auto cfg = ModelConfig::desk(20).generator;
  Generator<float> g(cfg, rng);
  auto z = sample_noise<float>(2, cfg.z_dim, rng);
  for (std::size_t i = 0; i < cfg.noise_injection_scales.size(); ++i) {
    const int s = cfg.noise_injection_scales[i];
    auto fm = normal<float>({2, cfg.stage1_channels(log2_exact(s) - 2), s, s}, rng);
    auto zero = ag::Tensor<float>::zeros(fm.shape());
    auto& w = g.noise_weight(i);
    const auto saved = w.values();
    const auto base = g.inject_noise(zero, z, i).values();
    for (auto& x : w.mutable_data()) x *= 2;
    const auto doubled = g.inject_noise(zero, z, i).values();
    for (std::size_t k = 0; k < base.size(); ++k)
      if (doubled[k] != 2 * base[k]) {
        why += " injection " + std::to_string(i) + " not linear in W";
        break;
      }
    for (auto& x : w.mutable_data()) x = 0;
    if (g.inject_noise(fm, z, i).values() != fm.values()) why += " injection " + std::to_string(i) + " W=0 not identity";
    std::copy(saved.begin(), saved.end(), w.mutable_data().begin());
  }
  return {why.empty(), why.empty() ? "stages 16/32/64 and 64/128/256, D blocks 2..6, injection at 4/8/16 bitwise"
                                   : "violations:" + why};
}

// 6 ----------------------------------------------------------------------
Outcome metric_oracles() {
  Clock clock;
  using metrics::Vector;
  Rng rng(6);
  auto gauss = [&](std::size_t n, std::size_t d, double mean) {
    std::vector<Vector> out(n, Vector(d));
    for (auto& v : out)
      for (auto& x : v) x = mean + rng.normal();
    return out;
  };
  const auto a = gauss(200, 6, 0.0), b = gauss(150, 6, 0.5);
  const double self = metrics::fid(a, a).value;
  const double asym = std::abs(metrics::fid(a, b).value - metrics::fid(b, a).value);
  const double g1 = metrics::fid(gauss(10000, 1, 0.0), gauss(10000, 1, 3.0)).value;
  const double fss_same = metrics::fss(a, a).value;
  const double fss_orth = metrics::fss({{1, 0, 0}, {0, 2, 0}}, {{0, 3, 0}, {0, 0, 1}}).value;
  const double fsd_same = metrics::fsd(a, a);
  const double is_uniform = metrics::inception_score(std::vector<Vector>(100, Vector(10, 0.1)), 10).mean;
  const bool ok = self <= 1e-6 && asym <= 1e-8 && std::abs(g1 - 9.0) <= 0.5 && std::abs(fss_same - 100.0) <= 1e-9 &&
                  std::abs(fss_orth) <= 1e-12 && fsd_same == 0.0 && std::abs(is_uniform - 1.0) <= 1e-6;
  const double t = clock.seconds();
  return {ok && t < 60.0,
          fmt("fid(A,A) %.1e, |fid(A,B)-fid(B,A)| %.1e, 1-D FID %.3f, FSS %.6f%% / %.1e%%, FSD %.1f, IS %.9f, %.1f s",
              self, asym, g1, fss_same, fss_orth, fsd_same, is_uniform, t)};
}

// 7 ----------------------------------------------------------------------
// Oracle run on this configuration (seed 1): FID 35.07 at step 0 and
// 29.83 at step 2000. The threshold asks for half of that drop.
constexpr double kFidDropRequired = 2.5;

Outcome toy_run() {
  Clock clock;
  auto data = toy8();
  const std::uint64_t seed = 1;
  auto models = Models<float>::create(ModelConfig::desk(data.vocabulary().size()), seed);
  PretrainOptions po;
  po.epochs = 50;
  po.seed = seed;
  pretrain_damsm(data, models.text, models.image, po);

  metrics::ToyBackend backend;
  std::vector<corpus::Image> reals;
  std::vector<std::string> captions;
  for (auto i : data.manifest().indices(corpus::Split::train)) {
    const auto& r = data.manifest().records[i];
    reals.push_back(corpus::resize(corpus::read_image(r.image_path), 64, 64));
    captions.insert(captions.end(), r.captions.begin(), r.captions.end());
  }
  const auto real_features = metrics::embed_all(backend, reals);
  TrainConfig tc;
  tc.seed = seed;
  tc.max_steps = 2000;
  Trainer<float> trainer(tc, std::move(models));
  auto fid_now = [&] {
    auto set = sample(trainer.models(), data.vocabulary(), captions, 2, seed);
    std::vector<corpus::Image> fake;
    for (auto& row : set.images) fake.insert(fake.end(), row.begin(), row.end());
    return metrics::fid(real_features, metrics::embed_all(backend, fake)).value;
  };
  const double fid0 = fid_now();
  Clock train_clock;
  train(trainer, data);
  const double train_s = train_clock.seconds();
  const double fid1 = fid_now();
  const double total = clock.seconds();
  return {trainer.step_count() == 2000 && fid1 < fid0 - kFidDropRequired && total <= 1800.0,
          fmt("FID %.4f -> %.4f after %lld steps (need a drop > %.1f), training %.0f s, total %.0f s", fid0, fid1,
              static_cast<long long>(trainer.step_count()), kFidDropRequired, train_s, total)};
}

// 8 ----------------------------------------------------------------------
Outcome reproducibility() {
  auto data = toy8();
  auto run = [&](std::int64_t steps, std::optional<fs::path> save_at = {}) {
    TrainConfig tc;
    tc.batch_size = 4;
    tc.seed = 8;
    tc.max_steps = steps;
    Trainer<float> tr(tc, Models<float>::create(tiny(data.vocabulary().size()), 8));
    std::vector<std::string> log;
    TrainOptions o;
    o.on_step = [&](const LossReport& r) { log.push_back(r.to_json().dump()); };
    if (save_at) o.checkpoint_dir = *save_at;
    train(tr, data, o);
    return log;
  };
  const auto a = run(6), b = run(6);
  const auto dir = fresh_dir("ftgan_accept_resume");
  auto first = run(3, dir);
  auto resumed = Trainer<float>::resume(dir, [] {
    TrainConfig tc;
    tc.batch_size = 4;
    tc.seed = 8;
    tc.max_steps = 6;
    return tc;
  }());
  TrainOptions o;
  o.on_step = [&](const LossReport& r) { first.push_back(r.to_json().dump()); };
  train(resumed, data, o);
  const bool same = a == b, resume_same = first == a;
  return {same && resume_same && a.size() == 6,
          fmt("identical logs over %zu steps: %s; resume at 3 matches steps 4-6: %s", a.size(), same ? "yes" : "no",
              resume_same ? "yes" : "no")};
}

// 9 ----------------------------------------------------------------------
int tool(const std::string& args) {
  const std::string cmd = std::string(FTGAN_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome protocol_fidelity() {
  Clock clock;
  const auto dir = fresh_dir("ftgan_accept_protocol");
  const auto s = dir.string();
  // 8 training and 40 test images, 5 captions each: 200 test captions.
  int rc = tool("make-toy --out " + s + "/toy --train 8 --test 40 --seed 9");
  rc = rc ? rc : tool("prepare-data --manifest " + s + "/toy/manifest.jsonl --out " + s + "/prep");
  rc = rc ? rc : tool("train --data " + s + "/prep --from-scratch --steps 2 --quiet --out " + s + "/train");
  rc = rc ? rc : tool("evaluate --checkpoint " + s + "/train --n-per-caption 10 --out " + s + "/eval");
  if (rc != 0) return {false, fmt("CLI exited with %d", rc)};
  std::size_t images = 0, reports = 0;
  for (const auto& f : fs::directory_iterator(dir / "eval" / "images")) images += f.path().extension() == ".png";
  for (const auto& f : fs::recursive_directory_iterator(dir / "eval")) reports += f.path().filename() == "metrics.json";
  std::ifstream is(dir / "eval" / "metrics.json");
  const auto j = nlohmann::json::parse(is);
  const bool ok = images == 2000 && reports == 1 && j.at("N") == 2000 && j.at("captions") == 200;
  return {ok, fmt("%zu images, %zu MetricReport (N = %d over %d captions), FID %.3f, %.0f s", images, reports,
                  j.at("N").get<int>(), j.at("captions").get<int>(), j.at("fid").get<double>(), clock.seconds())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"loss arithmetic oracles", loss_arithmetic},
      {"gradient checks", gradient_checks},
      {"mode ablation", mode_ablation},
      {"attention properties", attention_properties},
      {"architecture contracts", architecture_contracts},
      {"metric oracles", metric_oracles},
      {"end-to-end toy run", toy_run},
      {"reproducibility", reproducibility},
      {"protocol fidelity", protocol_fidelity},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int n = static_cast<int>(k) + 1;
    if (!only.empty() && !only.count(n)) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d %s: %s (%s)\n", n, o.pass ? "PASS" : "FAIL", criteria[k].first.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
