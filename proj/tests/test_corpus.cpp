#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "ftgan/corpus/batch.hpp"
#include "ftgan/corpus/fixture.hpp"

using namespace ftgan;
using namespace ftgan::corpus;
namespace fs = std::filesystem;

namespace {

const fs::path kToy = fs::path(FTGAN_TEST_DATA) / "toy8";

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ftgan_corpus_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream os(p);
  for (const auto& l : lines) os << l << "\n";
}

// Plain block average for an integer factor; independent of resize_planar.
std::vector<float> block_average(const std::vector<float>& src, int size, int factor) {
  const int out = size / factor;
  std::vector<float> r(3 * static_cast<std::size_t>(out) * out);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < out; ++y)
      for (int x = 0; x < out; ++x) {
        double acc = 0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx)
            acc += src[(static_cast<std::size_t>(c) * size + y * factor + dy) * size + x * factor + dx];
        r[(static_cast<std::size_t>(c) * out + y) * out + x] = static_cast<float>(acc / (factor * factor));
      }
  return r;
}

Corpus toy_corpus() {
  auto m = load_manifest(kToy / "manifest.jsonl");
  auto v = build_vocabulary(m);
  return Corpus(std::move(m), std::move(v));
}

}  // namespace

TEST(Tokenizer, LowercasesAndStripsPunctuation) {
  EXPECT_EQ(tokenize("The woman has blond hair."),
            (std::vector<std::string>{"the", "woman", "has", "blond", "hair"}));
  EXPECT_EQ(tokenize("  red,blue\t--  GREEN!\n"), (std::vector<std::string>{"red", "blue", "green"}));
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_TRUE(tokenize(" ... ").empty());
}

TEST(Vocabulary, CountsDistinctWords) {
  // "a red bird" / "a red beak": the distinct lowercase words are a, red,
  // bird, beak.
  auto v = Vocabulary::build({"a red bird", "a red beak"}, 1);
  EXPECT_EQ(v.size(), Vocabulary::kNumSpecial + 4);
  // Frequency first, then lexicographic.
  EXPECT_EQ(v.id("a"), 3);
  EXPECT_EQ(v.id("red"), 4);
  EXPECT_EQ(v.id("beak"), 5);
  EXPECT_EQ(v.id("bird"), 6);
}

TEST(Vocabulary, EmptyCorpusHasOnlySpecials) {
  auto v = Vocabulary::build({}, 1);
  EXPECT_EQ(v.size(), 3);
  EXPECT_EQ(v.token(Vocabulary::kPad), "<pad>");
  EXPECT_EQ(v.token(Vocabulary::kUnknown), "<unk>");
  EXPECT_EQ(v.token(Vocabulary::kEnd), "<end>");
}

TEST(Vocabulary, MinFreqAndUnknownLookup) {
  auto v = Vocabulary::build({"a red bird", "a red beak"}, 2);
  EXPECT_EQ(v.size(), 5);
  EXPECT_EQ(v.id("bird"), Vocabulary::kUnknown);
  EXPECT_EQ(v.id("never-seen"), Vocabulary::kUnknown);
  EXPECT_THROW(Vocabulary::build({"x"}, 0), ContractViolation);
}

TEST(Vocabulary, DeterministicAndBijective) {
  auto m = load_manifest(kToy / "manifest.jsonl");
  auto a = build_vocabulary(m), b = build_vocabulary(load_manifest(kToy / "manifest.jsonl"));
  EXPECT_EQ(a.tokens(), b.tokens());
  std::set<std::string> seen;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.id(a.token(i)), i);
    EXPECT_TRUE(seen.insert(a.token(i)).second);
  }
  auto dir = temp_dir("vocab");
  a.save(dir / "vocab.json");
  EXPECT_EQ(Vocabulary::load(dir / "vocab.json"), a);
}

TEST(EncodeCaption, Examples) {
  auto v = Vocabulary::build({"the woman has blond hair"}, 1);
  auto e = v.encode("The woman has blond hair.", 18);
  EXPECT_EQ(e.length, 5);
  ASSERT_EQ(e.ids.size(), 18u);
  const char* words[] = {"the", "woman", "has", "blond", "hair"};
  for (int i = 0; i < 5; ++i) EXPECT_EQ(e.ids[i], v.id(words[i]));
  for (int i = 5; i < 18; ++i) EXPECT_EQ(e.ids[i], Vocabulary::kPad);

  auto empty = v.encode("", 18);
  EXPECT_EQ(empty.length, 0);
  EXPECT_EQ(empty.ids, std::vector<std::int64_t>(18, Vocabulary::kPad));

  std::string long_caption;
  for (int i = 0; i < 30; ++i) long_caption += "w" + std::to_string(i) + " ";
  auto lv = Vocabulary::build({long_caption}, 1);
  auto le = lv.encode(long_caption, 18);
  EXPECT_EQ(le.length, 18);
  for (int i = 0; i < 18; ++i) EXPECT_EQ(lv.token(le.ids[i]), "w" + std::to_string(i));
  EXPECT_THROW(v.encode("x", 0), ContractViolation);
}

TEST(EncodeCaption, DecodeRoundTripUpToTruncationAndUnknowns) {
  auto c = toy_corpus();
  const auto& v = c.vocabulary();
  Rng rng(4);
  std::vector<std::string> pool = v.tokens();
  pool.push_back("zebra");
  pool.push_back("quux");
  for (int trial = 0; trial < 200; ++trial) {
    const int n = static_cast<int>(rng.below(25));
    std::vector<std::string> words;
    std::string text;
    for (int i = 0; i < n; ++i) {
      auto w = pool[3 + rng.below(pool.size() - 3)];
      words.push_back(w);
      text += (i ? (rng.below(2) ? " " : ", ") : "") + w;
    }
    const std::int64_t t_max = 1 + static_cast<std::int64_t>(rng.below(20));
    auto e = v.encode(text, t_max);
    auto dec = v.decode(e.ids, e.length);
    ASSERT_EQ(e.length, std::min<std::int64_t>(n, t_max));
    for (std::int64_t i = 0; i < e.length; ++i)
      EXPECT_EQ(dec[i], v.contains(words[i]) ? words[i] : std::string("<unk>"));
  }
}

TEST(Manifest, LoadsBundledToyCorpus) {
  auto m = load_manifest(kToy / "manifest.jsonl");
  EXPECT_EQ(m.records.size(), 8u);
  EXPECT_EQ(m.captions_per_image, 5);
  EXPECT_EQ(m.image_size, 64);
  EXPECT_EQ(m.records[0].captions[0], "a red circle on a white background");
}

TEST(Manifest, EmptyManifestIsValid) {
  auto dir = temp_dir("empty");
  write_lines(dir / "manifest.jsonl", {});
  auto m = load_manifest(dir / "manifest.jsonl");
  EXPECT_TRUE(m.records.empty());
  EXPECT_EQ(build_vocabulary(m).size(), 3);
}

TEST(Manifest, MissingImageNamesTheRecord) {
  auto dir = temp_dir("missing");
  write_lines(dir / "manifest.jsonl", {R"({"image": "nope.png", "captions": ["a b"], "split": "train"})"});
  try {
    load_manifest(dir / "manifest.jsonl");
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("nope.png"), std::string::npos) << e.what();
  }
}

TEST(Manifest, ValidationFailures) {
  auto dir = temp_dir("invalid");
  write_png(dir / "a.png", Image(8, 8, 10));
  write_png(dir / "b.png", Image(8, 8, 20));
  write_lines(dir / "uneven.jsonl", {R"({"image": "a.png", "captions": ["x y", "z"], "split": "train"})",
                                     R"({"image": "b.png", "captions": ["x y"], "split": "test"})"});
  EXPECT_THROW(load_manifest(dir / "uneven.jsonl"), ValidationError);
  write_lines(dir / "dup.jsonl", {R"({"image": "a.png", "captions": ["x"], "split": "train"})",
                                  R"({"image": "./a.png", "captions": ["y"], "split": "test"})"});
  EXPECT_THROW(load_manifest(dir / "dup.jsonl"), ValidationError);
  write_lines(dir / "blank.jsonl", {R"({"image": "a.png", "captions": [" .. "], "split": "train"})"});
  EXPECT_THROW(load_manifest(dir / "blank.jsonl"), ValidationError);
  write_lines(dir / "split.jsonl", {R"({"image": "a.png", "captions": ["x"], "split": "val"})"});
  EXPECT_THROW(load_manifest(dir / "split.jsonl"), ValidationError);
  write_lines(dir / "syntax.jsonl", {R"({"image": "a.png", "captions": )"});
  EXPECT_THROW(load_manifest(dir / "syntax.jsonl"), LoadError);
}

TEST(Manifest, FullSizeThousandRecords) {
  auto dir = temp_dir("fullsize");
  std::vector<std::string> lines;
  for (int i = 0; i < 1000; ++i) {
    Image img(256, 256, static_cast<std::uint8_t>(i % 256));
    img.pixel(i % 256, i / 256)[0] = 1;
    const std::string name = "img" + std::to_string(i) + ".png";
    write_png(dir / name, img);
    nlohmann::json j = {{"image", name},
                        {"captions", {"the woman has blond hair", "she is smiling", "a young face",
                                      "the person wears glasses", "short hair and a beard"}},
                        {"split", i < 800 ? "train" : "test"}};
    lines.push_back(j.dump());
  }
  write_lines(dir / "manifest.jsonl", lines);
  auto m = load_manifest(dir / "manifest.jsonl");
  EXPECT_EQ(m.records.size(), 1000u);
  EXPECT_EQ(m.image_size, 256);
  EXPECT_EQ(m.captions_per_image, 5);

  Corpus c(std::move(m), Vocabulary::build({"the woman has blond hair"}, 1));
  auto b = c.make_batch<float>({0, 1, 2, 3}, CaptionChoice::fixed(0), {64, 128, 256});
  ASSERT_EQ(b.images.images.size(), 3u);
  EXPECT_EQ(b.images.images[0].shape(), (ag::Shape{4, 3, 64, 64}));
  EXPECT_EQ(b.images.images[1].shape(), (ag::Shape{4, 3, 128, 128}));
  EXPECT_EQ(b.images.images[2].shape(), (ag::Shape{4, 3, 256, 256}));
  EXPECT_EQ(b.captions.batch(), 4);
}

TEST(Manifest, SplitsAreDisjoint) {
  auto dir = temp_dir("split");
  auto path = write_shape_fixture(dir, {.num_train = 10, .num_test = 6, .image_size = 16});
  auto m = load_manifest(path);
  auto train = m.indices(Split::train), test = m.indices(Split::test);
  EXPECT_EQ(train.size() + test.size(), m.records.size());
  std::set<std::string> a, b;
  for (auto i : train) a.insert(m.records[i].image);
  for (auto i : test) b.insert(m.records[i].image);
  for (const auto& x : a) EXPECT_EQ(b.count(x), 0u);
}

TEST(MakeBatch, LengthsAndPadding) {
  auto c = toy_corpus();
  auto b = c.make_batch<float>({0, 1, 2, 3, 4}, CaptionChoice::random(9), {16});
  EXPECT_EQ(b.captions.batch(), 5);
  std::int64_t longest = 0;
  for (std::int64_t i = 0; i < 5; ++i) {
    const auto len = b.captions.lengths[i];
    longest = std::max(longest, len);
    EXPECT_LE(len, b.captions.t_max);
    for (std::int64_t t = 0; t < b.captions.t_max; ++t) {
      const auto id = b.captions.at(i, t);
      EXPECT_GE(id, 0);
      EXPECT_LT(id, c.vocabulary().size());
      if (t >= len) EXPECT_EQ(id, Vocabulary::kPad);
      else EXPECT_NE(id, Vocabulary::kPad);
    }
  }
  EXPECT_EQ(longest, b.captions.t_max);
}

TEST(MakeBatch, FixedCaptionIsDeterministic) {
  auto c = toy_corpus();
  auto a = c.make_batch<float>({3}, CaptionChoice::fixed(0), {16, 32, 64});
  auto b = toy_corpus().make_batch<float>({3}, CaptionChoice::fixed(0), {16, 32, 64});
  EXPECT_EQ(a.captions, b.captions);
  for (int s = 0; s < 3; ++s) EXPECT_EQ(a.images.images[s].values(), b.images.images[s].values());
  EXPECT_EQ(c.vocabulary().decode(a.captions.row(0), a.captions.lengths[0]),
            tokenize(c.manifest().records[3].captions[0]));
}

TEST(MakeBatch, ToyPyramidMatchesReferenceResize) {
  auto c = toy_corpus();
  auto b = c.make_batch<float>({0, 5}, CaptionChoice::fixed(1), {16, 32, 64});
  for (int j = 0; j < 2; ++j) {
    const auto src = to_planar(read_image(c.manifest().records[b.records[j]].image_path));
    const auto& full = b.images.images[2].values();
    std::vector<float> top(full.begin() + j * 3 * 64 * 64, full.begin() + (j + 1) * 3 * 64 * 64);
    EXPECT_EQ(top, src);
    for (int s = 0; s < 2; ++s) {
      const int scale = 16 << s;
      const auto ref = block_average(src, 64, 64 / scale);
      const auto& got = b.images.images[s].values();
      const std::size_t per = 3 * scale * scale;
      for (std::size_t i = 0; i < per; ++i) ASSERT_NEAR(got[j * per + i], ref[i], 1e-5) << "scale " << scale;
      // Pyramid consistency: the largest level downsampled matches this level.
      const auto from_top = block_average(top, 64, 64 / scale);
      for (std::size_t i = 0; i < per; ++i) ASSERT_NEAR(got[j * per + i], from_top[i], 1e-5);
    }
  }
  for (float x : b.images.images[2].values()) {
    EXPECT_GE(x, -1.f);
    EXPECT_LE(x, 1.f);
  }
}

TEST(MakeBatch, RejectsBadArguments) {
  auto c = toy_corpus();
  EXPECT_THROW(c.make_batch<float>({8}, CaptionChoice::fixed(0), {16}), ContractViolation);
  EXPECT_THROW(c.make_batch<float>({0}, CaptionChoice::fixed(5), {16}), ContractViolation);
  EXPECT_THROW(c.make_batch<float>({0}, CaptionChoice::fixed(0), {32, 16}), ContractViolation);
}

TEST(MakeBatch, CorruptImageNamesTheFile) {
  auto dir = temp_dir("corrupt");
  auto path = write_shape_fixture(dir, {.num_train = 2, .image_size = 16});
  {
    std::ofstream os(dir / "images/0001.png", std::ios::binary | std::ios::trunc);
    os << "\x89PNG\r\n\x1a\n garbage";
  }
  auto m = load_manifest(path);
  Corpus c(m, build_vocabulary(m));
  try {
    c.make_batch<float>({1}, CaptionChoice::fixed(0), {16});
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("0001.png"), std::string::npos) << e.what();
  }
}

TEST(MakeBatch, TrainingBatchesAreSeededByStep) {
  auto c = toy_corpus();
  auto a = c.training_batch<float>(7, 12, 4, {16, 32});
  auto b = toy_corpus().training_batch<float>(7, 12, 4, {16, 32});
  EXPECT_EQ(a.records, b.records);
  EXPECT_EQ(a.caption_index, b.caption_index);
  EXPECT_EQ(a.captions, b.captions);
  for (int s = 0; s < 2; ++s) EXPECT_EQ(a.images.images[s].values(), b.images.images[s].values());
  std::set<std::size_t> uniq(a.records.begin(), a.records.end());
  EXPECT_EQ(uniq.size(), 4u);
  // Different steps see different draws somewhere in the first few steps.
  bool differs = false;
  for (int s = 13; s < 18; ++s) differs |= c.training_batch<float>(7, s, 4, {16}).records != a.records;
  EXPECT_TRUE(differs);
}

TEST(Prefetcher, OrderIndependentOfWorkerCount) {
  auto c = toy_corpus();
  auto collect = [&](int workers) {
    Prefetcher<Batch<float>> p([&](std::int64_t step) { return c.training_batch<float>(3, step, 3, {16, 32}); }, 5,
                               workers, 3);
    std::vector<std::vector<float>> out;
    for (int i = 0; i < 12; ++i) {
      auto b = p.next();
      out.push_back(b.images.images[0].values());
      out.back().insert(out.back().end(), b.captions.token_ids.begin(), b.captions.token_ids.end());
    }
    return out;
  };
  auto sync = collect(0);
  EXPECT_EQ(collect(1), sync);
  EXPECT_EQ(collect(3), sync);
}

TEST(Prefetcher, PropagatesErrors) {
  Prefetcher<int> p(
      [](std::int64_t s) -> int {
        if (s == 2) throw LoadError("boom");
        return static_cast<int>(s);
      },
      0, 2);
  EXPECT_EQ(p.next(), 0);
  EXPECT_EQ(p.next(), 1);
  EXPECT_THROW(p.next(), LoadError);
}

TEST(Image, PngAndPpmRoundTrip) {
  auto dir = temp_dir("io");
  Image img(5, 3);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(i * 17);
  write_png(dir / "x.png", img);
  write_ppm(dir / "x.ppm", img);
  EXPECT_EQ(read_image(dir / "x.png"), img);
  EXPECT_EQ(read_image(dir / "x.ppm"), img);
  EXPECT_EQ(probe_image_size(dir / "x.png"), std::make_pair(5, 3));
  auto planar = to_planar(img);
  EXPECT_EQ(from_planar(planar.data(), 5, 3), img);
  EXPECT_THROW(read_image(dir / "absent.png"), LoadError);
}

TEST(Image, NonIntegerResizePreservesMean) {
  Rng rng(8);
  std::vector<float> src(3 * 10 * 10);
  for (auto& x : src) x = static_cast<float>(rng.uniform(-1, 1));
  auto out = resize_planar(src, 3, 10, 10, 7, 7);
  for (int c = 0; c < 3; ++c) {
    double a = 0, b = 0;
    for (int i = 0; i < 100; ++i) a += src[c * 100 + i];
    for (int i = 0; i < 49; ++i) b += out[c * 49 + i];
    EXPECT_NEAR(a / 100, b / 49, 1e-6);
  }
}

TEST(Fixture, RegenerationMatchesBundledFiles) {
  auto dir = temp_dir("regen");
  write_shape_fixture(dir, {});
  EXPECT_EQ(slurp(dir / "manifest.jsonl"), slurp(kToy / "manifest.jsonl"));
  for (int i = 0; i < 8; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "images/%04d.png", i);
    EXPECT_EQ(read_image(dir / name), read_image(kToy / name)) << name;
  }
}
