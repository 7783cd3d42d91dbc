#pragma once

// Synthetic shape corpus: one coloured shape per image, with five
// template captions describing colour, shape, size, position and
// background. Fully determined by (count, image_size, seed).

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ftgan/core/random.hpp"
#include "ftgan/corpus/manifest.hpp"

namespace ftgan::corpus {

struct ShapeSpec {
  int color = 0;
  int shape = 0;
  int background = 0;
  bool large = true;
  int position = 0;  // 0 centre, 1 left, 2 right, 3 top, 4 bottom
};

struct FixtureOptions {
  int num_train = 8;
  int num_test = 0;
  int image_size = 64;
  std::uint64_t seed = 0;
  int min_freq = 1;
  int t_max = 18;
};

namespace fixture {

struct Color {
  const char* name;
  std::array<std::uint8_t, 3> rgb;
};

inline constexpr std::array<Color, 6> kColors{{{"red", {220, 30, 30}},
                                               {"green", {30, 170, 40}},
                                               {"blue", {30, 60, 220}},
                                               {"yellow", {235, 215, 30}},
                                               {"purple", {140, 40, 170}},
                                               {"orange", {245, 140, 20}}}};
inline constexpr std::array<const char*, 3> kShapes{"circle", "square", "triangle"};
inline constexpr std::array<Color, 3> kBackgrounds{{{"white", {250, 250, 250}},
                                                    {"black", {15, 15, 15}},
                                                    {"gray", {128, 128, 128}}}};
inline constexpr std::array<const char*, 5> kPositions{"center", "left", "right", "top", "bottom"};

/// Spec of item i. The first items cycle colour and shape on a white
/// centred background; later items draw the remaining attributes from
/// the seed.
inline ShapeSpec spec_for(int i, std::uint64_t seed) {
  ShapeSpec s;
  s.color = i % 4;
  s.shape = i % 3;
  if (i < 12) return s;
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i), 7));
  s.color = static_cast<int>(rng.below(kColors.size()));
  s.shape = static_cast<int>(rng.below(kShapes.size()));
  s.background = static_cast<int>(rng.below(kBackgrounds.size()));
  s.large = rng.below(2) == 0;
  s.position = static_cast<int>(rng.below(kPositions.size()));
  return s;
}

inline bool inside(const ShapeSpec& s, double x, double y) {
  switch (s.shape) {
    case 0:
      return x * x + y * y <= 1.0;
    case 1:
      return std::abs(x) <= 0.85 && std::abs(y) <= 0.85;
    default:
      // apex up, base at y = 0.8
      return y <= 0.8 && y >= -0.9 && std::abs(x) <= (y + 0.9) / 1.7;
  }
}

/// Rasterize with 4x4 supersampling.
inline Image render(const ShapeSpec& s, int size) {
  Image img(size, size);
  const double radius = size * (s.large ? 0.34 : 0.2);
  double cx = size / 2.0, cy = size / 2.0;
  const double off = size * 0.22;
  if (s.position == 1) cx -= off;
  if (s.position == 2) cx += off;
  if (s.position == 3) cy -= off;
  if (s.position == 4) cy += off;
  const auto& fg = kColors[static_cast<std::size_t>(s.color)].rgb;
  const auto& bg = kBackgrounds[static_cast<std::size_t>(s.background)].rgb;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx) {
          const double px = (x + (sx + 0.5) / 4.0 - cx) / radius;
          const double py = (y + (sy + 0.5) / 4.0 - cy) / radius;
          hits += inside(s, px, py) ? 1 : 0;
        }
      auto* p = img.pixel(x, y);
      for (int c = 0; c < 3; ++c) p[c] = static_cast<std::uint8_t>((fg[c] * hits + bg[c] * (16 - hits) + 8) / 16);
    }
  return img;
}

inline std::vector<std::string> captions(const ShapeSpec& s) {
  const std::string color = kColors[static_cast<std::size_t>(s.color)].name;
  const std::string shape = kShapes[static_cast<std::size_t>(s.shape)];
  const std::string bg = kBackgrounds[static_cast<std::size_t>(s.background)].name;
  const std::string size = s.large ? "large" : "small";
  const std::string pos = kPositions[static_cast<std::size_t>(s.position)];
  return {"a " + color + " " + shape + " on a " + bg + " background",
          "a " + size + " " + color + " " + shape,
          "the picture shows a " + color + " " + shape + " in the " + pos,
          "there is a " + shape + " that is " + color,
          "a " + bg + " image with a " + color + " " + shape};
}

}  // namespace fixture

/// Write `num_train + num_test` images plus manifest.jsonl and
/// dataset.meta under `dir`. Returns the manifest path.
inline std::filesystem::path write_shape_fixture(const std::filesystem::path& dir, const FixtureOptions& opt = {}) {
  FTGAN_EXPECTS(opt.image_size >= 8, "fixture image_size must be >= 8");
  DatasetManifest m;
  const int n = opt.num_train + opt.num_test;
  for (int i = 0; i < n; ++i) {
    const auto spec = fixture::spec_for(i, opt.seed);
    char name[32];
    std::snprintf(name, sizeof(name), "images/%04d.png", i);
    write_png(dir / name, fixture::render(spec, opt.image_size));
    ManifestRecord r;
    r.image = name;
    r.image_path = dir / name;
    r.captions = fixture::captions(spec);
    r.split = i < opt.num_train ? Split::train : Split::test;
    m.records.push_back(std::move(r));
  }
  m.image_size = opt.image_size;
  m.captions_per_image = 5;
  m.meta.image_size = opt.image_size;
  m.meta.captions_per_image = 5;
  m.meta.min_freq = opt.min_freq;
  m.meta.t_max = opt.t_max;
  const auto path = dir / "manifest.jsonl";
  save_manifest(path, m);
  return path;
}

}  // namespace ftgan::corpus
