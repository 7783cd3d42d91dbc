#pragma once

// 8-bit RGB images: PNG/PPM file I/O, area resampling and conversion to
// the network's pixel range. Network-side pixels are planar [3, H, W]
// floats in [-1, 1]: v = byte / 127.5 - 1.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ftgan/core/error.hpp"

namespace ftgan::corpus {

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // interleaved, row-major

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::uint8_t* pixel(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* pixel(int x, int y) const {
    return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  bool operator==(const Image&) const = default;
};

namespace detail {

inline bool has_png_signature(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  unsigned char sig[8] = {};
  is.read(reinterpret_cast<char*>(sig), 8);
  return is.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0;
}

inline std::string read_ppm_token(std::istream& is) {
  std::string tok;
  char c;
  while (is.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok += c;
  }
  return tok;
}

inline Image read_ppm(const std::filesystem::path& path, bool header_only) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open image " + path.string());
  if (read_ppm_token(is) != "P6") throw LoadError(path.string() + ": unsupported image format");
  try {
    const int w = std::stoi(read_ppm_token(is));
    const int h = std::stoi(read_ppm_token(is));
    const int maxval = std::stoi(read_ppm_token(is));
    if (w <= 0 || h <= 0 || maxval != 255) throw LoadError(path.string() + ": unsupported PPM header");
    Image img;
    img.width = w;
    img.height = h;
    if (header_only) return img;
    img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
    is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (!is) throw LoadError(path.string() + ": truncated PPM data");
    return img;
  } catch (const std::logic_error&) {
    throw LoadError(path.string() + ": corrupt PPM header");
  }
}

}  // namespace detail

/// Decode an 8-bit RGB image (PNG of any colour type, or binary PPM).
inline Image read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw LoadError("image file not found: " + path.string());
  if (!detail::has_png_signature(path)) return detail::read_ppm(path, false);
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str()))
    throw LoadError(path.string() + ": " + png.message);
  png.format = PNG_FORMAT_RGB;
  Image img;
  img.width = static_cast<int>(png.width);
  img.height = static_cast<int>(png.height);
  img.rgb.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.rgb.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw LoadError(path.string() + ": " + msg);
  }
  return img;
}

/// Width and height without decoding pixel data.
inline std::pair<int, int> probe_image_size(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw LoadError("image file not found: " + path.string());
  if (!detail::has_png_signature(path)) {
    auto img = detail::read_ppm(path, true);
    return {img.width, img.height};
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str()))
    throw LoadError(path.string() + ": " + png.message);
  const std::pair<int, int> size{static_cast<int>(png.width), static_cast<int>(png.height)};
  png_image_free(&png);
  return size;
}

/// Lossless PNG output.
inline void write_png(const std::filesystem::path& path, const Image& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, img.rgb.data(), 0, nullptr))
    throw LoadError("cannot write " + path.string() + ": " + png.message);
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw LoadError("cannot write " + path.string());
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

/// Planar [3, H, W] floats in [-1, 1].
inline std::vector<float> to_planar(const Image& img) {
  const std::size_t hw = static_cast<std::size_t>(img.width) * img.height;
  std::vector<float> out(3 * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) out[c * hw + i] = static_cast<float>(img.rgb[i * 3 + c]) / 127.5f - 1.0f;
  return out;
}

/// Inverse of to_planar with rounding and clamping.
template <class T>
Image from_planar(const T* planar, int width, int height) {
  Image img(width, height);
  const std::size_t hw = static_cast<std::size_t>(width) * height;
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = (static_cast<double>(planar[c * hw + i]) + 1.0) * 127.5;
      img.rgb[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  return img;
}

namespace detail {

/// Row-sparse 1-D area weights: output pixel i averages source span
/// [i*in/out, (i+1)*in/out) weighted by overlap.
struct AreaWeights {
  std::vector<int> first;
  std::vector<std::vector<double>> w;
};

inline AreaWeights area_weights(int in, int out) {
  AreaWeights aw;
  const double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    const double lo = i * scale, hi = (i + 1) * scale;
    const int j0 = static_cast<int>(std::floor(lo));
    const int j1 = std::min(in, static_cast<int>(std::ceil(hi)));
    std::vector<double> row;
    for (int j = j0; j < j1; ++j) row.push_back((std::min<double>(hi, j + 1) - std::max<double>(lo, j)) / scale);
    aw.first.push_back(j0);
    aw.w.push_back(std::move(row));
  }
  return aw;
}

}  // namespace detail

/// Area (box-coverage) resampling of planar [C, H, W] data to `size` x `size`.
/// Downscaling by an integer factor is an exact block average.
inline std::vector<float> resize_planar(const std::vector<float>& src, int channels, int width, int height,
                                        int out_w, int out_h) {
  FTGAN_EXPECTS(out_w > 0 && out_h > 0, "resize to an empty image");
  const auto wx = detail::area_weights(width, out_w);
  const auto wy = detail::area_weights(height, out_h);
  std::vector<double> tmp(static_cast<std::size_t>(channels) * height * out_w, 0.0);
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < out_w; ++x) {
        double acc = 0;
        const float* row = src.data() + (static_cast<std::size_t>(c) * height + y) * width;
        for (std::size_t k = 0; k < wx.w[x].size(); ++k) acc += wx.w[x][k] * row[wx.first[x] + k];
        tmp[(static_cast<std::size_t>(c) * height + y) * out_w + x] = acc;
      }
  std::vector<float> out(static_cast<std::size_t>(channels) * out_h * out_w);
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) {
        double acc = 0;
        for (std::size_t k = 0; k < wy.w[y].size(); ++k)
          acc += wy.w[y][k] * tmp[(static_cast<std::size_t>(c) * height + wy.first[y] + k) * out_w + x];
        out[(static_cast<std::size_t>(c) * out_h + y) * out_w + x] = static_cast<float>(acc);
      }
  return out;
}

inline Image resize(const Image& img, int out_w, int out_h) {
  auto planar = resize_planar(to_planar(img), 3, img.width, img.height, out_w, out_h);
  return from_planar(planar.data(), out_w, out_h);
}

/// Tile equally sized images into a grid, row-major, with a gap.
inline Image tile(const std::vector<Image>& images, int columns, int gap = 2, std::uint8_t background = 255) {
  FTGAN_EXPECTS(!images.empty() && columns > 0, "tile needs at least one image");
  const int w = images.front().width, h = images.front().height;
  const int n = static_cast<int>(images.size());
  const int rows = (n + columns - 1) / columns;
  Image out(columns * w + (columns - 1) * gap, rows * h + (rows - 1) * gap, background);
  for (int i = 0; i < n; ++i) {
    FTGAN_EXPECTS(images[i].width == w && images[i].height == h, "tile: images differ in size");
    const int ox = (i % columns) * (w + gap), oy = (i / columns) * (h + gap);
    for (int y = 0; y < h; ++y) std::copy_n(images[i].pixel(0, y), w * 3, out.pixel(ox, oy + y));
  }
  return out;
}

/// 64-bit FNV-1a over the pixel bytes and dimensions; stable across runs.
inline std::uint64_t content_hash(const Image& img) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](std::uint8_t b) {
    h ^= b;
    h *= 0x100000001b3ULL;
  };
  for (int v : {img.width, img.height})
    for (int s = 0; s < 32; s += 8) feed(static_cast<std::uint8_t>(v >> s));
  for (auto b : img.rgb) feed(b);
  return h;
}

}  // namespace ftgan::corpus
