#pragma once

// Tensor archive: the on-disk checkpoint format.
//
//   bytes 0..7   magic "FTGANTNS"
//   bytes 8..11  format version (uint32, little endian)
//   bytes 12..19 header length H (uint64)
//   H bytes      JSON header: {"dtype": "f32"|"f64", "meta": {...},
//                              "tensors": [{"name", "shape", "offset"}]}
//   rest         raw little-endian tensor data, offsets relative to here

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftgan/core/error.hpp"
#include "ftgan/nn/module.hpp"

namespace ftgan::nn {

inline constexpr char kArchiveMagic[8] = {'F', 'T', 'G', 'A', 'N', 'T', 'N', 'S'};
inline constexpr std::uint32_t kArchiveVersion = 1;

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

struct StoredTensor {
  Shape shape;
  std::vector<double> values;  // widened; exact for both dtypes
  std::string dtype;
  std::vector<unsigned char> raw;  // original bytes, for bit-exact reloads
};

struct Archive {
  nlohmann::json meta;
  std::map<std::string, StoredTensor> tensors;

  const StoredTensor& at(const std::string& name, const std::filesystem::path& path) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw LoadError(path.string() + ": missing tensor '" + name + "'");
    return it->second;
  }

  /// Values of `name` converted to T. Bit-exact when dtypes agree.
  template <class T>
  std::vector<T> values_as(const std::string& name, const std::filesystem::path& path) const {
    const auto& st = at(name, path);
    std::vector<T> out(st.values.size());
    if (st.dtype == dtype_name<T>()) {
      std::memcpy(out.data(), st.raw.data(), st.raw.size());
    } else {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(st.values[i]);
    }
    return out;
  }
};

template <class T>
void write_archive(const std::filesystem::path& path, const TensorList<T>& tensors, const nlohmann::json& meta) {
  nlohmann::json header;
  header["format"] = "ftgan-tensors";
  header["dtype"] = dtype_name<T>();
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    header["tensors"].push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.tensor.numel()) * sizeof(T);
  }
  const std::string h = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw LoadError("cannot open " + path.string() + " for writing");
  const std::uint32_t version = kArchiveVersion;
  const std::uint64_t hlen = h.size();
  os.write(kArchiveMagic, 8);
  os.write(reinterpret_cast<const char*>(&version), sizeof(version));
  os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& t : tensors) {
    const auto d = t.tensor.data();
    os.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(T)));
  }
  if (!os) throw LoadError("write failed for " + path.string());
}

inline Archive read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t hlen = 0;
  is.read(magic, 8);
  is.read(reinterpret_cast<char*>(&version), sizeof(version));
  is.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!is || std::memcmp(magic, kArchiveMagic, 8) != 0) throw LoadError(path.string() + ": not a tensor archive");
  if (version != kArchiveVersion)
    throw LoadError(path.string() + ": unsupported archive version " + std::to_string(version));
  std::string h(hlen, '\0');
  is.read(h.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw LoadError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": corrupt header: " + e.what());
  }
  Archive ar;
  ar.meta = header.value("meta", nlohmann::json::object());
  const std::string dtype = header.at("dtype");
  const std::size_t width = dtype == "f32" ? 4 : 8;
  const auto data_start = is.tellg();
  for (const auto& entry : header.at("tensors")) {
    StoredTensor st;
    st.shape = entry.at("shape").get<Shape>();
    st.dtype = dtype;
    const auto n = static_cast<std::size_t>(ag::numel(st.shape));
    st.raw.resize(n * width);
    is.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    is.read(reinterpret_cast<char*>(st.raw.data()), static_cast<std::streamsize>(st.raw.size()));
    if (!is) throw LoadError(path.string() + ": truncated tensor data for " + entry.at("name").get<std::string>());
    st.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (width == 4) {
        float f;
        std::memcpy(&f, st.raw.data() + i * 4, 4);
        st.values[i] = f;
      } else {
        std::memcpy(&st.values[i], st.raw.data() + i * 8, 8);
      }
    }
    ar.tensors.emplace(entry.at("name").get<std::string>(), std::move(st));
  }
  return ar;
}

/// Copy archived values into `targets` by name. Every shape mismatch is
/// reported in one LoadError listing expected vs. found shapes.
template <class T>
void load_into(const Archive& ar, const TensorList<T>& targets, const std::filesystem::path& path) {
  std::string problems;
  for (const auto& t : targets) {
    auto it = ar.tensors.find(t.name);
    if (it == ar.tensors.end()) {
      problems += "\n  " + t.name + ": missing (expected " + ag::to_string(t.tensor.shape()) + ")";
    } else if (it->second.shape != t.tensor.shape()) {
      problems += "\n  " + t.name + ": expected " + ag::to_string(t.tensor.shape()) + ", found " +
                  ag::to_string(it->second.shape);
    }
  }
  if (!problems.empty()) throw LoadError(path.string() + ": checkpoint does not match the model:" + problems);
  for (const auto& t : targets) {
    auto values = ar.values_as<T>(t.name, path);
    auto dst = const_cast<Tensor<T>&>(t.tensor).mutable_data();
    std::copy(values.begin(), values.end(), dst.begin());
  }
}

}  // namespace ftgan::nn
