#pragma once

// Dataset manifest: JSON lines, one record per image,
//   {"image": "<path relative to the manifest>", "captions": [...], "split": "train"|"test"}
// plus an optional `dataset.meta` JSON next to it:
//   {"image_size": 256, "captions_per_image": 5, "vocabulary": {"min_freq": 1, "t_max": 18}}

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftgan/corpus/image.hpp"
#include "ftgan/corpus/vocabulary.hpp"

namespace ftgan::corpus {

enum class Split { train, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "' (expected train or test)");
}

struct ManifestRecord {
  std::string image;                // as written in the manifest
  std::filesystem::path image_path;  // resolved against the manifest directory
  std::vector<std::string> captions;
  Split split = Split::train;
};

struct DatasetMeta {
  int image_size = 0;
  int captions_per_image = 0;
  int min_freq = 1;
  int t_max = 18;

  nlohmann::json to_json() const {
    return {{"format", "ftgan-dataset-meta"},
            {"version", 1},
            {"image_size", image_size},
            {"captions_per_image", captions_per_image},
            {"vocabulary", {{"min_freq", min_freq}, {"t_max", t_max}}}};
  }
  static DatasetMeta from_json(const nlohmann::json& j) {
    DatasetMeta m;
    m.image_size = j.value("image_size", 0);
    m.captions_per_image = j.value("captions_per_image", 0);
    if (j.contains("vocabulary")) {
      m.min_freq = j["vocabulary"].value("min_freq", 1);
      m.t_max = j["vocabulary"].value("t_max", 18);
    }
    return m;
  }
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  int image_size = 0;
  int captions_per_image = 0;
  DatasetMeta meta;
  std::filesystem::path source;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].split == s) out.push_back(i);
    return out;
  }

  std::vector<std::string> all_captions() const {
    std::vector<std::string> out;
    for (const auto& r : records) out.insert(out.end(), r.captions.begin(), r.captions.end());
    return out;
  }
};

/// Check every manifest rule; throws ValidationError or LoadError naming
/// the offending record.
inline void validate(const DatasetManifest& m, bool check_files = true) {
  std::set<std::string> seen;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    const std::string where = "record " + std::to_string(i) + " (" + r.image + ")";
    if (r.captions.empty()) throw ValidationError(where + ": no captions");
    if (static_cast<int>(r.captions.size()) != m.captions_per_image)
      throw ValidationError(where + ": has " + std::to_string(r.captions.size()) + " captions, expected " +
                            std::to_string(m.captions_per_image) + " like the other records");
    for (std::size_t k = 0; k < r.captions.size(); ++k)
      if (tokenize(r.captions[k]).empty())
        throw ValidationError(where + ": caption " + std::to_string(k) + " has no words");
    if (!seen.insert(r.image_path.lexically_normal().string()).second)
      throw ValidationError(where + ": image path appears twice");
    if (check_files && !std::filesystem::exists(r.image_path))
      throw LoadError(where + ": image file not found: " + r.image_path.string());
  }
  if (!m.records.empty() && m.image_size <= 0) throw ValidationError("image_size must be positive");
}

inline std::filesystem::path meta_path_for(const std::filesystem::path& manifest) {
  return manifest.parent_path() / "dataset.meta";
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.source = path;
  const auto dir = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ManifestRecord r;
    try {
      const auto j = nlohmann::json::parse(line);
      r.image = j.at("image").get<std::string>();
      r.captions = j.at("captions").get<std::vector<std::string>>();
      r.split = parse_split(j.value("split", "train"));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    r.image_path = std::filesystem::path(r.image).is_absolute() ? std::filesystem::path(r.image) : dir / r.image;
    m.records.push_back(std::move(r));
  }
  const auto meta_file = meta_path_for(path);
  if (std::filesystem::exists(meta_file)) {
    std::ifstream ms(meta_file);
    try {
      m.meta = DatasetMeta::from_json(nlohmann::json::parse(ms));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(meta_file.string() + ": " + e.what());
    }
  }
  m.captions_per_image = m.records.empty() ? m.meta.captions_per_image
                                           : static_cast<int>(m.records.front().captions.size());
  if (m.meta.captions_per_image > 0 && !m.records.empty() && m.meta.captions_per_image != m.captions_per_image)
    throw ValidationError("dataset.meta declares " + std::to_string(m.meta.captions_per_image) +
                          " captions per image, manifest has " + std::to_string(m.captions_per_image));
  m.image_size = m.meta.image_size;
  for (const auto& r : m.records) {
    if (!std::filesystem::exists(r.image_path))
      throw LoadError("record '" + r.image + "': image file not found: " + r.image_path.string());
    if (m.image_size <= 0) {
      m.image_size = probe_image_size(r.image_path).first;
      break;
    }
  }
  m.meta.image_size = m.image_size;
  m.meta.captions_per_image = m.captions_per_image;
  validate(m);
  return m;
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write " + path.string());
  for (const auto& r : m.records) {
    nlohmann::json j = {{"image", r.image}, {"captions", r.captions}, {"split", to_string(r.split)}};
    os << j.dump() << "\n";
  }
  std::ofstream ms(meta_path_for(path));
  ms << m.meta.to_json().dump(1) << "\n";
}

inline Vocabulary build_vocabulary(const DatasetManifest& m, int min_freq = 1) {
  return Vocabulary::build(m.all_captions(), min_freq);
}

}  // namespace ftgan::corpus
