#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "impression/synth.hpp"
#include "impression/tensor.hpp"

namespace impression {

/// Image file: three little-endian uint32 (H, W, C) then H*W*C float32.
void save_image(const Tensor& image, const std::filesystem::path& path);
Tensor load_image(const std::filesystem::path& path);

struct ManifestImage {
  std::uint32_t image_id = 0;
  std::uint32_t subject_id = 0;
  std::filesystem::path path;  // relative to the manifest directory
  Split split = Split::train;
};

struct Manifest {
  std::filesystem::path root;  // directory holding manifest.json
  std::vector<ManifestImage> images;
  std::filesystem::path votes_csv;
  std::filesystem::path truth_csv;
  nlohmann::json config;

  std::filesystem::path resolve(const std::filesystem::path& p) const { return root / p; }
  std::vector<ManifestImage> split(Split which) const;
};

std::string split_name(Split s);
Split split_from_name(const std::string& name);

nlohmann::json manifest_to_json(const Manifest& m);
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& m, const std::filesystem::path& path);

/// Oracle scores per image, written only for evaluation.
struct TruthTable {
  std::map<std::uint32_t, TraitVector> score;
  std::map<std::uint32_t, TraitVector> standard_error;
};

inline constexpr const char* kTruthCsvHeader =
    "image_id,smart,trustworthy,attractive,smart_se,trustworthy_se,attractive_se";

void save_truth(const TruthTable& truth, const std::filesystem::path& path);
TruthTable load_truth(const std::filesystem::path& path);

/// Writes `text` to `path` atomically enough for our purposes; IoError on failure.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

/// Shortest round-trip decimal form.
std::string format_double(double v);

}  // namespace impression
