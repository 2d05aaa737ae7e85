#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "impression/model.hpp"

namespace impression {

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct TrainingMetadata {
  int phase_completed = 0;
  std::uint64_t seed = 0;
  std::size_t base_epochs = 0;
  std::size_t voter_epochs = 0;
  nlohmann::json train_config = nlohmann::json::object();
};

struct Checkpoint {
  Model model;
  TrainingMetadata metadata;
};

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Deterministic probe image for the configured input shape.
Tensor probe_input(const BaseNetworkConfig& config);
/// Features, per-trait head outputs and (voter mode) the first voter's
/// predicted distributions, flattened.
Tensor probe_output(const Model& model);

/// Layout: version byte, uint64 JSON length, JSON header, uint32 block count,
/// then per block: uint32 name length, name, uint32 rank, uint64 dims,
/// float64 values. All integers little-endian.
std::string encode_checkpoint(const Model& model, const TrainingMetadata& metadata);
/// Rejects unknown versions and truncated data (ValueError) and re-runs the
/// stored probe, which must match within 1e-10.
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const Model& model, const TrainingMetadata& metadata, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace impression
