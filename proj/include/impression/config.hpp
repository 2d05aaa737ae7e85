#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "impression/eval.hpp"
#include "impression/synth.hpp"
#include "impression/train.hpp"

namespace impression {

/// A value from the config file: integer, float, bool, string or a flat array.
struct ConfigValue {
  using Scalar = std::variant<std::int64_t, double, bool, std::string>;
  std::variant<Scalar, std::vector<Scalar>> value;
  std::size_t line = 0;
};

/// section -> key -> value. Keys before any header land in section "".
struct ConfigTable {
  std::map<std::string, std::map<std::string, ConfigValue>> sections;
  std::map<std::string, std::size_t> header_line;
};

/// Parses the TOML subset we accept: [section] headers, key = value lines,
/// # comments, quoted strings, numbers, booleans and one-level arrays.
ConfigTable parse_config_table(std::string_view text);

struct EvalSection {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<VoteFlavor> flavors{VoteFlavor::normalized_weighted, VoteFlavor::raw};
  std::size_t voter_sample_size = kDefaultVoterSample;
  std::size_t resamples = 20;

  EvalOptions options(std::uint64_t seed) const;
};

struct RunConfig {
  CorpusConfig corpus;
  TrainConfig train;
  EvalSection eval;
};

/// Unknown sections or keys, wrong types and invalid values throw ParseError.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

/// The effective configuration with every default filled in.
nlohmann::json run_config_to_json(const RunConfig& config);
/// TOML text that parses back to `config`.
std::string run_config_to_toml(const RunConfig& config);

}  // namespace impression
