#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "impression/autodiff.hpp"
#include "impression/random.hpp"
#include "impression/synth.hpp"
#include "impression/votes.hpp"

namespace impression {

enum class HeadMode { regression, classification, distribution, voter };

std::string_view head_mode_name(HeadMode mode);
HeadMode head_mode_from_name(std::string_view name);

struct ConvBlock {
  std::size_t filters = 16;
  std::size_t kernel = 3;
  std::size_t stride = 2;

  friend bool operator==(const ConvBlock&, const ConvBlock&) = default;
};

struct BaseNetworkConfig {
  std::size_t input_size = 64;
  std::size_t channels = 1;
  std::vector<ConvBlock> conv_blocks{{16, 3, 2}, {32, 3, 2}, {64, 3, 2}, {64, 3, 2}};

  /// Length of h: filters of the last block.
  std::size_t feature_dim() const;
  void validate() const;
};

struct ModelConfig {
  BaseNetworkConfig base;
  HeadMode mode = HeadMode::voter;
  std::size_t embed_dim = 16;
  std::vector<std::size_t> voter_hidden{64, 64};

  void validate() const;
};

enum class ParamGroup { base, head, voter };

/// Maps voter ids to rows of the embedding matrix. Unknown ids are an error.
class VoterTable {
 public:
  VoterTable() = default;
  explicit VoterTable(std::vector<std::uint32_t> ids);

  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }
  const std::vector<std::uint32_t>& ids() const noexcept { return ids_; }
  bool contains(std::uint32_t id) const { return rows_.contains(id); }
  /// Throws UnknownVoter.
  std::size_t row(std::uint32_t id) const;

 private:
  std::vector<std::uint32_t> ids_;
  std::map<std::uint32_t, std::size_t> rows_;
};

struct VotePrediction {
  Distribution dist{};
  double vote = 0.0;  // <dist, b>
};

/// Centers `image` on a black square canvas, then bilinearly resizes it to
/// size x size and adapts the channel count (replicate or average).
Tensor fit_to_input(const Tensor& image, std::size_t size, std::size_t channels);

/// Base network g(x; theta) with global average pooling, per-trait output
/// heads, and in voter mode the voter model phi([h, E_j]) with its embedding
/// table. Parameters live in one registry addressed by name.
class Model {
 public:
  Model(ModelConfig config, std::vector<std::uint32_t> voter_ids, std::uint64_t seed);

  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;

  const ModelConfig& config() const noexcept { return config_; }
  HeadMode mode() const noexcept { return config_.mode; }
  const VoterTable& voters() const noexcept { return voters_; }

  std::vector<Parameter>& parameters() noexcept { return params_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }
  Parameter& parameter(std::string_view name);
  const Parameter& parameter(std::string_view name) const;
  std::vector<Parameter*> group(ParamGroup g);
  static ParamGroup group_of(std::string_view name);

  // Training graph: parameters are recorded so backward reaches them.
  Var forward_base(Tape& tape, const Tensor& x);
  /// Per-trait temporary output: softmax [1,10], or sigmoid [1,1] in regression mode.
  Var head_forward(Tape& tape, Var h, Trait trait);
  /// Per-trait voter distributions [N,10] for features h [N,F] and table rows.
  std::array<Var, kTraitCount> voter_forward(Tape& tape, Var h, std::span<const std::size_t> rows);

  // Inference. Safe to call concurrently on a shared model.
  Tensor features(const Tensor& x) const;
  /// Head output for one trait: 10 probabilities, or one value in (0,1).
  Tensor head_output(const Tensor& h, Trait trait) const;
  VotePrediction predict_vote(const Tensor& h, std::uint32_t voter_id, Trait trait) const;
  std::vector<VotePrediction> predict_rows(const Tensor& h, std::span<const std::size_t> rows, Trait trait) const;
  /// Mean predicted vote over a without-replacement sample of
  /// min(sample_size, n_voters) training voters.
  double aggregate_features(const Tensor& h, Trait trait, std::size_t sample_size, Rng& rng) const;
  double aggregate(const Tensor& x, Trait trait, std::size_t sample_size, Rng& rng) const;
  /// One base pass shared by all traits.
  TraitVector score_features(const Tensor& h, Rng& rng, std::size_t sample_size = 200) const;
  TraitVector score_image(const Tensor& x, Rng& rng, std::size_t sample_size = 200) const;

  /// Number of base-network forward passes since construction.
  std::size_t base_activation_count() const noexcept { return base_passes_.load(); }

 private:
  template <typename Bind>
  Var base_graph(Tape& tape, const Tensor& x, Bind bind) const;
  template <typename Bind>
  Var head_graph(Tape& tape, Var h, Trait trait, Bind bind) const;
  template <typename Bind>
  std::array<Var, kTraitCount> voter_graph(Tape& tape, Var h, std::span<const std::size_t> rows, Bind bind) const;

  void add_param(std::string name, Tensor value);
  void initialize(std::uint64_t seed);

  ModelConfig config_;
  VoterTable voters_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
  mutable std::atomic<std::size_t> base_passes_{0};
};

inline constexpr std::size_t kDefaultVoterSample = 200;

}  // namespace impression
