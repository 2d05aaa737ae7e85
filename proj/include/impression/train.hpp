#pragma once

#include <cstdint>
#include <filesystem>
#include <array>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "impression/checkpoint.hpp"
#include "impression/dataset.hpp"
#include "impression/model.hpp"
#include "impression/votes.hpp"

namespace impression {

/// Bias-corrected Adam over a fixed parameter list.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Applies one update from the parameters' current gradients.
  void step();
  void zero_grad();

  std::size_t steps() const noexcept { return step_; }
  double learning_rate() const noexcept { return lr_; }
  const Tensor& first_moment(std::size_t i) const { return m_.at(i); }
  const Tensor& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t step_ = 0;
};

struct TrainConfig {
  HeadMode mode = HeadMode::voter;
  double base_lr = 1e-3;
  double voter_lr = 3e-3;
  std::size_t base_epochs = 12;
  std::size_t voter_epochs = 15;
  std::size_t base_batch = 32;
  std::size_t voter_batch = 256;
  std::uint64_t seed = 1;
  bool shuffle = true;
  BaseNetworkConfig base;
  std::size_t embed_dim = 16;
  std::vector<std::size_t> voter_hidden{64, 64};

  ModelConfig model_config() const;
  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& config);

/// Per-image labels for the phase-1 temporary output.
struct BaseLabels {
  HeadMode mode = HeadMode::distribution;
  std::vector<std::uint32_t> image_ids;
  /// [image][trait]: a distribution (distribution/voter), a one-hot of the
  /// rounded mean (classification), or the mean in slot 0 (regression).
  std::vector<std::array<Distribution, kTraitCount>> targets;
  std::size_t skipped_images = 0;
};

/// Images whose weight mass is zero for any trait are skipped and counted.
BaseLabels build_base_labels(const VoteStore& votes, std::span<const std::uint32_t> image_ids, HeadMode mode);

struct PhaseResult {
  std::vector<double> batch_loss;
  std::vector<double> epoch_loss;
};

/// Phase 1: trains base and temporary heads on the labels. `images[i]` must
/// correspond to `labels.image_ids[i]`.
PhaseResult train_base_phase(Model& model, std::span<const Tensor> images, const BaseLabels& labels,
                             const TrainConfig& config);

/// One voter-phase sample: an image (by index into the feature list), a
/// table row and the one-hot normalized vote for each trait.
struct VoterSample {
  std::size_t image = 0;
  std::size_t row = 0;
  std::array<std::size_t, kTraitCount> bin{};
};

/// Every (image, voter) pair that has normalized votes for all traits.
/// Throws UnknownVoter before any training if a voter is not in the table.
std::vector<VoterSample> build_voter_samples(const Model& model, const VoteStore& votes,
                                             std::span<const std::uint32_t> image_ids);

/// Phase 2: base frozen; trains the voter model and embeddings with
/// cross-entropy on individual votes.
PhaseResult train_voter_phase(Model& model, std::span<const Tensor> images, std::span<const std::uint32_t> image_ids,
                              const VoteStore& votes, const TrainConfig& config);

/// Order-sensitive FNV-1a hash over the bytes of every base parameter.
std::uint64_t base_parameter_hash(const Model& model);

/// Loads a split's images resized to the model input.
struct SplitImages {
  std::vector<std::uint32_t> image_ids;
  std::vector<Tensor> images;
};
SplitImages load_split_images(const Manifest& manifest, Split split, const BaseNetworkConfig& base);

/// Votes restricted to one split's images, normalized and weighted within it.
VoteStore prepare_votes(const Manifest& manifest, std::optional<Split> split);

struct TrainOutcome {
  Model model;
  TrainingMetadata metadata;
  PhaseResult phase1;
  PhaseResult phase2;
  nlohmann::json metrics;
};

using EpochCallback = std::function<void(int phase, std::size_t epoch, double loss)>;
using ModelCallback = std::function<void(const Model&)>;

/// Phase 1, then phase 2 in voter mode. Never reads the truth file.
/// `after_phase1` sees the model between the phases.
TrainOutcome train_full(const Manifest& manifest, const TrainConfig& config, const EpochCallback& on_epoch = {},
                        const ModelCallback& after_phase1 = {});

}  // namespace impression
