#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "impression/dataset.hpp"
#include "impression/model.hpp"
#include "impression/random.hpp"
#include "impression/train.hpp"
#include "impression/votes.hpp"

namespace impression {

using ScoreTable = std::map<std::uint32_t, TraitVector>;

// --- correlation ------------------------------------------------------------

struct Interval {
  double low = -1.0;
  double high = 1.0;
};

/// 95% interval for a correlation via the Fisher z transform. n <= 3 gives [-1, 1].
Interval fisher_interval(double r, std::size_t n);

struct TraitCorrelation {
  Trait trait = Trait::smart;
  double pc = 0.0;
  Interval ci;
};

struct CorrelationReport {
  std::size_t n_images = 0;
  std::vector<TraitCorrelation> traits;

  double mean_pc() const;
  const TraitCorrelation& at(Trait t) const;
};

/// PC per trait over the ids present in both tables. Needs at least 3 shared
/// ids; ConstantInput propagates from a constant column.
CorrelationReport correlate(const ScoreTable& predicted, const ScoreTable& truth);

// --- votes-worth ------------------------------------------------------------

enum class VoteFlavor { normalized_weighted, raw };

std::string_view flavor_name(VoteFlavor f);
VoteFlavor flavor_from_name(std::string_view name);

inline constexpr std::size_t kHeldVotes = 15;
inline constexpr std::size_t kMinVotesForWorth = 20;
inline constexpr std::size_t kMinEligibleImages = 10;

struct HoldoutImage {
  std::uint32_t image_id = 0;
  std::vector<const VoteRecord*> held;  // in draw order
  std::vector<const VoteRecord*> rest;
};

struct HoldoutPlan {
  std::vector<HoldoutImage> images;  // ascending image id
  std::size_t excluded = 0;
};

/// Draws 15 held votes per eligible image. Images listed in `restrict_to`
/// (if given) are the only candidates. Throws NotEnoughImages.
HoldoutPlan holdout_plan(const VoteStore& store, Trait trait, Rng& rng,
                         const std::vector<std::uint32_t>* restrict_to = nullptr);

/// Weighted normalized mean (plain mean when the weight mass is zero), or
/// the plain mean of raw votes.
double flavor_mean(std::span<const VoteRecord* const> votes, VoteFlavor flavor);

struct VotesWorth {
  bool at_least_max = false;
  double value = 0.0;

  std::string text() const;
};

/// First crossing of `curve` (index 0 is k = 1) by model_pc, linearly
/// interpolated; below curve[0] interpolates from the origin.
VotesWorth interpolate_votes_worth(std::span<const double> curve, double model_pc);

struct VotesWorthCurve {
  Trait trait = Trait::smart;
  VoteFlavor flavor = VoteFlavor::normalized_weighted;
  std::array<double, kHeldVotes> curve{};
  double model_pc = 0.0;
  VotesWorth worth;
  std::size_t n_images = 0;
  std::size_t excluded = 0;
  std::size_t resamples = 1;
};

/// Holds out 15 votes per image, `resamples` times, and averages the curve
/// and the model correlation over the draws.
VotesWorthCurve votes_worth(const VoteStore& store, const std::map<std::uint32_t, double>& model_scores, Trait trait,
                            VoteFlavor flavor, Rng& rng, std::size_t resamples = 1);

nlohmann::json curve_to_json(const VotesWorthCurve& c);

// --- scoring ----------------------------------------------------------------

/// Aggregator (voter mode) or head scores for a split. Each image draws its
/// voter sample from its own seed-derived stream.
ScoreTable score_split(const Model& model, const Manifest& manifest, Split split, std::uint64_t seed,
                       std::size_t voter_sample = kDefaultVoterSample);
ScoreTable score_images(const Model& model, std::span<const Tensor> images, std::span<const std::uint32_t> ids,
                        std::uint64_t seed, std::size_t voter_sample = kDefaultVoterSample,
                        std::optional<HeadMode> as_mode = std::nullopt);

/// Weighted normalized label per image (skips images with zero weight mass).
ScoreTable vote_labels(const VoteStore& store, std::span<const std::uint32_t> ids);

/// PC against the generator's oracle scores on the test split.
CorrelationReport evaluate_against_oracle(const Manifest& manifest, const Model& model, std::uint64_t seed,
                                          std::size_t voter_sample = kDefaultVoterSample);

// --- full evaluation --------------------------------------------------------

struct EvalOptions {
  std::uint64_t seed = 1;
  std::size_t voter_sample = kDefaultVoterSample;
  std::size_t resamples = 20;
  std::vector<VoteFlavor> flavors{VoteFlavor::normalized_weighted, VoteFlavor::raw};
};

struct EvaluationReport {
  CorrelationReport test;
  std::optional<CorrelationReport> oracle;
  std::vector<VotesWorthCurve> curves;
  nlohmann::json config_echo;

  nlohmann::json correlation_json() const;
  nlohmann::json votes_worth_json() const;
  std::optional<nlohmann::json> oracle_json() const;
  /// trait x flavor -> votes table.
  std::string summary_text() const;
};

/// Scores the test split, correlates with the vote labels and the oracle (if
/// the truth file exists), and runs votes-worth per trait and flavor.
EvaluationReport evaluate_model(const Manifest& manifest, const Model& model, const EvalOptions& options);

/// Writes correlation.json, votes_worth.json, oracle.json (if any) and summary.txt.
void write_evaluation(const EvaluationReport& report, const std::filesystem::path& dir);

// --- mode comparison --------------------------------------------------------

struct ModeRun {
  HeadMode mode = HeadMode::voter;
  std::uint64_t seed = 0;
  CorrelationReport test;
};

struct ModeSummary {
  HeadMode mode = HeadMode::voter;
  double mean = 0.0;
  double sd = 0.0;
  TraitVector trait_mean{};
};

struct PairOrdering {
  HeadMode better = HeadMode::voter;
  HeadMode worse = HeadMode::regression;
  std::size_t seeds_ahead = 0;
  bool mean_ahead = false;
};

struct ModeComparison {
  std::vector<ModeRun> runs;
  std::vector<ModeSummary> summary;
  std::vector<PairOrdering> ordering;

  const ModeSummary& of(HeadMode m) const;
  /// Per-seed mean PC of a mode, in seed order.
  std::vector<double> per_seed(HeadMode m) const;
  nlohmann::json to_json() const;
  std::string table_text() const;
};

using TrainedModelCallback = std::function<void(HeadMode mode, std::uint64_t seed, const Model& model)>;

/// Trains each mode per seed and reports mean test PC against the vote
/// labels. A distribution run is read off a voter run's phase 1 when both
/// modes are requested, since the two share initialization and labels.
ModeComparison mode_comparison(const Manifest& manifest, std::span<const HeadMode> modes,
                               std::span<const std::uint64_t> seeds, const TrainConfig& config,
                               const TrainedModelCallback& on_model = {},
                               std::size_t voter_sample = kDefaultVoterSample);

}  // namespace impression
