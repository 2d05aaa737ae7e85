#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "impression/random.hpp"
#include "impression/tensor.hpp"
#include "impression/votes.hpp"

namespace impression {

using TraitVector = std::array<double, kTraitCount>;

struct LatentPhoto {
  std::uint32_t image_id = 0;
  std::uint32_t subject_id = 0;
  TraitVector tau{};
  TraitVector context_offset{};
};

struct SimVoter {
  std::uint32_t voter_id = 0;
  double bias = 0.0;
  double scale = 1.0;
  TraitVector taste{1.0, 1.0, 1.0};
  double noise_sigma = 0.0;
};

/// Distributions the simulated voter population is drawn from.
struct VoterPopulationConfig {
  double bias_sd = 0.35;
  double scale_median = 2.0;
  double scale_log_sd = 0.35;
  double taste_min = 0.4;
  double taste_max = 1.0;
  double noise_min = 0.1;
  double noise_max = 0.4;
  /// Share of voters who always give the same raw vote.
  double constant_fraction = 0.02;
};

struct CorpusConfig {
  std::size_t n_subjects = 200;
  std::size_t photos_per_subject = 4;
  std::size_t image_size = 64;
  std::size_t channels = 1;
  std::size_t n_voters = 300;
  std::size_t votes_per_image_train = 10;
  std::size_t votes_per_image_test = 25;
  double test_fraction = 0.2;
  double subject_spread = 0.3;
  double context_sd = 0.1;
  double clutter = 1.0;
  std::size_t oracle_mc = 10000;
  std::uint64_t seed = 1;
  VoterPopulationConfig voters;

  /// Throws ValueError on non-positive counts, image_size < 16 and similar.
  void validate() const;
};

enum class Split { train, test };

/// Pixels in [0,1] of shape [size, size, channels]. Striped texture frequency
/// follows tau[0], centered disc radius tau[1], mean gradient luminance
/// tau[2]. Clutter is scaled by `clutter` (0 disables it).
Tensor render(const LatentPhoto& photo, std::size_t size, std::size_t channels, std::uint64_t seed,
              double clutter = 1.0);

/// scale * (affinity - 0.5) + bias, before noise.
double latent_mean(const SimVoter& voter, const LatentPhoto& photo, Trait trait);

/// clamp(round_half_up(1.5 + 2 * latent), 0, 3).
int quantize_vote(double latent);

int simulate_vote(const SimVoter& voter, const LatentPhoto& photo, Trait trait, Rng& rng);

/// Exact P(raw = r) for r = 0..3 under the voter's Gaussian noise.
std::array<double, 4> vote_probabilities(const SimVoter& voter, const LatentPhoto& photo, Trait trait);

/// Simulated voters plus, per voter and trait, the population analogue of the
/// mid-rank normalization: each voter's raw-vote distribution is taken over a
/// reference photo set, and raw r maps to P(raw < r) + 0.5 P(raw = r).
class VoterPopulation {
 public:
  VoterPopulation(std::vector<SimVoter> voters, const std::vector<LatentPhoto>& reference_photos);

  const std::vector<SimVoter>& voters() const noexcept { return voters_; }
  std::size_t size() const noexcept { return voters_.size(); }
  double normalized(std::size_t voter_index, Trait trait, int raw) const;

 private:
  std::vector<SimVoter> voters_;
  std::vector<std::array<std::array<double, 4>, kTraitCount>> tables_;
};

struct OracleEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
};

/// Monte-Carlo population-mean normalized vote. Requires n_mc >= 10000.
OracleEstimate oracle_score(const LatentPhoto& photo, Trait trait, const VoterPopulation& population,
                            std::size_t n_mc, std::uint64_t seed);

/// The same expectation computed in closed form.
double exact_oracle_score(const LatentPhoto& photo, Trait trait, const VoterPopulation& population);

struct Corpus {
  CorpusConfig config;
  std::vector<LatentPhoto> photos;
  std::vector<Split> splits;
  std::vector<SimVoter> voters;
  VoteStore votes;
};

/// Latents, voters, split and raw votes; no pixels and no files.
Corpus simulate_corpus(const CorpusConfig& config);

struct GeneratedCorpus {
  std::filesystem::path manifest;
  std::size_t n_images = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::size_t n_vote_rows = 0;
};

/// Writes images/, votes.csv, truth.csv and manifest.json under out_dir.
GeneratedCorpus generate_corpus(const CorpusConfig& config, const std::filesystem::path& out_dir);

}  // namespace impression
