#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string_view>
#include <tuple>
#include <vector>

namespace impression {

enum class Trait : std::uint8_t { smart = 0, trustworthy = 1, attractive = 2 };

inline constexpr std::array<Trait, 3> kTraits{Trait::smart, Trait::trustworthy, Trait::attractive};
inline constexpr std::size_t kTraitCount = kTraits.size();
inline constexpr std::size_t kBins = 10;

std::string_view trait_name(Trait trait);
/// Throws ValueError for anything other than smart|trustworthy|attractive.
Trait trait_from_name(std::string_view name);
inline std::size_t trait_index(Trait t) { return static_cast<std::size_t>(t); }

using Distribution = std::array<double, kBins>;

/// [0.05, 0.15, ..., 0.95].
const Distribution& bin_centers();

/// Bucket of a vote in [0,1]: clamp(floor(10 v), 0, 9).
std::size_t bin_index(double v);

/// <dist, b>.
double expected_vote(const Distribution& dist);

struct VoteRecord {
  std::uint32_t voter_id = 0;
  std::uint32_t image_id = 0;
  Trait trait = Trait::smart;
  int raw_vote = 0;
  std::optional<double> normalized_vote;
  std::optional<double> weight;

  friend bool operator==(const VoteRecord&, const VoteRecord&) = default;
};

/// Votes indexed by image, by voter, and by (image, trait). Queries return
/// records sorted by (voter_id, image_id, trait) so results do not depend on
/// insertion order.
class VoteStore {
 public:
  /// Validates ranges and (voter, image, trait) uniqueness; throws ValueError.
  void add(VoteRecord record);

  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }
  const std::vector<VoteRecord>& records() const noexcept { return records_; }

  std::vector<const VoteRecord*> by_image(std::uint32_t image_id) const;
  std::vector<const VoteRecord*> by_image_trait(std::uint32_t image_id, Trait trait) const;
  std::vector<const VoteRecord*> by_voter(std::uint32_t voter_id) const;
  /// The voter set of an image, ascending.
  std::vector<std::uint32_t> voters_of(std::uint32_t image_id) const;

  std::vector<std::uint32_t> image_ids() const;
  std::vector<std::uint32_t> voter_ids() const;

  /// Write access used by the normalization and weighting passes.
  VoteRecord& record(std::size_t index) { return records_.at(index); }
  std::vector<std::size_t> indices_by_voter(std::uint32_t voter_id) const;
  std::vector<std::size_t> indices_by_image_trait(std::uint32_t image_id, Trait trait) const;

  template <typename Pred>
  VoteStore filtered(Pred keep) const {
    VoteStore out;
    for (const auto& r : records_)
      if (keep(r)) out.add(r);
    return out;
  }

 private:
  using Key = std::tuple<std::uint32_t, std::uint32_t, Trait>;

  std::vector<const VoteRecord*> sorted(std::vector<std::size_t> idx) const;

  std::vector<VoteRecord> records_;
  std::map<Key, std::size_t> by_key_;
  std::map<std::uint32_t, std::vector<std::size_t>> by_image_;
  std::map<std::uint32_t, std::vector<std::size_t>> by_voter_;
};

/// Per (voter, trait), replaces each raw vote by its mid-rank percentile in
/// that voter's own history: (count_below + 0.5 * count_equal) / count_total.
void normalize_votes(VoteStore& store);

/// Writes one weight per voter into all of that voter's records. Constant
/// voters get 0; otherwise clamp(rho, 0, 1) where rho correlates the voter's
/// normalized votes with the leave-voter-out mean on shared images that have
/// at least two other voters. Fewer than 5 such images gives 0.5.
void compute_voter_weights(VoteStore& store);

inline constexpr double kFallbackVoterWeight = 0.5;
inline constexpr std::size_t kMinWeightImages = 5;

struct TraitDistributionLabel {
  Distribution bins{};
  double mean = 0.0;
  std::size_t vote_count = 0;
  double weight_mass = 0.0;
};

/// Weighted mean of normalized votes for one image and trait.
/// Throws ZeroWeightMass when no vote carries positive weight.
double scalar_label(const VoteStore& store, std::uint32_t image_id, Trait trait);

/// Weighted 10-bucket histogram of the normalized votes, normalized to sum 1.
TraitDistributionLabel distribution_label(const VoteStore& store, std::uint32_t image_id, Trait trait);

/// One-hot at bin_index(v). Throws ValueError for v outside [0,1].
Distribution onehot_vote(double v);

/// CSV header: voter_id,image_id,trait,raw_vote,normalized_vote,weight
inline constexpr std::string_view kVoteCsvHeader = "voter_id,image_id,trait,raw_vote,normalized_vote,weight";

VoteStore read_votes(std::istream& in);
void write_votes(const VoteStore& store, std::ostream& out);
/// Throws IoError when the file cannot be opened and ParseError on bad rows.
VoteStore load_votes(const std::filesystem::path& path);
void save_votes(const VoteStore& store, const std::filesystem::path& path);

}  // namespace impression
