#include "impression/votes.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <string>

#include "impression/error.hpp"
#include "impression/stats.hpp"

namespace impression {

std::string_view trait_name(Trait trait) {
  switch (trait) {
    case Trait::smart: return "smart";
    case Trait::trustworthy: return "trustworthy";
    case Trait::attractive: return "attractive";
  }
  return "unknown";
}

Trait trait_from_name(std::string_view name) {
  for (Trait t : kTraits)
    if (trait_name(t) == name) return t;
  throw ValueError("unknown trait '" + std::string(name) + "'");
}

const Distribution& bin_centers() {
  static const Distribution b = [] {
    Distribution out{};
    for (std::size_t k = 0; k < kBins; ++k) out[k] = 0.05 + 0.1 * static_cast<double>(k);
    return out;
  }();
  return b;
}

std::size_t bin_index(double v) {
  const double scaled = std::floor(10.0 * v);
  if (!(scaled > 0.0)) return 0;
  if (scaled >= static_cast<double>(kBins - 1)) return kBins - 1;
  return static_cast<std::size_t>(scaled);
}

double expected_vote(const Distribution& dist) {
  double s = 0.0;
  for (std::size_t k = 0; k < kBins; ++k) s += dist[k] * bin_centers()[k];
  return s;
}

// --- VoteStore --------------------------------------------------------------

void VoteStore::add(VoteRecord r) {
  if (r.raw_vote < 0 || r.raw_vote > 3) throw ValueError("raw_vote " + std::to_string(r.raw_vote) + " outside 0..3");
  if (r.normalized_vote && !(*r.normalized_vote >= 0.0 && *r.normalized_vote <= 1.0))
    throw ValueError("normalized_vote outside [0,1]");
  if (r.weight && !(*r.weight >= 0.0 && *r.weight <= 1.0)) throw ValueError("weight outside [0,1]");
  const Key key{r.voter_id, r.image_id, r.trait};
  if (by_key_.contains(key))
    throw ValueError("duplicate vote for voter " + std::to_string(r.voter_id) + ", image " +
                     std::to_string(r.image_id) + ", trait " + std::string(trait_name(r.trait)));
  const std::size_t idx = records_.size();
  by_key_.emplace(key, idx);
  by_image_[r.image_id].push_back(idx);
  by_voter_[r.voter_id].push_back(idx);
  records_.push_back(r);
}

std::vector<const VoteRecord*> VoteStore::sorted(std::vector<std::size_t> idx) const {
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const auto& ra = records_[a];
    const auto& rb = records_[b];
    return std::tie(ra.voter_id, ra.image_id, ra.trait) < std::tie(rb.voter_id, rb.image_id, rb.trait);
  });
  std::vector<const VoteRecord*> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(&records_[i]);
  return out;
}

std::vector<const VoteRecord*> VoteStore::by_image(std::uint32_t image_id) const {
  auto it = by_image_.find(image_id);
  return it == by_image_.end() ? std::vector<const VoteRecord*>{} : sorted(it->second);
}

std::vector<const VoteRecord*> VoteStore::by_image_trait(std::uint32_t image_id, Trait trait) const {
  return sorted(indices_by_image_trait(image_id, trait));
}

std::vector<const VoteRecord*> VoteStore::by_voter(std::uint32_t voter_id) const {
  auto it = by_voter_.find(voter_id);
  return it == by_voter_.end() ? std::vector<const VoteRecord*>{} : sorted(it->second);
}

std::vector<std::size_t> VoteStore::indices_by_voter(std::uint32_t voter_id) const {
  auto it = by_voter_.find(voter_id);
  return it == by_voter_.end() ? std::vector<std::size_t>{} : it->second;
}

std::vector<std::size_t> VoteStore::indices_by_image_trait(std::uint32_t image_id, Trait trait) const {
  std::vector<std::size_t> out;
  auto it = by_image_.find(image_id);
  if (it == by_image_.end()) return out;
  for (auto i : it->second)
    if (records_[i].trait == trait) out.push_back(i);
  std::sort(out.begin(), out.end(),
            [&](std::size_t a, std::size_t b) { return records_[a].voter_id < records_[b].voter_id; });
  return out;
}

std::vector<std::uint32_t> VoteStore::voters_of(std::uint32_t image_id) const {
  std::set<std::uint32_t> ids;
  auto it = by_image_.find(image_id);
  if (it != by_image_.end())
    for (auto i : it->second) ids.insert(records_[i].voter_id);
  return {ids.begin(), ids.end()};
}

std::vector<std::uint32_t> VoteStore::image_ids() const {
  std::vector<std::uint32_t> out;
  for (const auto& [id, _] : by_image_) out.push_back(id);
  return out;
}

std::vector<std::uint32_t> VoteStore::voter_ids() const {
  std::vector<std::uint32_t> out;
  for (const auto& [id, _] : by_voter_) out.push_back(id);
  return out;
}

// --- normalization and weighting -------------------------------------------

void normalize_votes(VoteStore& store) {
  for (std::uint32_t voter : store.voter_ids()) {
    const auto idx = store.indices_by_voter(voter);
    for (Trait trait : kTraits) {
      std::array<std::size_t, 4> counts{};
      std::size_t total = 0;
      for (auto i : idx) {
        const auto& r = store.record(i);
        if (r.trait != trait) continue;
        ++counts[static_cast<std::size_t>(r.raw_vote)];
        ++total;
      }
      if (total == 0) continue;
      std::array<double, 4> percentile{};
      std::size_t below = 0;
      for (std::size_t v = 0; v < 4; ++v) {
        percentile[v] =
            (static_cast<double>(below) + 0.5 * static_cast<double>(counts[v])) / static_cast<double>(total);
        below += counts[v];
      }
      for (auto i : idx) {
        auto& r = store.record(i);
        if (r.trait == trait) r.normalized_vote = percentile[static_cast<std::size_t>(r.raw_vote)];
      }
    }
  }
}

namespace {

double voter_weight(const VoteStore& store, std::uint32_t voter) {
  const auto mine = store.by_voter(voter);
  const bool constant = std::all_of(mine.begin(), mine.end(),
                                    [&](const VoteRecord* r) { return r->raw_vote == mine.front()->raw_vote; });
  if (constant) return 0.0;

  std::vector<double> own, consensus;
  std::set<std::uint32_t> images;
  for (const VoteRecord* r : mine) {
    if (!r->normalized_vote) throw ValueError("compute_voter_weights: votes are not normalized");
    double sum = 0.0;
    std::size_t others = 0;
    for (const VoteRecord* o : store.by_image_trait(r->image_id, r->trait)) {
      if (o->voter_id == voter) continue;
      if (!o->normalized_vote) throw ValueError("compute_voter_weights: votes are not normalized");
      sum += *o->normalized_vote;
      ++others;
    }
    if (others < 2) continue;
    own.push_back(*r->normalized_vote);
    consensus.push_back(sum / static_cast<double>(others));
    images.insert(r->image_id);
  }
  if (images.size() < kMinWeightImages) return kFallbackVoterWeight;
  try {
    return std::clamp(pearson(own, consensus), 0.0, 1.0);
  } catch (const ConstantInput&) {
    return 0.0;
  }
}

}  // namespace

void compute_voter_weights(VoteStore& store) {
  std::vector<std::pair<std::uint32_t, double>> weights;
  for (std::uint32_t voter : store.voter_ids()) weights.emplace_back(voter, voter_weight(store, voter));
  for (const auto& [voter, w] : weights)
    for (auto i : store.indices_by_voter(voter)) store.record(i).weight = w;
}

// --- labels -----------------------------------------------------------------

namespace {

struct WeightedVote {
  double value;
  double weight;
};

std::vector<WeightedVote> weighted_votes(const VoteStore& store, std::uint32_t image_id, Trait trait) {
  std::vector<WeightedVote> out;
  for (const VoteRecord* r : store.by_image_trait(image_id, trait)) {
    if (!r->normalized_vote || !r->weight)
      throw ValueError("image " + std::to_string(image_id) + ": votes lack normalization or weights");
    out.push_back({*r->normalized_vote, *r->weight});
  }
  return out;
}

}  // namespace

double scalar_label(const VoteStore& store, std::uint32_t image_id, Trait trait) {
  double num = 0.0, den = 0.0;
  for (const auto& v : weighted_votes(store, image_id, trait)) {
    num += v.weight * v.value;
    den += v.weight;
  }
  if (!(den > 0.0))
    throw ZeroWeightMass("image " + std::to_string(image_id) + " has no weighted votes for " +
                         std::string(trait_name(trait)));
  return std::clamp(num / den, 0.0, 1.0);
}

TraitDistributionLabel distribution_label(const VoteStore& store, std::uint32_t image_id, Trait trait) {
  TraitDistributionLabel label;
  const auto votes = weighted_votes(store, image_id, trait);
  for (const auto& v : votes) {
    label.bins[bin_index(v.value)] += v.weight;
    label.weight_mass += v.weight;
  }
  label.vote_count = votes.size();
  if (!(label.weight_mass > 0.0))
    throw ZeroWeightMass("image " + std::to_string(image_id) + " has no weighted votes for " +
                         std::string(trait_name(trait)));
  for (auto& b : label.bins) b /= label.weight_mass;
  label.mean = scalar_label(store, image_id, trait);
  return label;
}

Distribution onehot_vote(double v) {
  if (!(v >= 0.0 && v <= 1.0)) throw ValueError("onehot_vote: value " + std::to_string(v) + " outside [0,1]");
  Distribution out{};
  out[bin_index(v)] = 1.0;
  return out;
}

// --- CSV --------------------------------------------------------------------

namespace {

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view field, std::size_t line, std::string_view what) {
  T value{};
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size() || field.empty())
    throw ParseError(line, "bad " + std::string(what) + " '" + std::string(field) + "'");
  return value;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

VoteStore read_votes(std::istream& in) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kVoteCsvHeader) throw ParseError(1, "unexpected header '" + line + "'");
  VoteStore store;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 6) throw ParseError(line_no, "expected 6 fields, got " + std::to_string(f.size()));
    VoteRecord r;
    r.voter_id = parse_number<std::uint32_t>(f[0], line_no, "voter_id");
    r.image_id = parse_number<std::uint32_t>(f[1], line_no, "image_id");
    try {
      r.trait = trait_from_name(f[2]);
    } catch (const ValueError& e) {
      throw ParseError(line_no, e.what());
    }
    r.raw_vote = parse_number<int>(f[3], line_no, "raw_vote");
    if (r.raw_vote < 0 || r.raw_vote > 3)
      throw ParseError(line_no, "raw_vote " + std::to_string(r.raw_vote) + " outside 0..3");
    if (!f[4].empty()) r.normalized_vote = parse_number<double>(f[4], line_no, "normalized_vote");
    if (!f[5].empty()) r.weight = parse_number<double>(f[5], line_no, "weight");
    try {
      store.add(r);
    } catch (const ValueError& e) {
      throw ParseError(line_no, e.what());
    }
  }
  return store;
}

void write_votes(const VoteStore& store, std::ostream& out) {
  out << kVoteCsvHeader << '\n';
  for (const auto& r : store.records()) {
    out << r.voter_id << ',' << r.image_id << ',' << trait_name(r.trait) << ',' << r.raw_vote << ',';
    if (r.normalized_vote) out << format_double(*r.normalized_vote);
    out << ',';
    if (r.weight) out << format_double(*r.weight);
    out << '\n';
  }
}

VoteStore load_votes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vote file " + path.string());
  return read_votes(in);
}

void save_votes(const VoteStore& store, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vote file " + path.string());
  write_votes(store, out);
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace impression
