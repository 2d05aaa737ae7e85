#include "impression/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "impression/dataset.hpp"
#include "impression/error.hpp"

namespace impression {

namespace {

enum Stream : std::uint64_t {
  kRenderStream = 1,
  kVoteStream = 2,
  kOracleStream = 3,
  kPopulationStream = 4,
  kLatentStream = 5,
};

// Latent thresholds separating raw votes 0|1, 1|2, 2|3 under round-half-up of
// 1.5 + 2 * latent.
constexpr std::array<double, 3> kVoteThresholds{-0.5, 0.0, 0.5};

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

}  // namespace

void CorpusConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ValueError(std::string("corpus config: ") + what);
  };
  require(n_subjects > 0 && photos_per_subject > 0, "subject and photo counts must be positive");
  require(image_size >= 16, "image_size must be at least 16");
  require(channels > 0, "channels must be positive");
  require(n_voters > 0, "n_voters must be positive");
  require(votes_per_image_train > 0 && votes_per_image_test > 0, "votes per image must be positive");
  require(votes_per_image_train <= n_voters && votes_per_image_test <= n_voters,
          "votes per image cannot exceed n_voters");
  require(test_fraction >= 0.0 && test_fraction < 1.0, "test_fraction must lie in [0,1)");
  require(oracle_mc >= 10000, "oracle_mc must be at least 10000");
  require(voters.scale_median >= 0.0 && voters.scale_log_sd >= 0.0, "voter scale parameters must be non-negative");
  require(voters.noise_min >= 0.0 && voters.noise_max >= voters.noise_min, "voter noise range invalid");
  require(voters.taste_min >= 0.0 && voters.taste_max <= 1.0 && voters.taste_min <= voters.taste_max,
          "voter taste range must lie in [0,1]");
  require(voters.constant_fraction >= 0.0 && voters.constant_fraction <= 1.0, "constant_fraction must lie in [0,1]");
}

Tensor render(const LatentPhoto& photo, std::size_t size, std::size_t channels, std::uint64_t seed, double clutter) {
  if (size < 16) throw ValueError("render: size must be at least 16");
  Rng rng(derive_seed(seed, kRenderStream, photo.image_id));
  const double angle = std::numbers::pi * uniform01(rng);
  const double phase = 2.0 * std::numbers::pi * uniform01(rng);
  const double frequency = 3.0 + 9.0 * photo.tau[0];
  const double radius = 0.12 + 0.22 * photo.tau[1];
  const double luminance = 0.2 + 0.45 * photo.tau[2];
  const double ca = std::cos(angle), sa = std::sin(angle);

  struct Blob {
    double x, y, sigma, amplitude;
  };
  std::array<Blob, 3> blobs{};
  for (auto& b : blobs) b = {uniform01(rng), uniform01(rng), 0.03 + 0.05 * uniform01(rng), 0.3 * uniform01(rng) - 0.15};

  const double n = static_cast<double>(size);
  Tensor image({size, size, channels}, 0.0);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / n;
      const double v = (static_cast<double>(y) + 0.5) / n;
      const double gradient = luminance + 0.12 * (v - 0.5);
      const double stripes = 0.15 * std::sin(2.0 * std::numbers::pi * frequency * (u * ca + v * sa) + phase);
      const double dist = std::hypot(u - 0.5, v - 0.5);
      const double disc = std::clamp((radius - dist) * n + 0.5, 0.0, 1.0);
      double value = gradient + stripes * (1.0 - disc) + 0.25 * disc;
      if (clutter > 0.0) {
        double c = 0.0;
        for (const auto& b : blobs) {
          const double d2 = (u - b.x) * (u - b.x) + (v - b.y) * (v - b.y);
          c += b.amplitude * std::exp(-d2 / (2.0 * b.sigma * b.sigma));
        }
        c += normal(rng, 0.0, 0.02);
        value += clutter * c;
      }
      for (std::size_t ch = 0; ch < channels; ++ch)
        image[(y * size + x) * channels + ch] = std::clamp(value * (1.0 - 0.08 * static_cast<double>(ch)), 0.0, 1.0);
    }
  return image;
}

double latent_mean(const SimVoter& voter, const LatentPhoto& photo, Trait trait) {
  const std::size_t t = trait_index(trait);
  const double avg = (photo.tau[0] + photo.tau[1] + photo.tau[2]) / 3.0;
  const double affinity = voter.taste[t] * photo.tau[t] + (1.0 - voter.taste[t]) * avg;
  return voter.scale * (affinity - 0.5) + voter.bias;
}

int quantize_vote(double latent) {
  const double v = std::floor(1.5 + 2.0 * latent + 0.5);
  return static_cast<int>(std::clamp(v, 0.0, 3.0));
}

int simulate_vote(const SimVoter& voter, const LatentPhoto& photo, Trait trait, Rng& rng) {
  return quantize_vote(latent_mean(voter, photo, trait) + normal(rng, 0.0, voter.noise_sigma));
}

std::array<double, 4> vote_probabilities(const SimVoter& voter, const LatentPhoto& photo, Trait trait) {
  const double mu = latent_mean(voter, photo, trait);
  std::array<double, 3> below{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (voter.noise_sigma > 0.0)
      below[i] = normal_cdf((kVoteThresholds[i] - mu) / voter.noise_sigma);
    else
      below[i] = mu < kVoteThresholds[i] ? 1.0 : 0.0;
  }
  return {below[0], below[1] - below[0], below[2] - below[1], 1.0 - below[2]};
}

VoterPopulation::VoterPopulation(std::vector<SimVoter> voters, const std::vector<LatentPhoto>& reference)
    : voters_(std::move(voters)) {
  if (voters_.empty()) throw ValueError("voter population is empty");
  if (reference.empty()) throw ValueError("voter population needs reference photos");
  tables_.resize(voters_.size());
  for (std::size_t j = 0; j < voters_.size(); ++j)
    for (Trait trait : kTraits) {
      std::array<double, 4> dist{};
      for (const auto& photo : reference) {
        const auto p = vote_probabilities(voters_[j], photo, trait);
        for (std::size_t r = 0; r < 4; ++r) dist[r] += p[r];
      }
      for (auto& d : dist) d /= static_cast<double>(reference.size());
      auto& table = tables_[j][trait_index(trait)];
      double below = 0.0;
      for (std::size_t r = 0; r < 4; ++r) {
        table[r] = std::clamp(below + 0.5 * dist[r], 0.0, 1.0);
        below += dist[r];
      }
    }
}

double VoterPopulation::normalized(std::size_t voter_index, Trait trait, int raw) const {
  return tables_.at(voter_index)[trait_index(trait)].at(static_cast<std::size_t>(raw));
}

OracleEstimate oracle_score(const LatentPhoto& photo, Trait trait, const VoterPopulation& population,
                            std::size_t n_mc, std::uint64_t seed) {
  if (n_mc < 10000) throw ValueError("oracle_score: n_mc must be at least 10000");
  Rng rng(derive_seed(seed, kOracleStream, (static_cast<std::uint64_t>(photo.image_id) << 2) | trait_index(trait)));
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < n_mc; ++i) {
    const std::size_t j = uniform_index(rng, population.size());
    const int raw = simulate_vote(population.voters()[j], photo, trait, rng);
    const double v = population.normalized(j, trait, raw);
    sum += v;
    sum_sq += v * v;
  }
  const double n = static_cast<double>(n_mc);
  const double m = sum / n;
  const double var = std::max(0.0, (sum_sq - n * m * m) / (n - 1.0));
  return {m, std::sqrt(var / n)};
}

double exact_oracle_score(const LatentPhoto& photo, Trait trait, const VoterPopulation& population) {
  double total = 0.0;
  for (std::size_t j = 0; j < population.size(); ++j) {
    const auto p = vote_probabilities(population.voters()[j], photo, trait);
    for (int r = 0; r < 4; ++r) total += p[static_cast<std::size_t>(r)] * population.normalized(j, trait, r);
  }
  return total / static_cast<double>(population.size());
}

namespace {

std::vector<SimVoter> sample_voters(const CorpusConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, kPopulationStream));
  const auto& vc = cfg.voters;
  std::vector<SimVoter> voters(cfg.n_voters);
  for (std::size_t j = 0; j < cfg.n_voters; ++j) {
    SimVoter& v = voters[j];
    v.voter_id = static_cast<std::uint32_t>(j);
    v.bias = normal(rng, 0.0, vc.bias_sd);
    v.scale = vc.scale_median * std::exp(normal(rng, 0.0, vc.scale_log_sd));
    for (auto& t : v.taste) t = vc.taste_min + (vc.taste_max - vc.taste_min) * uniform01(rng);
    v.noise_sigma = vc.noise_min + (vc.noise_max - vc.noise_min) * uniform01(rng);
    if (uniform01(rng) < vc.constant_fraction) {
      v.scale = 0.0;
      v.noise_sigma = 0.0;
    }
  }
  return voters;
}

}  // namespace

Corpus simulate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  Corpus corpus;
  corpus.config = cfg;

  Rng latent_rng(derive_seed(cfg.seed, kLatentStream));
  std::vector<std::uint32_t> subjects(cfg.n_subjects);
  std::iota(subjects.begin(), subjects.end(), 0u);
  std::shuffle(subjects.begin(), subjects.end(), latent_rng);
  const auto n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * static_cast<double>(cfg.n_subjects)));
  std::vector<bool> subject_is_test(cfg.n_subjects, false);
  for (std::size_t i = 0; i < n_test; ++i) subject_is_test[subjects[i]] = true;

  for (std::uint32_t s = 0; s < cfg.n_subjects; ++s) {
    TraitVector base{};
    for (auto& b : base) b = 0.5 + cfg.subject_spread * (2.0 * uniform01(latent_rng) - 1.0);
    for (std::size_t p = 0; p < cfg.photos_per_subject; ++p) {
      LatentPhoto photo;
      photo.image_id = static_cast<std::uint32_t>(corpus.photos.size());
      photo.subject_id = s;
      for (std::size_t t = 0; t < kTraitCount; ++t) {
        photo.context_offset[t] = normal(latent_rng, 0.0, cfg.context_sd);
        photo.tau[t] = std::clamp(base[t] + photo.context_offset[t], 0.0, 1.0);
      }
      corpus.photos.push_back(photo);
      corpus.splits.push_back(subject_is_test[s] ? Split::test : Split::train);
    }
  }

  corpus.voters = sample_voters(cfg);
  std::vector<std::uint32_t> pool(cfg.n_voters);
  for (const auto& photo : corpus.photos) {
    Rng rng(derive_seed(cfg.seed, kVoteStream, photo.image_id));
    const std::size_t k = corpus.splits[photo.image_id] == Split::test ? cfg.votes_per_image_test
                                                                       : cfg.votes_per_image_train;
    std::iota(pool.begin(), pool.end(), 0u);
    for (std::size_t i = 0; i < k; ++i) {
      std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
      const SimVoter& voter = corpus.voters[pool[i]];
      for (Trait trait : kTraits) {
        VoteRecord r;
        r.voter_id = voter.voter_id;
        r.image_id = photo.image_id;
        r.trait = trait;
        r.raw_vote = simulate_vote(voter, photo, trait, rng);
        corpus.votes.add(r);
      }
    }
  }
  return corpus;
}

namespace {

nlohmann::json corpus_config_json(const CorpusConfig& c) {
  return {
      {"n_subjects", c.n_subjects},
      {"photos_per_subject", c.photos_per_subject},
      {"image_size", c.image_size},
      {"channels", c.channels},
      {"n_voters", c.n_voters},
      {"votes_per_image_train", c.votes_per_image_train},
      {"votes_per_image_test", c.votes_per_image_test},
      {"test_fraction", c.test_fraction},
      {"subject_spread", c.subject_spread},
      {"context_sd", c.context_sd},
      {"clutter", c.clutter},
      {"oracle_mc", c.oracle_mc},
      {"seed", c.seed},
      {"voters",
       {{"bias_sd", c.voters.bias_sd},
        {"scale_median", c.voters.scale_median},
        {"scale_log_sd", c.voters.scale_log_sd},
        {"taste_min", c.voters.taste_min},
        {"taste_max", c.voters.taste_max},
        {"noise_min", c.voters.noise_min},
        {"noise_max", c.voters.noise_max},
        {"constant_fraction", c.voters.constant_fraction}}},
  };
}

}  // namespace

GeneratedCorpus generate_corpus(const CorpusConfig& cfg, const std::filesystem::path& out_dir) {
  const Corpus corpus = simulate_corpus(cfg);
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());

  Manifest manifest;
  manifest.root = out_dir;
  manifest.votes_csv = "votes.csv";
  manifest.truth_csv = "truth.csv";
  manifest.config = corpus_config_json(cfg);

  const VoterPopulation population(corpus.voters, corpus.photos);
  TruthTable truth;
  GeneratedCorpus out;
  for (const auto& photo : corpus.photos) {
    char name[32];
    std::snprintf(name, sizeof name, "%06u.bin", photo.image_id);
    const fs::path rel = fs::path("images") / name;
    save_image(render(photo, cfg.image_size, cfg.channels, cfg.seed, cfg.clutter), out_dir / rel);
    const Split split = corpus.splits[photo.image_id];
    manifest.images.push_back({photo.image_id, photo.subject_id, rel, split});
    (split == Split::test ? out.n_test : out.n_train)++;
    for (Trait trait : kTraits) {
      const auto est = oracle_score(photo, trait, population, cfg.oracle_mc, cfg.seed);
      truth.score[photo.image_id][trait_index(trait)] = est.mean;
      truth.standard_error[photo.image_id][trait_index(trait)] = est.standard_error;
    }
  }
  save_votes(corpus.votes, out_dir / manifest.votes_csv);
  save_truth(truth, out_dir / manifest.truth_csv);
  out.manifest = out_dir / "manifest.json";
  save_manifest(manifest, out.manifest);
  out.n_images = corpus.photos.size();
  out.n_vote_rows = corpus.votes.size();
  return out;
}

}  // namespace impression
