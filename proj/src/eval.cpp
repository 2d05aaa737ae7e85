#include "impression/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "impression/error.hpp"
#include "impression/parallel.hpp"
#include "impression/stats.hpp"

namespace impression {

// --- correlation ------------------------------------------------------------

Interval fisher_interval(double r, std::size_t n) {
  if (n <= 3) return {};
  constexpr double z95 = 1.959963984540054;
  const double rc = std::clamp(r, -0.999999999999, 0.999999999999);
  const double z = std::atanh(rc);
  const double se = 1.0 / std::sqrt(static_cast<double>(n - 3));
  return {std::tanh(z - z95 * se), std::tanh(z + z95 * se)};
}

double CorrelationReport::mean_pc() const {
  if (traits.empty()) return 0.0;
  double s = 0.0;
  for (const auto& t : traits) s += t.pc;
  return s / static_cast<double>(traits.size());
}

const TraitCorrelation& CorrelationReport::at(Trait t) const {
  for (const auto& tc : traits)
    if (tc.trait == t) return tc;
  throw ValueError("correlation report lacks trait " + std::string(trait_name(t)));
}

CorrelationReport correlate(const ScoreTable& predicted, const ScoreTable& truth) {
  std::vector<std::uint32_t> ids;
  for (const auto& [id, _] : predicted)
    if (truth.contains(id)) ids.push_back(id);
  if (ids.size() < 3) throw NotEnoughImages("correlation needs at least 3 scored images, got " + std::to_string(ids.size()));
  CorrelationReport report;
  report.n_images = ids.size();
  for (Trait t : kTraits) {
    std::vector<double> a, b;
    for (auto id : ids) {
      a.push_back(predicted.at(id)[trait_index(t)]);
      b.push_back(truth.at(id)[trait_index(t)]);
    }
    const double r = pearson(a, b);
    report.traits.push_back({t, r, fisher_interval(r, ids.size())});
  }
  return report;
}

// --- votes-worth ------------------------------------------------------------

std::string_view flavor_name(VoteFlavor f) { return f == VoteFlavor::raw ? "raw" : "normalized_weighted"; }

VoteFlavor flavor_from_name(std::string_view name) {
  if (name == "raw") return VoteFlavor::raw;
  if (name == "normalized_weighted" || name == "normalized") return VoteFlavor::normalized_weighted;
  throw ValueError("unknown vote flavor '" + std::string(name) + "'");
}

HoldoutPlan holdout_plan(const VoteStore& store, Trait trait, Rng& rng, const std::vector<std::uint32_t>* restrict_to) {
  const std::vector<std::uint32_t> ids = restrict_to ? *restrict_to : store.image_ids();
  HoldoutPlan plan;
  for (std::uint32_t id : ids) {
    auto votes = store.by_image_trait(id, trait);
    if (votes.size() < kMinVotesForWorth) {
      ++plan.excluded;
      continue;
    }
    // partial Fisher-Yates: the first kHeldVotes slots become the holdout
    for (std::size_t i = 0; i < kHeldVotes; ++i)
      std::swap(votes[i], votes[i + uniform_index(rng, votes.size() - i)]);
    HoldoutImage img;
    img.image_id = id;
    img.held.assign(votes.begin(), votes.begin() + kHeldVotes);
    img.rest.assign(votes.begin() + kHeldVotes, votes.end());
    plan.images.push_back(std::move(img));
  }
  if (plan.images.size() < kMinEligibleImages)
    throw NotEnoughImages("votes-worth needs at least " + std::to_string(kMinEligibleImages) + " images with " +
                          std::to_string(kMinVotesForWorth) + "+ votes; " + std::to_string(plan.images.size()) +
                          " eligible, " + std::to_string(plan.excluded) + " excluded");
  return plan;
}

double flavor_mean(std::span<const VoteRecord* const> votes, VoteFlavor flavor) {
  if (votes.empty()) throw ValueError("flavor_mean of no votes");
  double sum = 0.0;
  if (flavor == VoteFlavor::raw) {
    for (const auto* r : votes) sum += r->raw_vote;
    return sum / static_cast<double>(votes.size());
  }
  double wsum = 0.0, plain = 0.0;
  for (const auto* r : votes) {
    if (!r->normalized_vote || !r->weight) throw ValueError("votes must be normalized and weighted");
    sum += *r->weight * *r->normalized_vote;
    wsum += *r->weight;
    plain += *r->normalized_vote;
  }
  return wsum > 0.0 ? sum / wsum : plain / static_cast<double>(votes.size());
}

std::string VotesWorth::text() const {
  if (at_least_max) return "≥" + std::to_string(kHeldVotes);
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << value;
  return os.str();
}

VotesWorth interpolate_votes_worth(std::span<const double> curve, double model_pc) {
  if (curve.empty()) throw ValueError("empty correlation curve");
  if (model_pc > curve.back()) return {true, static_cast<double>(curve.size())};
  if (model_pc <= 0.0) return {false, 0.0};
  for (std::size_t i = 0; i < curve.size(); ++i) {
    if (curve[i] < model_pc) continue;
    const double k = static_cast<double>(i + 1);
    const double lo = i == 0 ? 0.0 : curve[i - 1];
    if (curve[i] == model_pc || curve[i] == lo) return {false, k};
    return {false, k - 1.0 + (model_pc - lo) / (curve[i] - lo)};
  }
  return {true, static_cast<double>(curve.size())};
}

VotesWorthCurve votes_worth(const VoteStore& store, const std::map<std::uint32_t, double>& model_scores, Trait trait,
                            VoteFlavor flavor, Rng& rng, std::size_t resamples) {
  if (resamples == 0) throw ValueError("votes_worth needs at least one resample");
  std::vector<std::uint32_t> ids;
  std::size_t unscored = 0;
  for (auto id : store.image_ids()) {
    if (model_scores.contains(id))
      ids.push_back(id);
    else
      ++unscored;
  }
  VotesWorthCurve out;
  out.trait = trait;
  out.flavor = flavor;
  out.resamples = resamples;
  for (std::size_t s = 0; s < resamples; ++s) {
    const HoldoutPlan plan = holdout_plan(store, trait, rng, &ids);
    const std::size_t n = plan.images.size();
    std::vector<double> truth(n), model(n), kmean(n);
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = flavor_mean(plan.images[i].rest, flavor);
      model[i] = model_scores.at(plan.images[i].image_id);
    }
    for (std::size_t k = 1; k <= kHeldVotes; ++k) {
      for (std::size_t i = 0; i < n; ++i)
        kmean[i] = flavor_mean(std::span(plan.images[i].held).first(k), flavor);
      out.curve[k - 1] += pearson(kmean, truth);
    }
    out.model_pc += pearson(model, truth);
    out.n_images = n;
    out.excluded = plan.excluded + unscored;
  }
  for (double& c : out.curve) c /= static_cast<double>(resamples);
  out.model_pc /= static_cast<double>(resamples);
  out.worth = interpolate_votes_worth(out.curve, out.model_pc);
  return out;
}

nlohmann::json curve_to_json(const VotesWorthCurve& c) {
  nlohmann::json j = {{"trait", std::string(trait_name(c.trait))},
                      {"flavor", std::string(flavor_name(c.flavor))},
                      {"curve", c.curve},
                      {"model_pc", c.model_pc},
                      {"n_images", c.n_images},
                      {"excluded", c.excluded},
                      {"resamples", c.resamples}};
  if (c.worth.at_least_max)
    j["votes_worth"] = c.worth.text();
  else
    j["votes_worth"] = c.worth.value;
  return j;
}

// --- scoring ----------------------------------------------------------------

namespace {

enum : std::uint64_t { kScoreStream = 0x73636f7265 };

TraitVector score_one(const Model& model, const Tensor& h, std::uint64_t seed, std::uint32_t id,
                      std::size_t voter_sample, std::optional<HeadMode> as_mode) {
  Rng rng(derive_seed(seed, kScoreStream, id));
  if (!as_mode || *as_mode == model.mode()) return model.score_features(h, rng, voter_sample);
  if (*as_mode == HeadMode::distribution && model.mode() == HeadMode::voter) {
    TraitVector out{};
    for (Trait t : kTraits) {
      const Tensor o = model.head_output(h, t);
      Distribution d{};
      std::copy_n(o.data().data(), kBins, d.begin());
      out[trait_index(t)] = expected_vote(d);
    }
    return out;
  }
  throw ValueError("cannot score a " + std::string(head_mode_name(model.mode())) + " model as " +
                   std::string(head_mode_name(*as_mode)));
}

nlohmann::json correlation_to_json(const CorrelationReport& r) {
  nlohmann::json traits = nlohmann::json::object();
  for (const auto& t : r.traits)
    traits[std::string(trait_name(t.trait))] = {{"pc", t.pc}, {"ci95", {t.ci.low, t.ci.high}}};
  return {{"n_images", r.n_images}, {"traits", traits}, {"mean_pc", r.mean_pc()}};
}

}  // namespace

ScoreTable score_images(const Model& model, std::span<const Tensor> images, std::span<const std::uint32_t> ids,
                        std::uint64_t seed, std::size_t voter_sample, std::optional<HeadMode> as_mode) {
  if (images.size() != ids.size()) throw ValueError("score_images: image and id counts differ");
  std::vector<TraitVector> scores(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    scores[i] = score_one(model, model.features(images[i]), seed, ids[i], voter_sample, as_mode);
  });
  ScoreTable out;
  for (std::size_t i = 0; i < ids.size(); ++i) out[ids[i]] = scores[i];
  return out;
}

ScoreTable score_split(const Model& model, const Manifest& manifest, Split split, std::uint64_t seed,
                       std::size_t voter_sample) {
  const SplitImages s = load_split_images(manifest, split, model.config().base);
  return score_images(model, s.images, s.image_ids, seed, voter_sample);
}

ScoreTable vote_labels(const VoteStore& store, std::span<const std::uint32_t> ids) {
  ScoreTable out;
  for (auto id : ids) {
    TraitVector v{};
    try {
      for (Trait t : kTraits) v[trait_index(t)] = scalar_label(store, id, t);
    } catch (const ZeroWeightMass&) {
      continue;
    }
    out[id] = v;
  }
  return out;
}

namespace {

ScoreTable load_oracle(const Manifest& manifest, Split split) {
  if (manifest.truth_csv.empty()) throw IoError("manifest names no truth file");
  const auto path = manifest.resolve(manifest.truth_csv);
  if (!std::filesystem::exists(path)) throw IoError("missing truth file " + path.string());
  const TruthTable truth = load_truth(path);
  ScoreTable out;
  for (const auto& img : manifest.split(split)) {
    auto it = truth.score.find(img.image_id);
    if (it != truth.score.end()) out[img.image_id] = it->second;
  }
  return out;
}

}  // namespace

CorrelationReport evaluate_against_oracle(const Manifest& manifest, const Model& model, std::uint64_t seed,
                                          std::size_t voter_sample) {
  const ScoreTable oracle = load_oracle(manifest, Split::test);
  return correlate(score_split(model, manifest, Split::test, seed, voter_sample), oracle);
}

// --- full evaluation --------------------------------------------------------

nlohmann::json EvaluationReport::correlation_json() const {
  return {{"config", config_echo}, {"test", correlation_to_json(test)}};
}

nlohmann::json EvaluationReport::votes_worth_json() const {
  nlohmann::json curves_json = nlohmann::json::array();
  for (const auto& c : curves) curves_json.push_back(curve_to_json(c));
  return {{"config", config_echo}, {"curves", curves_json}};
}

std::optional<nlohmann::json> EvaluationReport::oracle_json() const {
  if (!oracle) return std::nullopt;
  return nlohmann::json{{"config", config_echo}, {"oracle", correlation_to_json(*oracle)}};
}

std::string EvaluationReport::summary_text() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << "test PC (n=" << test.n_images << ")\n";
  for (const auto& t : test.traits)
    os << "  " << trait_name(t.trait) << "  " << t.pc << "  [" << t.ci.low << ", " << t.ci.high << "]\n";
  if (oracle) {
    os << "oracle PC (n=" << oracle->n_images << ")\n";
    for (const auto& t : oracle->traits)
      os << "  " << trait_name(t.trait) << "  " << t.pc << "  [" << t.ci.low << ", " << t.ci.high << "]\n";
  }
  if (!curves.empty()) {
    std::vector<VoteFlavor> flavors;
    for (const auto& c : curves)
      if (std::find(flavors.begin(), flavors.end(), c.flavor) == flavors.end()) flavors.push_back(c.flavor);
    os << "votes worth\n";
    os << "  trait";
    for (auto f : flavors) os << "  " << flavor_name(f);
    os << "\n";
    for (Trait t : kTraits) {
      os << "  " << trait_name(t);
      for (auto f : flavors)
        for (const auto& c : curves)
          if (c.trait == t && c.flavor == f) os << "  " << c.worth.text();
      os << "\n";
    }
  }
  return os.str();
}

EvaluationReport evaluate_model(const Manifest& manifest, const Model& model, const EvalOptions& options) {
  EvaluationReport report;
  report.config_echo = {{"seed", options.seed},
                        {"voter_sample", options.voter_sample},
                        {"resamples", options.resamples},
                        {"model", model_config_to_json(model.config())}};
  nlohmann::json flavors = nlohmann::json::array();
  for (auto f : options.flavors) flavors.push_back(std::string(flavor_name(f)));
  report.config_echo["flavors"] = flavors;

  const VoteStore votes = prepare_votes(manifest, std::nullopt);
  const SplitImages test = load_split_images(manifest, Split::test, model.config().base);
  if (test.images.empty()) throw NotEnoughImages("manifest has no test images");
  const ScoreTable scores = score_images(model, test.images, test.image_ids, options.seed, options.voter_sample);
  report.test = correlate(scores, vote_labels(votes, test.image_ids));

  const bool has_truth = !manifest.truth_csv.empty() && std::filesystem::exists(manifest.resolve(manifest.truth_csv));
  if (has_truth) report.oracle = correlate(scores, load_oracle(manifest, Split::test));

  const std::set<std::uint32_t> test_ids(test.image_ids.begin(), test.image_ids.end());
  const VoteStore test_votes = votes.filtered([&](const VoteRecord& r) { return test_ids.contains(r.image_id); });
  for (Trait t : kTraits) {
    std::map<std::uint32_t, double> trait_scores;
    for (const auto& [id, v] : scores) trait_scores[id] = v[trait_index(t)];
    for (auto f : options.flavors) {
      Rng rng(derive_seed(options.seed, 0x776f727468, trait_index(t)));
      report.curves.push_back(votes_worth(test_votes, trait_scores, t, f, rng, options.resamples));
    }
  }
  return report;
}

void write_evaluation(const EvaluationReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create report directory " + dir.string() + ": " + ec.message());
  write_text_file(dir / "correlation.json", report.correlation_json().dump(2) + "\n");
  write_text_file(dir / "votes_worth.json", report.votes_worth_json().dump(2) + "\n");
  if (auto o = report.oracle_json()) write_text_file(dir / "oracle.json", o->dump(2) + "\n");
  write_text_file(dir / "summary.txt", report.summary_text());
}

// --- mode comparison --------------------------------------------------------

const ModeSummary& ModeComparison::of(HeadMode m) const {
  for (const auto& s : summary)
    if (s.mode == m) return s;
  throw ValueError("mode " + std::string(head_mode_name(m)) + " was not compared");
}

std::vector<double> ModeComparison::per_seed(HeadMode m) const {
  std::vector<double> out;
  for (const auto& r : runs)
    if (r.mode == m) out.push_back(r.test.mean_pc());
  return out;
}

nlohmann::json ModeComparison::to_json() const {
  nlohmann::json j;
  j["runs"] = nlohmann::json::array();
  for (const auto& r : runs)
    j["runs"].push_back({{"mode", std::string(head_mode_name(r.mode))},
                         {"seed", r.seed},
                         {"test", correlation_to_json(r.test)}});
  j["summary"] = nlohmann::json::array();
  for (const auto& s : summary)
    j["summary"].push_back({{"mode", std::string(head_mode_name(s.mode))},
                            {"mean_pc", s.mean},
                            {"sd_pc", s.sd},
                            {"trait_mean", s.trait_mean}});
  j["ordering"] = nlohmann::json::array();
  for (const auto& o : ordering)
    j["ordering"].push_back({{"better", std::string(head_mode_name(o.better))},
                             {"worse", std::string(head_mode_name(o.worse))},
                             {"seeds_ahead", o.seeds_ahead},
                             {"mean_ahead", o.mean_ahead}});
  return j;
}

std::string ModeComparison::table_text() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(1);
  os << "mode            smart  trust  attr   mean +- sd\n";
  for (const auto& s : summary) {
    std::string name(head_mode_name(s.mode));
    name.resize(14, ' ');
    os << name;
    for (double v : s.trait_mean) os << "  " << 100.0 * v;
    os << "  " << 100.0 * s.mean << " +- " << 100.0 * s.sd << "\n";
  }
  return os.str();
}

ModeComparison mode_comparison(const Manifest& manifest, std::span<const HeadMode> modes,
                               std::span<const std::uint64_t> seeds, const TrainConfig& config,
                               const TrainedModelCallback& on_model, std::size_t voter_sample) {
  if (modes.empty() || seeds.empty()) throw ValueError("mode_comparison needs modes and seeds");
  const VoteStore votes = prepare_votes(manifest, std::nullopt);
  const SplitImages test = load_split_images(manifest, Split::test, config.base);
  const ScoreTable labels = vote_labels(votes, test.image_ids);
  const bool share = std::find(modes.begin(), modes.end(), HeadMode::voter) != modes.end() &&
                     std::find(modes.begin(), modes.end(), HeadMode::distribution) != modes.end();

  ModeComparison out;
  for (std::uint64_t seed : seeds) {
    std::map<HeadMode, CorrelationReport> results;
    for (HeadMode mode : modes) {
      if (results.contains(mode)) continue;
      if (share && mode == HeadMode::distribution) continue;  // filled by the voter run
      TrainConfig c = config;
      c.mode = mode;
      c.seed = seed;
      ModelCallback phase1;
      if (share && mode == HeadMode::voter)
        phase1 = [&](const Model& m) {
          results[HeadMode::distribution] = correlate(
              score_images(m, test.images, test.image_ids, seed, voter_sample, HeadMode::distribution), labels);
          if (on_model) on_model(HeadMode::distribution, seed, m);
        };
      TrainOutcome trained = train_full(manifest, c, {}, phase1);
      results[mode] = correlate(score_images(trained.model, test.images, test.image_ids, seed, voter_sample), labels);
      if (on_model) on_model(mode, seed, trained.model);
    }
    for (HeadMode mode : modes) {
      bool seen = false;
      for (const auto& r : out.runs) seen = seen || (r.mode == mode && r.seed == seed);
      if (!seen) out.runs.push_back({mode, seed, results.at(mode)});
    }
  }

  std::vector<HeadMode> distinct;
  for (HeadMode m : modes)
    if (std::find(distinct.begin(), distinct.end(), m) == distinct.end()) distinct.push_back(m);
  for (HeadMode m : distinct) {
    ModeSummary s;
    s.mode = m;
    const auto pcs = out.per_seed(m);
    s.mean = mean(pcs);
    s.sd = sample_sd(pcs);
    for (Trait t : kTraits) {
      double sum = 0.0;
      for (const auto& r : out.runs)
        if (r.mode == m) sum += r.test.at(t).pc;
      s.trait_mean[trait_index(t)] = sum / static_cast<double>(pcs.size());
    }
    out.summary.push_back(s);
  }
  for (std::size_t a = 0; a < distinct.size(); ++a)
    for (std::size_t b = 0; b < distinct.size(); ++b) {
      if (a == b) continue;
      const auto pa = out.per_seed(distinct[a]), pb = out.per_seed(distinct[b]);
      PairOrdering o{distinct[a], distinct[b], 0, out.of(distinct[a]).mean > out.of(distinct[b]).mean};
      for (std::size_t i = 0; i < pa.size(); ++i) o.seeds_ahead += pa[i] > pb[i] ? 1 : 0;
      if (o.mean_ahead) out.ordering.push_back(o);
    }
  return out;
}

}  // namespace impression
