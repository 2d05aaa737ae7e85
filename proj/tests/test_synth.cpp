#include <doctest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "impression/dataset.hpp"
#include "impression/error.hpp"
#include "impression/stats.hpp"

using namespace impression;

namespace {

LatentPhoto photo(TraitVector tau, std::uint32_t id = 1) {
  LatentPhoto p;
  p.image_id = id;
  p.tau = tau;
  return p;
}

double mean_of(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s / static_cast<double>(t.size());
}

std::vector<LatentPhoto> spread_photos(std::size_t n) {
  std::vector<LatentPhoto> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    out.push_back(photo({v, v, v}, static_cast<std::uint32_t>(i)));
  }
  return out;
}

}  // namespace

TEST_CASE("render is deterministic and bounded") {
  const LatentPhoto p = photo({0.3, 0.6, 0.2});
  const Tensor a = render(p, 32, 2, 9), b = render(p, 32, 2, 9);
  CHECK(a == b);
  CHECK(a.shape() == Shape{32, 32, 2});
  for (double v : a.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK_FALSE(render(p, 32, 2, 10) == a);
  CHECK_THROWS_AS(render(p, 8, 1, 1), ValueError);
}

TEST_CASE("render luminance rises with the traits") {
  CHECK(mean_of(render(photo({0, 0, 0}), 32, 1, 4, 0.0)) < mean_of(render(photo({1, 1, 1}), 32, 1, 4, 0.0)));
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const double lo = uniform01(rng) * 0.8;
    TraitVector a{0.5, 0.5, lo}, b{0.5, 0.5, lo + 0.2};
    CHECK(mean_of(render(photo(a), 32, 1, 4, 0.0)) < mean_of(render(photo(b), 32, 1, 4, 0.0)));
  }
}

TEST_CASE("the disc trait only changes pixels in the annulus") {
  const std::size_t n = 48;
  const double t_small = 0.2, t_large = 0.7;
  const Tensor a = render(photo({0.4, t_small, 0.6}), n, 1, 5, 0.0);
  const Tensor b = render(photo({0.4, t_large, 0.6}), n, 1, 5, 0.0);
  const double r0 = 0.12 + 0.22 * t_small - 1.0 / static_cast<double>(n);
  const double r1 = 0.12 + 0.22 * t_large + 1.0 / static_cast<double>(n);
  std::size_t changed = 0;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(n) - 0.5;
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(n) - 0.5;
      const double d = std::hypot(u, v);
      const bool differs = a[y * n + x] != b[y * n + x];
      if (d < r0 || d > r1) CHECK_FALSE(differs);
      changed += differs;
    }
  CHECK(changed > 0);
}

TEST_CASE("rendering separates distinct latents without clutter") {
  Rng rng(12);
  for (int i = 0; i < 50; ++i) {
    TraitVector a{uniform01(rng), uniform01(rng), uniform01(rng)};
    TraitVector b = a;
    const std::size_t t = uniform_index(rng, 3);
    b[t] = a[t] > 0.5 ? a[t] - 0.06 : a[t] + 0.06;
    const Tensor x = render(photo(a), 32, 1, 3, 0.0), y = render(photo(b), 32, 1, 3, 0.0);
    double max_diff = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) max_diff = std::max(max_diff, std::abs(x[k] - y[k]));
    CHECK(max_diff > 1e-6);
  }
}

TEST_CASE("vote quantization examples") {
  SimVoter v;
  v.scale = 1.0;
  const LatentPhoto mid = photo({0.5, 0.5, 0.5});
  Rng rng(1);
  CHECK(latent_mean(v, mid, Trait::smart) == 0.0);
  CHECK(simulate_vote(v, mid, Trait::smart, rng) == 2);
  CHECK(quantize_vote(-0.5) == 1);
  CHECK(quantize_vote(-0.5000001) == 0);
  CHECK(quantize_vote(0.5) == 3);

  SimVoter harsh = v;
  harsh.bias = -10.0;
  harsh.noise_sigma = 0.3;
  for (int i = 0; i < 50; ++i)
    CHECK(simulate_vote(harsh, photo({uniform01(rng), uniform01(rng), uniform01(rng)}), Trait::attractive, rng) == 0);

  SimVoter flat = v;
  flat.scale = 0.0;
  const int first = simulate_vote(flat, photo({0.1, 0.2, 0.3}), Trait::smart, rng);
  for (int i = 0; i < 50; ++i)
    CHECK(simulate_vote(flat, photo({uniform01(rng), uniform01(rng), uniform01(rng)}), Trait::smart, rng) == first);
}

TEST_CASE("noiseless full-taste votes are monotone in the trait") {
  SimVoter v;
  v.scale = 2.0;
  Rng rng(2);
  for (Trait t : kTraits) {
    int last = -1;
    for (int i = 0; i <= 100; ++i) {
      TraitVector tau{0.3, 0.6, 0.4};
      tau[trait_index(t)] = i / 100.0;
      const int r = simulate_vote(v, photo(tau), t, rng);
      CHECK(r >= last);
      last = r;
    }
  }
}

TEST_CASE("vote probabilities agree with simulation") {
  SimVoter v{3, 0.1, 2.2, {0.7, 0.5, 0.9}, 0.35};
  const LatentPhoto p = photo({0.3, 0.8, 0.55});
  const auto probs = vote_probabilities(v, p, Trait::trustworthy);
  CHECK(probs[0] + probs[1] + probs[2] + probs[3] == doctest::Approx(1.0));
  Rng rng(5);
  std::array<double, 4> counts{};
  const int n = 100000;
  for (int i = 0; i < n; ++i) counts[simulate_vote(v, p, Trait::trustworthy, rng)] += 1.0 / n;
  for (int r = 0; r < 4; ++r) CHECK(std::abs(counts[r] - probs[r]) < 0.01);
}

TEST_CASE("oracle of a single noiseless voter is that voter's normalized vote") {
  SimVoter v{0, 0.05, 1.5, {1, 1, 1}, 0.0};
  const auto refs = spread_photos(20);
  VoterPopulation pop({v}, refs);
  const LatentPhoto p = photo({0.7, 0.2, 0.9});
  for (Trait t : kTraits) {
    Rng rng(0);
    const int raw = simulate_vote(v, p, t, rng);
    const auto est = oracle_score(p, t, pop, 10000, 3);
    CHECK(est.mean == doctest::Approx(pop.normalized(0, t, raw)).epsilon(1e-12));
    CHECK(exact_oracle_score(p, t, pop) == pop.normalized(0, t, raw));
  }
  CHECK_THROWS_AS(oracle_score(p, Trait::smart, pop, 9999, 3), ValueError);
}

TEST_CASE("symmetric population scores a neutral photo at one half") {
  std::vector<SimVoter> voters;
  for (std::uint32_t i = 0; i < 40; ++i) {
    const double b = 0.05 * static_cast<double>(i % 20);
    voters.push_back({i, i < 20 ? b : -b, 1.0 + 0.1 * static_cast<double>(i % 5), {1, 1, 1}, 0.2});
  }
  VoterPopulation pop(voters, spread_photos(21));
  const LatentPhoto mid = photo({0.5, 0.5, 0.5});
  for (Trait t : kTraits) {
    const auto est = oracle_score(mid, t, pop, 20000, 8);
    CHECK(std::abs(est.mean - 0.5) <= 3.0 * est.standard_error);
    CHECK(exact_oracle_score(mid, t, pop) == doctest::Approx(0.5).epsilon(1e-9));
  }
}

TEST_CASE("oracle standard error shrinks like one over root n") {
  const Corpus c = simulate_corpus(testing::tiny_corpus());
  VoterPopulation pop(c.voters, c.photos);
  const auto a = oracle_score(c.photos[0], Trait::smart, pop, 10000, 1);
  const auto b = oracle_score(c.photos[0], Trait::smart, pop, 20000, 1);
  CHECK(b.standard_error / a.standard_error == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(0.05));
  CHECK(std::abs(a.mean - exact_oracle_score(c.photos[0], Trait::smart, pop)) <= 4.0 * a.standard_error);
}

TEST_CASE("empirical vote means converge to the oracle") {
  CorpusConfig cfg = testing::tiny_corpus(5);
  cfg.n_subjects = 10;
  cfg.photos_per_subject = 2;
  cfg.n_voters = 200;
  const Corpus c = simulate_corpus(cfg);
  VoterPopulation pop(c.voters, c.photos);
  Rng rng(77);
  std::size_t within = 0, total = 0;
  for (const auto& p : c.photos)
    for (Trait t : kTraits) {
      std::vector<double> norm;
      for (std::size_t j = 0; j < pop.size(); ++j) norm.push_back(pop.normalized(j, t, simulate_vote(c.voters[j], p, t, rng)));
      const double m = mean(norm);
      const double se_emp = sample_sd(norm) / std::sqrt(static_cast<double>(norm.size()));
      const auto est = oracle_score(p, t, pop, 10000, p.image_id);
      within += std::abs(m - est.mean) <= 3.0 * std::hypot(se_emp, est.standard_error);
      ++total;
    }
  CHECK(total == 60);
  CHECK(within >= 57);
}

TEST_CASE("simulated corpus has the configured counts and a subject-disjoint split") {
  CorpusConfig cfg = testing::tiny_corpus(4);
  cfg.n_subjects = 10;
  cfg.photos_per_subject = 2;
  cfg.votes_per_image_train = 5;
  cfg.votes_per_image_test = 5;
  const Corpus c = simulate_corpus(cfg);
  CHECK(c.photos.size() == 20);
  // every selected voter answers all three traits
  CHECK(c.votes.size() == 20 * 5 * kTraitCount);
  for (Trait t : kTraits) {
    std::size_t n = 0;
    for (const auto& r : c.votes.records()) n += r.trait == t;
    CHECK(n == 100);
  }
  std::set<std::uint32_t> train_subjects, test_subjects;
  for (std::size_t i = 0; i < c.photos.size(); ++i) {
    (c.splits[i] == Split::train ? train_subjects : test_subjects).insert(c.photos[i].subject_id);
    CHECK(c.votes.voters_of(c.photos[i].image_id).size() == 5);
  }
  for (auto s : train_subjects) CHECK_FALSE(test_subjects.contains(s));
  CHECK_FALSE(test_subjects.empty());
  for (const auto& p : c.photos)
    for (double t : p.tau) {
      CHECK(t >= 0.0);
      CHECK(t <= 1.0);
    }
}

TEST_CASE("generated corpus is byte-identical for a seed") {
  const CorpusConfig cfg = testing::tiny_corpus(6);
  const auto d1 = testing::scratch_dir("gen1"), d2 = testing::scratch_dir("gen2");
  const auto g1 = generate_corpus(cfg, d1);
  generate_corpus(cfg, d2);
  for (const char* f : {"manifest.json", "votes.csv", "truth.csv", "images/000000.bin"})
    CHECK(read_text_file(d1 / f) == read_text_file(d2 / f));
  CHECK(g1.n_images == 24);
  CHECK(g1.n_train + g1.n_test == 24);

  const Manifest m = load_manifest(g1.manifest);
  CHECK(m.images.size() == 24);
  const Tensor img = load_image(m.resolve(m.images.front().path));
  CHECK(img.shape() == Shape{16, 16, 1});
  const TruthTable truth = load_truth(m.resolve(m.truth_csv));
  CHECK(truth.score.size() == 24);
  for (const auto& [id, se] : truth.standard_error)
    for (double s : se) CHECK(s > 0.0);
}

TEST_CASE("generation reports unwritable destinations") {
  CHECK_THROWS_AS(generate_corpus(testing::tiny_corpus(), "/proc/impression_cannot_write"), IoError);
}

TEST_CASE("image files round-trip through float32") {
  Rng rng(3);
  Tensor t = testing::random_tensor({5, 4, 3}, rng, 0, 1);
  const auto dir = testing::scratch_dir("img");
  save_image(t, dir / "x.bin");
  const Tensor back = load_image(dir / "x.bin");
  REQUIRE(back.shape() == t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(back[i] == static_cast<double>(static_cast<float>(t[i])));
  write_text_file(dir / "short.bin", "abc");
  CHECK_THROWS_AS(load_image(dir / "short.bin"), IoError);
}
