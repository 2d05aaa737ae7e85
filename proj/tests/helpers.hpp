#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "impression/autodiff.hpp"
#include "impression/random.hpp"
#include "impression/synth.hpp"
#include "impression/votes.hpp"

namespace testing {

using namespace impression;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape), 0.0);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * uniform01(rng);
  return t;
}

/// Values bounded away from zero so relu kinks stay outside the FD stencil.
inline Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t = random_tensor(std::move(shape), rng, 0.05, 1.0);
  for (std::size_t i = 0; i < t.size(); ++i)
    if (uniform01(rng) < 0.5) t[i] = -t[i];
  return t;
}

/// <v, w> for a fixed random w, so every output element matters.
inline Var weighted_sum(Var v, std::uint64_t seed) {
  Tape& tape = *v.tape;
  const std::size_t n = v.value().size();
  Rng rng(seed);
  Var flat = ops::reshape(v, {1, n});
  Var w = tape.constant(random_tensor({n, 1}, rng));
  return ops::sum(ops::matmul(flat, w));
}

inline VoteRecord vote(std::uint32_t voter, std::uint32_t image, Trait trait, int raw) {
  VoteRecord r;
  r.voter_id = voter;
  r.image_id = image;
  r.trait = trait;
  r.raw_vote = raw;
  return r;
}

/// Fresh directory under the system temp dir, removed first if present.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("impression_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// A corpus small enough for unit tests.
inline CorpusConfig tiny_corpus(std::uint64_t seed = 3) {
  CorpusConfig c;
  c.n_subjects = 12;
  c.photos_per_subject = 2;
  c.image_size = 16;
  c.n_voters = 40;
  c.votes_per_image_train = 6;
  c.votes_per_image_test = 22;
  c.test_fraction = 0.5;
  c.oracle_mc = 10000;
  c.seed = seed;
  return c;
}

}  // namespace testing
