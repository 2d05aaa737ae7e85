#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "impression/error.hpp"
#include "impression/stats.hpp"
#include "impression/train.hpp"

using namespace impression;

namespace {

TrainConfig small_train(HeadMode mode) {
  TrainConfig c;
  c.mode = mode;
  c.base.input_size = 16;
  c.base.conv_blocks = {{6, 3, 2}, {12, 3, 2}};
  c.embed_dim = 4;
  c.voter_hidden = {16};
  c.base_epochs = 2;
  c.voter_epochs = 2;
  c.base_batch = 8;
  c.voter_batch = 32;
  return c;
}

const Manifest& corpus() {
  static const Manifest m = [] {
    CorpusConfig c = testing::tiny_corpus(21);
    c.n_subjects = 16;
    c.votes_per_image_train = 8;
    return load_manifest(generate_corpus(c, testing::scratch_dir("train_corpus")).manifest);
  }();
  return m;
}

struct Labelled {
  std::vector<Tensor> images;
  BaseLabels labels;
};

Labelled all_images(HeadMode mode, const BaseNetworkConfig& base) {
  const VoteStore votes = prepare_votes(corpus(), std::nullopt);
  SplitImages a = load_split_images(corpus(), Split::train, base);
  SplitImages b = load_split_images(corpus(), Split::test, base);
  a.image_ids.insert(a.image_ids.end(), b.image_ids.begin(), b.image_ids.end());
  a.images.insert(a.images.end(), b.images.begin(), b.images.end());
  Labelled out;
  out.labels = build_base_labels(votes, a.image_ids, mode);
  for (auto id : out.labels.image_ids) {
    const auto it = std::find(a.image_ids.begin(), a.image_ids.end(), id);
    out.images.push_back(a.images[static_cast<std::size_t>(it - a.image_ids.begin())]);
  }
  return out;
}

Parameter make_param(Tensor value) { return Parameter("p", std::move(value)); }

}  // namespace

TEST_CASE("Adam first step moves each coordinate by about lr") {
  Rng rng(1);
  Parameter p = make_param(testing::random_tensor({20}, rng));
  const Tensor before = p.value;
  p.grad = testing::away_from_zero({20}, rng);
  Adam adam({&p}, 0.01);
  adam.step();
  for (std::size_t i = 0; i < 20; ++i) {
    const double d = std::abs(p.value[i] - before[i]);
    CHECK(d >= 0.9 * 0.01);
    CHECK(d <= 0.01);
    CHECK((p.value[i] - before[i]) * p.grad[i] < 0.0);
  }
  CHECK(adam.steps() == 1);
}

TEST_CASE("Adam is scale invariant at the first step") {
  Rng rng(2);
  Parameter a = make_param(testing::random_tensor({10}, rng)), b = a;
  a.grad = testing::away_from_zero({10}, rng);
  b.grad = a.grad;
  for (std::size_t i = 0; i < 10; ++i) b.grad[i] *= 1000.0;
  Adam oa({&a}, 1e-3), ob({&b}, 1e-3);
  oa.step();
  ob.step();
  for (std::size_t i = 0; i < 10; ++i) CHECK(a.value[i] == doctest::Approx(b.value[i]).epsilon(1e-9));
}

TEST_CASE("Adam leaves parameters alone under zero gradients") {
  Rng rng(3);
  Parameter p = make_param(testing::random_tensor({3, 4}, rng));
  const Tensor before = p.value;
  Adam adam({&p}, 0.1);
  for (int i = 0; i < 50; ++i) {
    adam.zero_grad();
    adam.step();
  }
  CHECK(p.value == before);
  p.grad = Tensor({4, 3}, 1.0);
  CHECK_THROWS_AS(adam.step(), ShapeError);
}

TEST_CASE("phase one overfits a small corpus in every label mode") {
  for (HeadMode mode : {HeadMode::regression, HeadMode::classification, HeadMode::distribution}) {
    CAPTURE(head_mode_name(mode));
    TrainConfig c = small_train(mode);
    c.base.conv_blocks = {{16, 3, 2}, {64, 3, 2}};
    c.base_lr = 1e-2;
    c.base_batch = 4;
    c.base_epochs = 200;
    Labelled data = all_images(mode, c.base);
    data.images.resize(std::min<std::size_t>(32, data.images.size()));
    data.labels.image_ids.resize(data.images.size());
    data.labels.targets.resize(data.images.size());
    Model m(c.model_config(), {}, 1);
    const PhaseResult r = train_base_phase(m, data.images, data.labels, c);
    REQUIRE(r.epoch_loss.size() == 200);
    CHECK(r.epoch_loss.back() < 0.1 * r.epoch_loss.front());
    const double first = (r.batch_loss[0] + r.batch_loss[1] + r.batch_loss[2]) / 3.0;
    const std::size_t n = r.batch_loss.size();
    const double last = (r.batch_loss[n - 1] + r.batch_loss[n - 2] + r.batch_loss[n - 3]) / 3.0;
    CHECK(last < first);
  }
}

TEST_CASE("zero learning rate keeps the loss trace constant") {
  TrainConfig c = small_train(HeadMode::distribution);
  c.base_lr = 0.0;
  c.base_epochs = 3;
  const Labelled data = all_images(HeadMode::distribution, c.base);
  Model m(c.model_config(), {}, 1);
  const PhaseResult r = train_base_phase(m, data.images, data.labels, c);
  for (double l : r.epoch_loss) CHECK(l == doctest::Approx(r.epoch_loss.front()).epsilon(1e-12));
}

TEST_CASE("phase one rejects mismatched labels and empty input") {
  TrainConfig c = small_train(HeadMode::regression);
  const Labelled data = all_images(HeadMode::distribution, c.base);
  Model m(c.model_config(), {}, 1);
  CHECK_THROWS(train_base_phase(m, data.images, data.labels, c));
  BaseLabels none;
  none.mode = HeadMode::regression;
  CHECK_THROWS(train_base_phase(m, {}, none, c));
}

TEST_CASE("training is deterministic for a seed") {
  const TrainConfig c = small_train(HeadMode::voter);
  const TrainOutcome a = train_full(corpus(), c), b = train_full(corpus(), c);
  CHECK(a.phase1.batch_loss == b.phase1.batch_loss);
  CHECK(a.phase2.batch_loss == b.phase2.batch_loss);
  CHECK(encode_checkpoint(a.model, a.metadata) == encode_checkpoint(b.model, b.metadata));
  nlohmann::json ma = a.metrics, mb = b.metrics;
  ma.erase("wall_seconds");
  mb.erase("wall_seconds");
  CHECK(ma == mb);
  CHECK(a.metadata.phase_completed == 2);
  CHECK(a.metrics.contains("phase1_loss"));
  CHECK(a.metrics.contains("phase2_loss"));

  TrainConfig other = c;
  other.seed = 2;
  CHECK(train_full(corpus(), other).phase1.batch_loss != a.phase1.batch_loss);
}

TEST_CASE("phase two leaves the base untouched") {
  TrainConfig c = small_train(HeadMode::voter);
  c.voter_epochs = 3;
  std::uint64_t before = 0;
  std::vector<Tensor> head_before;
  const TrainOutcome out = train_full(corpus(), c, {}, [&](const Model& m) {
    before = base_parameter_hash(m);
    for (const auto& p : m.parameters())
      if (Model::group_of(p.name) == ParamGroup::head) head_before.push_back(p.value);
  });
  CHECK(base_parameter_hash(out.model) == before);
  std::size_t k = 0;
  for (const auto& p : out.model.parameters())
    if (Model::group_of(p.name) == ParamGroup::head) CHECK(p.value == head_before[k++]);
  for (const auto& p : out.model.parameters()) CHECK(p.trainable);
}

TEST_CASE("voter phase one matches distribution training exactly") {
  TrainConfig c = small_train(HeadMode::distribution);
  const TrainOutcome d = train_full(corpus(), c);
  c.mode = HeadMode::voter;
  const TrainOutcome v = train_full(corpus(), c);
  CHECK(d.phase1.batch_loss == v.phase1.batch_loss);
  for (const auto& p : d.model.parameters()) CHECK(v.model.parameter(p.name).value == p.value);
}

TEST_CASE("mode gates the second phase") {
  const TrainOutcome r = train_full(corpus(), small_train(HeadMode::regression));
  CHECK(r.metadata.phase_completed == 1);
  CHECK(r.phase2.batch_loss.empty());
  CHECK(r.model.voters().empty());
}

TEST_CASE("zero-epoch phase two leaves the prior in place") {
  TrainConfig c = small_train(HeadMode::voter);
  c.voter_epochs = 0;
  const TrainOutcome out = train_full(corpus(), c);
  const SplitImages test = load_split_images(corpus(), Split::test, c.base);
  Rng rng(1);
  for (const auto& x : test.images)
    for (double s : out.model.score_image(x, rng)) CHECK(s == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("voters missing from the table fail before training") {
  TrainConfig c = small_train(HeadMode::voter);
  const VoteStore votes = prepare_votes(corpus(), Split::train);
  std::vector<std::uint32_t> ids = votes.voter_ids();
  ids.pop_back();
  Model m(c.model_config(), ids, 1);
  const SplitImages train = load_split_images(corpus(), Split::train, c.base);
  const std::uint64_t before = std::hash<std::string>{}(encode_checkpoint(m, {}));
  CHECK_THROWS_AS(train_voter_phase(m, train.images, train.image_ids, votes, c), UnknownVoter);
  CHECK(std::hash<std::string>{}(encode_checkpoint(m, {})) == before);
}

TEST_CASE("learned voters follow their simulated tastes") {
  // Two noiseless voters rate every photo on attractiveness: one by the
  // trait itself, one by the overall impression. Luminance carries the
  // trait, so even an untrained base separates them.
  Rng rng(5);
  std::vector<LatentPhoto> photos;
  for (std::uint32_t i = 0; i < 120; ++i) {
    LatentPhoto p;
    p.image_id = i;
    p.tau = {uniform01(rng), uniform01(rng), uniform01(rng)};
    photos.push_back(p);
  }
  const SimVoter by_trait{1, 0.0, 2.0, {1, 1, 1}, 0.0};
  const SimVoter overall{2, 0.0, 2.0, {0, 0, 0}, 0.0};
  VoteStore votes;
  std::vector<Tensor> images;
  std::vector<std::uint32_t> ids;
  for (const auto& p : photos) {
    images.push_back(render(p, 16, 1, p.image_id, 0.0));
    ids.push_back(p.image_id);
    for (const SimVoter& v : {by_trait, overall})
      for (Trait t : kTraits) votes.add(testing::vote(v.voter_id, p.image_id, t, simulate_vote(v, p, t, rng)));
  }
  normalize_votes(votes);
  compute_voter_weights(votes);

  TrainConfig c = small_train(HeadMode::voter);
  c.voter_epochs = 300;
  c.voter_lr = 3e-3;
  Model m(c.model_config(), {1, 2}, 3);
  train_voter_phase(m, images, ids, votes, c);

  // bright photos of otherwise low-scoring subjects, and the reverse
  double gap_bright = 0.0, gap_dark = 0.0;
  for (int k = 0; k < 10; ++k) {
    LatentPhoto bright, dark;
    bright.tau = {0.1, 0.1, 0.95};
    dark.tau = {0.9, 0.9, 0.05};
    const Tensor hb = m.features(render(bright, 16, 1, 1000 + k, 0.0));
    const Tensor hd = m.features(render(dark, 16, 1, 2000 + k, 0.0));
    gap_bright += m.predict_vote(hb, 1, Trait::attractive).vote - m.predict_vote(hb, 2, Trait::attractive).vote;
    gap_dark += m.predict_vote(hd, 1, Trait::attractive).vote - m.predict_vote(hd, 2, Trait::attractive).vote;
  }
  CHECK(gap_bright > 0.0);
  CHECK(gap_dark < 0.0);
}

TEST_CASE("training config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.base_lr = -1.0;
  CHECK_THROWS_AS(c.validate(), ValueError);
  c = TrainConfig{};
  c.base_batch = 0;
  CHECK_THROWS_AS(c.validate(), ValueError);
}
