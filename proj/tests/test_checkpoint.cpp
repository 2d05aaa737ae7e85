#include <doctest.h>

#include <numeric>

#include "helpers.hpp"
#include "impression/checkpoint.hpp"
#include "impression/dataset.hpp"
#include "impression/error.hpp"

using namespace impression;

namespace {

Model trained_looking(HeadMode mode, std::uint64_t seed) {
  ModelConfig c;
  c.base.input_size = 16;
  c.base.conv_blocks = {{4, 3, 2}, {8, 3, 2}};
  c.mode = mode;
  c.embed_dim = 3;
  c.voter_hidden = {6, 5};
  std::vector<std::uint32_t> ids(9);
  std::iota(ids.begin(), ids.end(), 1u);
  Model m(c, mode == HeadMode::voter ? ids : std::vector<std::uint32_t>{}, seed);
  Rng rng(seed);
  for (auto& p : m.parameters())
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] += 0.1 * (uniform01(rng) - 0.5);
  return m;
}

}  // namespace

TEST_CASE("checkpoint round trip reproduces every parameter and the probe") {
  for (HeadMode mode : {HeadMode::regression, HeadMode::classification, HeadMode::distribution, HeadMode::voter}) {
    const Model m = trained_looking(mode, 3);
    TrainingMetadata meta;
    meta.phase_completed = mode == HeadMode::voter ? 2 : 1;
    meta.seed = 42;
    meta.base_epochs = 5;
    meta.voter_epochs = 2;
    meta.train_config = {{"mode", std::string(head_mode_name(mode))}};
    const auto dir = testing::scratch_dir("ckpt");
    save_checkpoint(m, meta, dir / "m.ckpt");
    const Checkpoint back = load_checkpoint(dir / "m.ckpt");
    CHECK(back.model.mode() == mode);
    CHECK(back.metadata.phase_completed == meta.phase_completed);
    CHECK(back.metadata.seed == 42);
    CHECK(back.metadata.train_config == meta.train_config);
    REQUIRE(back.model.parameters().size() == m.parameters().size());
    for (std::size_t i = 0; i < m.parameters().size(); ++i) {
      CHECK(back.model.parameters()[i].name == m.parameters()[i].name);
      CHECK(back.model.parameters()[i].value == m.parameters()[i].value);
    }
    const Tensor a = probe_output(m), b = probe_output(back.model);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-10);
    CHECK(back.model.voters().ids() == m.voters().ids());
    CHECK(encode_checkpoint(back.model, back.metadata) == encode_checkpoint(m, meta));
  }
}

TEST_CASE("checkpoint decoding rejects bad input") {
  const Model m = trained_looking(HeadMode::voter, 1);
  const std::string bytes = encode_checkpoint(m, {});
  std::string wrong = bytes;
  wrong[0] = static_cast<char>(kCheckpointVersion + 1);
  CHECK_THROWS_AS(decode_checkpoint(wrong), ValueError);
  CHECK_THROWS_AS(decode_checkpoint(std::string_view(bytes).substr(0, bytes.size() - 3)), ValueError);
  CHECK_THROWS_AS(decode_checkpoint(std::string_view(bytes).substr(0, 5)), ValueError);
  CHECK_THROWS_AS(decode_checkpoint(""), ValueError);

  std::string tampered = bytes;
  tampered[tampered.size() - 2] ^= 0x40;
  CHECK_THROWS_AS(decode_checkpoint(tampered), ValueError);
}

TEST_CASE("missing checkpoint file is an I/O error") {
  CHECK_THROWS_AS(load_checkpoint(testing::scratch_dir("ckpt_missing") / "none.ckpt"), IoError);
}

TEST_CASE("model config survives json") {
  ModelConfig c;
  c.mode = HeadMode::classification;
  c.embed_dim = 7;
  c.voter_hidden = {3};
  c.base.conv_blocks = {{5, 3, 1}, {6, 5, 2}};
  const ModelConfig back = model_config_from_json(model_config_to_json(c));
  CHECK(back.mode == c.mode);
  CHECK(back.embed_dim == 7);
  CHECK(back.voter_hidden == c.voter_hidden);
  CHECK(back.base.conv_blocks == c.base.conv_blocks);
  CHECK(model_config_to_json(back) == model_config_to_json(c));
}
