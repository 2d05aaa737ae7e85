#include <doctest.h>

#include <array>
#include <cstdio>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "helpers.hpp"
#include "impression/dataset.hpp"

namespace fs = std::filesystem;
using namespace impression;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(IMPRESSION_BIN) + " " + args + " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

constexpr const char* kTinyConfig = R"([corpus]
n_subjects = 12
photos_per_subject = 2
image_size = 16
n_voters = 40
votes_per_image_train = 6
votes_per_image_test = 22
test_fraction = 0.5
seed = 3

[train]
input_size = 16
conv_filters = [4, 8]
embed_dim = 4
voter_hidden = [8]
base_epochs = 1
voter_epochs = 1
base_batch = 8

[eval]
seeds = [1]
resamples = 2
)";

/// A generated tiny corpus plus a trained voter checkpoint, built once.
struct Pipeline {
  fs::path dir, config, manifest, checkpoint;
  Pipeline() {
    dir = testing::scratch_dir("cli");
    config = dir / "run.toml";
    write_text_file(config, kTinyConfig);
    manifest = dir / "corpus" / "manifest.json";
    checkpoint = dir / "model.ckpt";
    REQUIRE(run("generate --config " + q(config) + " --out " + q(dir / "corpus")).code == 0);
    REQUIRE(run("train --config " + q(config) + " --manifest " + q(manifest) + " --checkpoint " + q(checkpoint)).code ==
            0);
  }
};

const Pipeline& pipeline() {
  static const Pipeline p;
  return p;
}

}  // namespace

TEST_CASE("usage errors exit 1") {
  CHECK(run("").code == 1);
  CHECK(run("frobnicate").code == 1);
  CHECK(run("generate").code == 1);
  CHECK(run("--help").code == 0);
}

TEST_CASE("generate") {
  const auto dir = testing::scratch_dir("cli_gen");
  write_text_file(dir / "run.toml", kTinyConfig);
  const Run r = run("generate --config " + q(dir / "run.toml") + " --out " + q(dir / "a"));
  CHECK(r.code == 0);
  CHECK(r.out.find("manifest.json") != std::string::npos);
  CHECK(fs::exists(dir / "a" / "manifest.json"));
  run("generate --config " + q(dir / "run.toml") + " --out " + q(dir / "b"));
  CHECK(read_text_file(dir / "a" / "manifest.json") == read_text_file(dir / "b" / "manifest.json"));
  CHECK(read_text_file(dir / "a" / "votes.csv") == read_text_file(dir / "b" / "votes.csv"));

  write_text_file(dir / "bad.toml", "[corpus]\nn_subjectz = 4\n");
  const Run bad = run("generate --config " + q(dir / "bad.toml") + " --out " + q(dir / "c"));
  CHECK(bad.code == 2);
  CHECK(bad.out.empty());
  CHECK(run("generate --config " + q(dir / "missing.toml") + " --out " + q(dir / "c")).code == 2);
  CHECK(run("generate --config " + q(dir / "run.toml") + " --out /proc/impression_nope").code == 3);
}

TEST_CASE("train") {
  const Pipeline& p = pipeline();
  const Run missing = run("train --config " + q(p.config) + " --manifest " + q(p.dir / "none.json") +
                          " --checkpoint " + q(p.dir / "x.ckpt"));
  CHECK(missing.code == 2);
  CHECK(missing.out.empty());

  const fs::path reg = p.dir / "reg.ckpt";
  const Run r = run("train --config " + q(p.config) + " --manifest " + q(p.manifest) + " --mode regression --out " +
                    q(reg));
  CHECK(r.code == 0);
  CHECK(r.out.find("phase 1 epoch 1 loss") != std::string::npos);
  CHECK(r.out.find("(phase 1)") != std::string::npos);
  const auto metrics = nlohmann::json::parse(read_text_file(reg.string() + ".metrics.json"));
  for (const char* key : {"phase1_loss", "phase2_loss", "seed", "config_echo", "wall_seconds", "run_config"})
    CHECK(metrics.contains(key));
  CHECK(run("train --config " + q(p.config) + " --manifest " + q(p.manifest) + " --mode ranking --out " +
            q(p.dir / "y.ckpt"))
            .code == 2);
}

TEST_CASE("score") {
  const Pipeline& p = pipeline();
  const fs::path imgs = p.dir / "some";
  fs::create_directories(imgs);
  for (const char* name : {"000000.bin", "000001.bin", "000002.bin"})
    fs::copy_file(p.dir / "corpus" / "images" / name, imgs / name, fs::copy_options::overwrite_existing);

  const Run r = run("score --config " + q(p.config) + " --checkpoint " + q(p.checkpoint) + " " + q(imgs));
  CHECK(r.code == 0);
  std::istringstream lines(r.out);
  std::string id;
  double s[3];
  std::size_t n = 0;
  while (lines >> id >> s[0] >> s[1] >> s[2]) {
    ++n;
    for (double v : s) {
      CHECK(v >= 0.05);
      CHECK(v <= 0.95);
    }
  }
  CHECK(n == 3);
  CHECK(r.out.find("000001 ") != std::string::npos);

  const Run twice = run("score --checkpoint " + q(p.checkpoint) + " " + q(imgs / "000001.bin") + " " +
                        q(imgs / "000001.bin"));
  std::istringstream tl(twice.out);
  std::string a, b;
  std::getline(tl, a);
  std::getline(tl, b);
  CHECK(a == b);
  CHECK(run("score --checkpoint " + q(p.checkpoint) + " --seed 4 " + q(imgs)).out ==
        run("score --checkpoint " + q(p.checkpoint) + " --seed 4 " + q(imgs)).out);

  const auto j = nlohmann::json::parse(run("score --json --checkpoint " + q(p.checkpoint) + " " + q(imgs)).out);
  CHECK(j["scores"].size() == 3);
  CHECK(j["config"]["mode"] == "voter");

  write_text_file(p.dir / "junk.bin", "not an image");
  const Run partial =
      run("score --checkpoint " + q(p.checkpoint) + " " + q(p.dir / "junk.bin") + " " + q(imgs / "000000.bin"));
  CHECK(partial.code == 0);
  const Run none = run("score --checkpoint " + q(p.checkpoint) + " " + q(p.dir / "junk.bin"));
  CHECK(none.code == 5);
  CHECK(none.out.empty());
  CHECK(run("score --checkpoint " + q(p.dir / "junk.bin") + " " + q(imgs)).code == 3);
}

TEST_CASE("evaluate writes reports and is reproducible") {
  const Pipeline& p = pipeline();
  const auto eval = [&](const fs::path& out) {
    return run("evaluate --config " + q(p.config) + " --manifest " + q(p.manifest) + " --checkpoint " +
               q(p.checkpoint) + " --out " + q(out));
  };
  const Run a = eval(p.dir / "rep_a");
  const Run b = eval(p.dir / "rep_b");
  CHECK(a.code == 0);
  CHECK(a.out == b.out);
  CHECK(a.out.find("normalized_weighted") != std::string::npos);
  for (const char* f : {"correlation.json", "votes_worth.json", "oracle.json", "summary.txt"})
    CHECK(read_text_file(p.dir / "rep_a" / f) == read_text_file(p.dir / "rep_b" / f));

  const auto corr = nlohmann::json::parse(read_text_file(p.dir / "rep_a" / "correlation.json"));
  CHECK(corr["test"].contains("n_images"));
  CHECK(corr["test"]["traits"].contains("smart"));
  CHECK(corr["config"].contains("run_config"));
  const auto worth = nlohmann::json::parse(read_text_file(p.dir / "rep_a" / "votes_worth.json"));
  CHECK(worth.contains("curves"));
  CHECK(worth["curves"].size() == 6);
  for (const auto& c : worth["curves"]) {
    CHECK(c["curve"].size() == 15);
    CHECK(c.contains("votes_worth"));
    CHECK(c.contains("model_pc"));
    CHECK(c.contains("flavor"));
  }
  CHECK(worth.contains("config"));
}

TEST_CASE("evaluate without enough dense test images exits 6") {
  const Pipeline& p = pipeline();
  const auto dir = testing::scratch_dir("cli_sparse");
  std::string text = kTinyConfig;
  text.replace(text.find("votes_per_image_test = 22"), 25, "votes_per_image_test = 12");
  write_text_file(dir / "run.toml", text);
  REQUIRE(run("generate --config " + q(dir / "run.toml") + " --out " + q(dir / "corpus")).code == 0);
  const Run r = run("evaluate --config " + q(dir / "run.toml") + " --manifest " + q(dir / "corpus" / "manifest.json") +
                    " --checkpoint " + q(p.checkpoint) + " --out " + q(dir / "rep"));
  CHECK(r.code == 6);
  CHECK(r.out.empty());
}
