// impression: generate | train | score | evaluate
//
// Exit codes: 0 ok, 1 usage, 2 config or manifest problem, 3 I/O failure,
// 4 training failure, 5 nothing scored, 6 no eligible evaluation images.

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "impression/checkpoint.hpp"
#include "impression/config.hpp"
#include "impression/dataset.hpp"
#include "impression/error.hpp"
#include "impression/eval.hpp"
#include "impression/synth.hpp"
#include "impression/train.hpp"

namespace fs = std::filesystem;
using namespace impression;

namespace {

enum Exit { kOk = 0, kUsage = 1, kConfig = 2, kIo = 3, kTraining = 4, kNothingScored = 5, kNoEligible = 6 };

struct Options {
  std::string config;
  std::string manifest;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string mode;
  bool json = false;
  std::vector<std::string> inputs;
};

int fail(int code, const std::string& what) {
  std::cerr << "impression: " << what << "\n";
  return code;
}

RunConfig load_config(const Options& o) {
  if (o.config.empty()) return RunConfig{};
  if (!fs::exists(o.config)) throw ParseError(0, "config file " + o.config + " does not exist");
  return load_run_config(o.config);
}

Manifest require_manifest(const Options& o) {
  if (o.manifest.empty()) throw ParseError(0, "--manifest is required");
  if (!fs::exists(o.manifest)) throw ParseError(0, "manifest " + o.manifest + " does not exist");
  try {
    return load_manifest(o.manifest);
  } catch (const IoError&) {
    throw;
  } catch (const Error& e) {
    throw ParseError(0, std::string("manifest ") + o.manifest + ": " + e.what());
  }
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// --- generate ---------------------------------------------------------------

int cmd_generate(const Options& o) {
  RunConfig config;
  try {
    config = load_config(o);
  } catch (const ParseError& e) {
    return fail(kConfig, std::string("config: ") + e.what());
  }
  if (o.seed) config.corpus.seed = *o.seed;
  if (o.out.empty()) return fail(kUsage, "--out is required");
  GeneratedCorpus g;
  try {
    g = generate_corpus(config.corpus, o.out);
  } catch (const IoError& e) {
    return fail(kIo, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(kIo, e.what());
  } catch (const ValueError& e) {
    return fail(kConfig, e.what());
  }
  std::cout << g.manifest.string() << "\n"
            << "images " << g.n_images << " (train " << g.n_train << ", test " << g.n_test << ")\n"
            << "vote rows " << g.n_vote_rows << "\n";
  return kOk;
}

// --- train ------------------------------------------------------------------

int cmd_train(const Options& o) {
  RunConfig config;
  Manifest manifest;
  try {
    config = load_config(o);
    if (!o.mode.empty()) config.train.mode = head_mode_from_name(o.mode);
    if (o.seed) config.train.seed = *o.seed;
    manifest = require_manifest(o);
  } catch (const IoError& e) {
    return fail(kIo, e.what());
  } catch (const Error& e) {
    return fail(kConfig, e.what());
  }
  const std::string target = !o.checkpoint.empty() ? o.checkpoint : o.out;
  if (target.empty()) return fail(kUsage, "--checkpoint (output path) is required");

  std::ostringstream log;
  std::optional<TrainOutcome> outcome;
  try {
    outcome.emplace(train_full(manifest, config.train, [&](int phase, std::size_t epoch, double loss) {
      log << "phase " << phase << " epoch " << epoch + 1 << " loss " << fixed(loss, 6) << "\n";
    }));
  } catch (const IoError& e) {
    return fail(kIo, e.what());
  } catch (const std::exception& e) {
    return fail(kTraining, std::string("training failed: ") + e.what());
  }
  try {
    save_checkpoint(outcome->model, outcome->metadata, target);
    nlohmann::json metrics = outcome->metrics;
    metrics["run_config"] = run_config_to_json(config);
    write_text_file(target + ".metrics.json", metrics.dump(2) + "\n");
  } catch (const std::exception& e) {
    return fail(kIo, e.what());
  }
  std::cout << log.str() << "checkpoint " << target << " (phase " << outcome->metadata.phase_completed << ")\n";
  return kOk;
}

// --- score ------------------------------------------------------------------

std::uint32_t image_key(const fs::path& p) {
  const std::string stem = p.stem().string();
  std::uint32_t id = 0;
  auto [end, ec] = std::from_chars(stem.data(), stem.data() + stem.size(), id);
  if (ec == std::errc() && end == stem.data() + stem.size()) return id;
  std::uint32_t h = 2166136261u;
  for (unsigned char c : stem) h = (h ^ c) * 16777619u;
  return h;
}

int cmd_score(const Options& o) {
  RunConfig config;
  try {
    config = load_config(o);
  } catch (const Error& e) {
    return fail(kConfig, e.what());
  }
  if (o.checkpoint.empty()) return fail(kUsage, "--checkpoint is required");
  if (o.inputs.empty()) return fail(kUsage, "no images given");
  std::optional<Checkpoint> ckpt;
  try {
    ckpt.emplace(load_checkpoint(o.checkpoint));
  } catch (const std::exception& e) {
    return fail(kIo, std::string("cannot load checkpoint: ") + e.what());
  }
  const Model& model = ckpt->model;

  std::vector<fs::path> files;
  for (const auto& in : o.inputs) {
    std::error_code ec;
    if (fs::is_directory(in, ec)) {
      std::vector<fs::path> found;
      for (const auto& entry : fs::directory_iterator(in, ec))
        if (entry.is_regular_file()) found.push_back(entry.path());
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.emplace_back(in);
    }
  }

  const std::uint64_t seed = o.seed.value_or(config.eval.seeds.front());
  std::vector<std::string> names;
  std::vector<std::uint32_t> keys;
  std::vector<Tensor> images;
  for (const auto& f : files) {
    try {
      images.push_back(fit_to_input(load_image(f), model.config().base.input_size, model.config().base.channels));
      names.push_back(f.stem().string());
      keys.push_back(image_key(f));
    } catch (const std::exception& e) {
      std::cerr << "impression: warning: skipping " << f.string() << ": " << e.what() << "\n";
    }
  }
  if (images.empty()) return fail(kNothingScored, "no images could be scored");

  std::vector<TraitVector> scores(images.size());
  for (std::size_t i = 0; i < images.size(); ++i)
    scores[i] = score_images(model, std::span(&images[i], 1), std::span(&keys[i], 1), seed,
                             config.eval.voter_sample_size)
                    .begin()
                    ->second;

  if (o.json) {
    nlohmann::json j = {{"config", {{"checkpoint", o.checkpoint},
                                    {"seed", seed},
                                    {"voter_sample_size", config.eval.voter_sample_size},
                                    {"mode", std::string(head_mode_name(model.mode()))}}},
                        {"scores", nlohmann::json::array()}};
    for (std::size_t i = 0; i < images.size(); ++i) {
      nlohmann::json row = {{"image_id", names[i]}};
      for (Trait t : kTraits) row[std::string(trait_name(t))] = scores[i][trait_index(t)];
      j["scores"].push_back(row);
    }
    std::cout << j.dump(2) << "\n";
  } else {
    for (std::size_t i = 0; i < images.size(); ++i) {
      std::cout << names[i];
      for (double s : scores[i]) std::cout << " " << fixed(s, 4);
      std::cout << "\n";
    }
  }
  return kOk;
}

// --- evaluate ---------------------------------------------------------------

int cmd_evaluate(const Options& o) {
  RunConfig config;
  Manifest manifest;
  try {
    config = load_config(o);
    manifest = require_manifest(o);
  } catch (const IoError& e) {
    return fail(kIo, e.what());
  } catch (const Error& e) {
    return fail(kConfig, e.what());
  }
  if (o.checkpoint.empty()) return fail(kUsage, "--checkpoint is required");
  if (o.out.empty()) return fail(kUsage, "--out (report directory) is required");
  std::optional<Checkpoint> ckpt;
  try {
    ckpt.emplace(load_checkpoint(o.checkpoint));
  } catch (const std::exception& e) {
    return fail(kIo, std::string("cannot load checkpoint: ") + e.what());
  }
  const std::uint64_t seed = o.seed.value_or(config.eval.seeds.front());
  try {
    EvaluationReport report = evaluate_model(manifest, ckpt->model, config.eval.options(seed));
    report.config_echo["run_config"] = run_config_to_json(config);
    report.config_echo["checkpoint_metadata"] = {{"phase_completed", ckpt->metadata.phase_completed},
                                                 {"seed", ckpt->metadata.seed},
                                                 {"train_config", ckpt->metadata.train_config}};
    write_evaluation(report, o.out);
    std::cout << report.summary_text();
  } catch (const NotEnoughImages& e) {
    return fail(kNoEligible, e.what());
  } catch (const IoError& e) {
    return fail(kIo, e.what());
  } catch (const std::exception& e) {
    return fail(kConfig, std::string("evaluation failed: ") + e.what());
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Predict perceived traits of photos from sparse, noisy votes."};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Run configuration (TOML)");
    sub->add_option("--seed", o.seed, "Seed override");
  };

  auto* gen = app.add_subcommand("generate", "Write a synthetic corpus");
  common(gen);
  gen->add_option("--out", o.out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a model on a manifest");
  common(train);
  train->add_option("--manifest", o.manifest, "Corpus manifest.json");
  train->add_option("--checkpoint", o.checkpoint, "Checkpoint to write");
  train->add_option("--out", o.out, "Same as --checkpoint");
  train->add_option("--mode", o.mode, "regression | classification | distribution | voter");

  auto* score = app.add_subcommand("score", "Score images with a checkpoint");
  common(score);
  score->add_option("--checkpoint", o.checkpoint, "Trained checkpoint")->required();
  score->add_option("inputs", o.inputs, "Image files or directories")->required();
  score->add_flag("--json", o.json, "Emit JSON");

  auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint on the test split");
  common(eval);
  eval->add_option("--manifest", o.manifest, "Corpus manifest.json");
  eval->add_option("--checkpoint", o.checkpoint, "Trained checkpoint")->required();
  eval->add_option("--out", o.out, "Report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (*gen) return cmd_generate(o);
  if (*train) return cmd_train(o);
  if (*score) return cmd_score(o);
  return cmd_evaluate(o);
}
