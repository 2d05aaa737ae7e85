#include "impression/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>

#include "impression/error.hpp"
#include "impression/parallel.hpp"
#include "impression/random.hpp"

namespace impression {

// --- Adam -------------------------------------------------------------------

Adam::Adam(std::vector<Parameter*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (lr < 0.0) throw ValueError("Adam: learning rate must be non-negative");
  for (Parameter* p : params_) {
    m_.emplace_back(p->value.shape(), 0.0);
    v_.emplace_back(p->value.shape(), 0.0);
  }
}

void Adam::step() {
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(beta1_, t);
  const double c2 = 1.0 - std::pow(beta2_, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (p.grad.shape() != p.value.shape())
      throw ShapeError("Adam: gradient shape " + shape_string(p.grad.shape()) + " does not match parameter '" +
                       p.name + "' " + shape_string(p.value.shape()));
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g * g;
      p.value[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

// --- config -----------------------------------------------------------------

ModelConfig TrainConfig::model_config() const {
  ModelConfig c;
  c.base = base;
  c.mode = mode;
  c.embed_dim = embed_dim;
  c.voter_hidden = voter_hidden;
  return c;
}

void TrainConfig::validate() const {
  if (!(base_lr >= 0.0) || !(voter_lr >= 0.0)) throw ValueError("train config: learning rates must be non-negative");
  if (base_batch == 0 || voter_batch == 0) throw ValueError("train config: batch sizes must be positive");
  model_config().validate();
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : c.base.conv_blocks)
    blocks.push_back({{"filters", b.filters}, {"kernel", b.kernel}, {"stride", b.stride}});
  return {{"mode", std::string(head_mode_name(c.mode))},
          {"base_lr", c.base_lr},
          {"voter_lr", c.voter_lr},
          {"base_epochs", c.base_epochs},
          {"voter_epochs", c.voter_epochs},
          {"base_batch", c.base_batch},
          {"voter_batch", c.voter_batch},
          {"seed", c.seed},
          {"shuffle", c.shuffle},
          {"input_size", c.base.input_size},
          {"channels", c.base.channels},
          {"conv_blocks", blocks},
          {"embed_dim", c.embed_dim},
          {"voter_hidden", c.voter_hidden}};
}

// --- labels -----------------------------------------------------------------

BaseLabels build_base_labels(const VoteStore& votes, std::span<const std::uint32_t> image_ids, HeadMode mode) {
  BaseLabels labels;
  labels.mode = mode;
  for (std::uint32_t id : image_ids) {
    std::array<Distribution, kTraitCount> target{};
    try {
      for (Trait t : kTraits) {
        auto& slot = target[trait_index(t)];
        switch (mode) {
          case HeadMode::regression: slot = {}; slot[0] = scalar_label(votes, id, t); break;
          case HeadMode::classification: slot = onehot_vote(scalar_label(votes, id, t)); break;
          case HeadMode::distribution:
          case HeadMode::voter: slot = distribution_label(votes, id, t).bins; break;
        }
      }
    } catch (const ZeroWeightMass&) {
      ++labels.skipped_images;
      continue;
    }
    labels.image_ids.push_back(id);
    labels.targets.push_back(target);
  }
  return labels;
}

// --- phase 1 ----------------------------------------------------------------

namespace {

enum : std::uint64_t { kShuffleStream = 11, kVoterShuffleStream = 12 };

Var example_loss(Model& model, Tape& tape, const Tensor& image, const std::array<Distribution, kTraitCount>& target,
                 double weight) {
  Var h = model.forward_base(tape, image);
  Var total{};
  bool first = true;
  for (Trait t : kTraits) {
    Var out = model.head_forward(tape, h, t);
    const auto& y = target[trait_index(t)];
    Var loss;
    switch (model.mode()) {
      case HeadMode::regression:
        loss = ops::mse(out, tape.constant(Tensor({1, 1}, std::vector<double>{y[0]})));
        break;
      case HeadMode::classification:
        loss = ops::cross_entropy(out, tape.constant(Tensor({1, kBins}, std::vector<double>(y.begin(), y.end()))));
        break;
      case HeadMode::distribution:
      case HeadMode::voter:
        loss = ops::kl_divergence(tape.constant(Tensor({1, kBins}, std::vector<double>(y.begin(), y.end()))), out);
        break;
    }
    total = first ? loss : ops::add(total, loss);
    first = false;
  }
  return ops::scale(total, weight);
}

std::vector<std::size_t> epoch_order(std::size_t n, bool shuffle, std::uint64_t seed, std::uint64_t stream,
                                     std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(derive_seed(seed, stream, epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  }
  return order;
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
}

}  // namespace

PhaseResult train_base_phase(Model& model, std::span<const Tensor> images, const BaseLabels& labels,
                             const TrainConfig& config) {
  if (labels.image_ids.empty()) throw ValueError("train_base_phase: empty dataset");
  if (images.size() != labels.image_ids.size())
    throw ValueError("train_base_phase: image and label counts differ");
  const HeadMode expected = model.mode() == HeadMode::voter ? HeadMode::voter : model.mode();
  const bool compatible = labels.mode == expected ||
                          (model.mode() == HeadMode::voter && labels.mode == HeadMode::distribution) ||
                          (model.mode() == HeadMode::distribution && labels.mode == HeadMode::voter);
  if (!compatible)
    throw ValueError("train_base_phase: labels built for " + std::string(head_mode_name(labels.mode)) +
                     " cannot train a " + std::string(head_mode_name(model.mode())) + " model");

  std::vector<Parameter*> trainable = model.group(ParamGroup::base);
  for (Parameter* p : model.group(ParamGroup::head)) trainable.push_back(p);
  for (Parameter* p : trainable) p->trainable = true;
  Adam adam(trainable, config.base_lr);

  PhaseResult result;
  const std::size_t n = images.size();
  for (std::size_t epoch = 0; epoch < config.base_epochs; ++epoch) {
    const auto order = epoch_order(n, config.shuffle, config.seed, kShuffleStream, epoch);
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < n; start += config.base_batch) {
      const std::size_t count = std::min(config.base_batch, n - start);
      const double weight = 1.0 / static_cast<double>(count);
      std::vector<double> losses(count);
      std::vector<std::vector<std::pair<Parameter*, Tensor>>> grads(count);
      parallel_for(count, [&](std::size_t i) {
        const std::size_t idx = order[start + i];
        Tape tape;
        Var loss = example_loss(model, tape, images[idx], labels.targets[idx], weight);
        losses[i] = loss.value().item();
        grads[i] = tape.backward_collect(loss);
      });
      adam.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = 0; i < count; ++i) {
        batch_loss += losses[i];
        for (auto& [param, g] : grads[i]) add_into(param->grad, g);
      }
      adam.step();
      result.batch_loss.push_back(batch_loss);
      epoch_total += batch_loss * static_cast<double>(count);
    }
    result.epoch_loss.push_back(epoch_total / static_cast<double>(n));
  }
  return result;
}

// --- phase 2 ----------------------------------------------------------------

std::vector<VoterSample> build_voter_samples(const Model& model, const VoteStore& votes,
                                             std::span<const std::uint32_t> image_ids) {
  if (model.mode() != HeadMode::voter) throw ValueError("voter samples require a voter-mode model");
  for (std::uint32_t id : votes.voter_ids()) (void)model.voters().row(id);
  std::vector<VoterSample> samples;
  for (std::size_t i = 0; i < image_ids.size(); ++i) {
    for (std::uint32_t voter : votes.voters_of(image_ids[i])) {
      VoterSample s;
      s.image = i;
      s.row = model.voters().row(voter);
      bool complete = true;
      for (Trait t : kTraits) {
        const VoteRecord* found = nullptr;
        for (const VoteRecord* r : votes.by_image_trait(image_ids[i], t))
          if (r->voter_id == voter) found = r;
        if (!found || !found->normalized_vote) {
          complete = false;
          break;
        }
        s.bin[trait_index(t)] = bin_index(*found->normalized_vote);
      }
      if (complete) samples.push_back(s);
    }
  }
  return samples;
}

PhaseResult train_voter_phase(Model& model, std::span<const Tensor> images, std::span<const std::uint32_t> image_ids,
                              const VoteStore& votes, const TrainConfig& config) {
  if (model.mode() != HeadMode::voter) throw ValueError("train_voter_phase requires a voter-mode model");
  if (images.size() != image_ids.size()) throw ValueError("train_voter_phase: image and id counts differ");
  const auto samples = build_voter_samples(model, votes, image_ids);
  if (samples.empty()) throw ValueError("train_voter_phase: no usable votes");

  std::vector<Tensor> features(images.size());
  parallel_for(images.size(), [&](std::size_t i) { features[i] = model.features(images[i]); });
  const std::size_t F = model.config().base.feature_dim();

  std::vector<Parameter*> frozen = model.group(ParamGroup::base);
  for (Parameter* p : model.group(ParamGroup::head)) frozen.push_back(p);
  for (Parameter* p : frozen) p->trainable = false;
  std::vector<Parameter*> voter_params = model.group(ParamGroup::voter);
  for (Parameter* p : voter_params) p->trainable = true;
  Adam adam(voter_params, config.voter_lr);

  PhaseResult result;
  const std::size_t n = samples.size();
  for (std::size_t epoch = 0; epoch < config.voter_epochs; ++epoch) {
    const auto order = epoch_order(n, config.shuffle, config.seed, kVoterShuffleStream, epoch);
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < n; start += config.voter_batch) {
      const std::size_t count = std::min(config.voter_batch, n - start);
      Tensor h({count, F}, 0.0);
      std::vector<std::size_t> rows(count);
      std::array<Tensor, kTraitCount> onehots;
      for (auto& o : onehots) o = Tensor({count, kBins}, 0.0);
      for (std::size_t i = 0; i < count; ++i) {
        const VoterSample& s = samples[order[start + i]];
        std::copy_n(features[s.image].data().data(), F, &h[i * F]);
        rows[i] = s.row;
        for (std::size_t t = 0; t < kTraitCount; ++t) onehots[t][i * kBins + s.bin[t]] = 1.0;
      }
      Tape tape;
      auto dists = model.voter_forward(tape, tape.constant(std::move(h)), rows);
      Var loss = ops::cross_entropy(dists[0], tape.constant(std::move(onehots[0])));
      for (std::size_t t = 1; t < kTraitCount; ++t)
        loss = ops::add(loss, ops::cross_entropy(dists[t], tape.constant(std::move(onehots[t]))));
      adam.zero_grad();
      tape.backward(loss);
      adam.step();
      const double l = loss.value().item();
      result.batch_loss.push_back(l);
      epoch_total += l * static_cast<double>(count);
    }
    result.epoch_loss.push_back(epoch_total / static_cast<double>(n));
  }
  for (Parameter* p : frozen) p->trainable = true;
  return result;
}

std::uint64_t base_parameter_hash(const Model& model) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : model.parameters()) {
    if (Model::group_of(p.name) != ParamGroup::base) continue;
    for (double v : p.value.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

// --- pipeline ---------------------------------------------------------------

SplitImages load_split_images(const Manifest& manifest, Split split, const BaseNetworkConfig& base) {
  SplitImages out;
  for (const auto& img : manifest.split(split)) {
    out.image_ids.push_back(img.image_id);
    out.images.push_back(fit_to_input(load_image(manifest.resolve(img.path)), base.input_size, base.channels));
  }
  return out;
}

VoteStore prepare_votes(const Manifest& manifest, std::optional<Split> split) {
  VoteStore all = load_votes(manifest.resolve(manifest.votes_csv));
  std::set<std::uint32_t> keep;
  for (const auto& img : manifest.images)
    if (!split || img.split == *split) keep.insert(img.image_id);
  VoteStore store = all.filtered([&](const VoteRecord& r) { return keep.contains(r.image_id); });
  normalize_votes(store);
  compute_voter_weights(store);
  return store;
}

TrainOutcome train_full(const Manifest& manifest, const TrainConfig& config, const EpochCallback& on_epoch,
                        const ModelCallback& after_phase1) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  const VoteStore votes = prepare_votes(manifest, Split::train);
  SplitImages train = load_split_images(manifest, Split::train, config.base);
  if (train.images.empty()) throw ValueError("train_full: manifest has no training images");

  std::vector<std::uint32_t> voter_ids;
  if (config.mode == HeadMode::voter) voter_ids = votes.voter_ids();
  Model model(config.model_config(), voter_ids, config.seed);

  const BaseLabels labels = build_base_labels(votes, train.image_ids, config.mode);
  std::vector<Tensor> labelled_images;
  {
    std::size_t j = 0;
    for (std::size_t i = 0; i < train.image_ids.size() && j < labels.image_ids.size(); ++i)
      if (train.image_ids[i] == labels.image_ids[j]) {
        labelled_images.push_back(train.images[i]);
        ++j;
      }
  }

  TrainOutcome out{std::move(model), {}, {}, {}, {}};
  out.phase1 = train_base_phase(out.model, labelled_images, labels, config);
  if (on_epoch)
    for (std::size_t e = 0; e < out.phase1.epoch_loss.size(); ++e) on_epoch(1, e, out.phase1.epoch_loss[e]);
  out.metadata.phase_completed = 1;
  if (after_phase1) after_phase1(out.model);
  if (config.mode == HeadMode::voter) {
    out.phase2 = train_voter_phase(out.model, train.images, train.image_ids, votes, config);
    if (on_epoch)
      for (std::size_t e = 0; e < out.phase2.epoch_loss.size(); ++e) on_epoch(2, e, out.phase2.epoch_loss[e]);
    out.metadata.phase_completed = 2;
    out.metadata.voter_epochs = config.voter_epochs;
  }
  out.metadata.seed = config.seed;
  out.metadata.base_epochs = config.base_epochs;
  out.metadata.train_config = train_config_to_json(config);

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  out.metrics = {{"phase1_loss", out.phase1.epoch_loss},
                 {"phase2_loss", out.phase2.epoch_loss},
                 {"seed", config.seed},
                 {"config_echo", out.metadata.train_config},
                 {"skipped_images", labels.skipped_images},
                 {"wall_seconds", wall}};
  return out;
}

}  // namespace impression
