#include "impression/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "impression/error.hpp"

namespace impression {

std::string_view head_mode_name(HeadMode mode) {
  switch (mode) {
    case HeadMode::regression: return "regression";
    case HeadMode::classification: return "classification";
    case HeadMode::distribution: return "distribution";
    case HeadMode::voter: return "voter";
  }
  return "unknown";
}

HeadMode head_mode_from_name(std::string_view name) {
  for (HeadMode m : {HeadMode::regression, HeadMode::classification, HeadMode::distribution, HeadMode::voter})
    if (head_mode_name(m) == name) return m;
  throw ValueError("unknown head mode '" + std::string(name) + "'");
}

std::size_t BaseNetworkConfig::feature_dim() const {
  return conv_blocks.empty() ? channels : conv_blocks.back().filters;
}

void BaseNetworkConfig::validate() const {
  if (input_size == 0 || channels == 0) throw ValueError("base network: input size and channels must be positive");
  if (conv_blocks.empty()) throw ValueError("base network: at least one conv block required");
  std::size_t size = input_size;
  for (const auto& b : conv_blocks) {
    if (b.filters == 0 || b.kernel == 0 || b.stride == 0)
      throw ValueError("base network: conv block fields must be positive");
    const std::size_t pad = b.kernel / 2;
    if (b.kernel > size + 2 * pad) throw ValueError("base network: kernel larger than padded feature map");
    size = (size + 2 * pad - b.kernel) / b.stride + 1;
  }
}

void ModelConfig::validate() const {
  base.validate();
  if (mode == HeadMode::voter && embed_dim == 0) throw ValueError("voter mode needs a positive embed_dim");
  for (auto h : voter_hidden)
    if (h == 0) throw ValueError("voter hidden layer widths must be positive");
}

VoterTable::VoterTable(std::vector<std::uint32_t> ids) : ids_(std::move(ids)) {
  std::sort(ids_.begin(), ids_.end());
  ids_.erase(std::unique(ids_.begin(), ids_.end()), ids_.end());
  for (std::size_t i = 0; i < ids_.size(); ++i) rows_.emplace(ids_[i], i);
}

std::size_t VoterTable::row(std::uint32_t id) const {
  auto it = rows_.find(id);
  if (it == rows_.end()) throw UnknownVoter("voter " + std::to_string(id) + " is not in the embedding table");
  return it->second;
}

Tensor fit_to_input(const Tensor& image, std::size_t size, std::size_t channels) {
  if (image.rank() != 3) throw ShapeError("expected an [H,W,C] image, got " + shape_string(image.shape()));
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  if (C != channels && C != 1 && channels != 1)
    throw ShapeError("cannot adapt " + std::to_string(C) + " channels to " + std::to_string(channels));

  const std::size_t S = std::max(H, W);
  Tensor square({S, S, C}, 0.0);
  const std::size_t oy = (S - H) / 2, ox = (S - W) / 2;
  for (std::size_t y = 0; y < H; ++y)
    std::copy_n(&image[y * W * C], W * C, &square[((y + oy) * S + ox) * C]);

  Tensor resized = square;
  if (S != size) {
    resized = Tensor({size, size, C}, 0.0);
    const double ratio = static_cast<double>(S) / static_cast<double>(size);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double sy = std::clamp((static_cast<double>(y) + 0.5) * ratio - 0.5, 0.0, static_cast<double>(S - 1));
        const double sx = std::clamp((static_cast<double>(x) + 0.5) * ratio - 0.5, 0.0, static_cast<double>(S - 1));
        const auto y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
        const std::size_t y1 = std::min(y0 + 1, S - 1), x1 = std::min(x0 + 1, S - 1);
        const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
        for (std::size_t c = 0; c < C; ++c) {
          auto at = [&](std::size_t yy, std::size_t xx) { return square[(yy * S + xx) * C + c]; };
          resized[(y * size + x) * C + c] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                                            fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
        }
      }
  }
  if (C == channels) return resized;
  Tensor out({size, size, channels}, 0.0);
  for (std::size_t p = 0; p < size * size; ++p) {
    if (C == 1) {
      for (std::size_t c = 0; c < channels; ++c) out[p * channels + c] = resized[p];
    } else {
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) s += resized[p * C + c];
      out[p] = s / static_cast<double>(C);
    }
  }
  return out;
}

// --- construction -----------------------------------------------------------

namespace {

std::string head_name(Trait t, const char* field) { return "head." + std::string(trait_name(t)) + "." + field; }
std::string voter_out_name(Trait t, const char* field) {
  return "voter.out." + std::string(trait_name(t)) + "." + field;
}

Tensor truncated_normal(Shape shape, double sd, Rng& rng) {
  Tensor t(std::move(shape), 0.0);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.storage()) {
    double z;
    do z = dist(rng);
    while (std::abs(z) > 2.0);
    v = z * sd;
  }
  return t;
}

}  // namespace

Model::Model(ModelConfig config, std::vector<std::uint32_t> voter_ids, std::uint64_t seed)
    : config_(std::move(config)) {
  config_.validate();
  if (config_.mode == HeadMode::voter) voters_ = VoterTable(std::move(voter_ids));
  initialize(seed);
}

Model::Model(const Model& o)
    : config_(o.config_), voters_(o.voters_), params_(o.params_), index_(o.index_), base_passes_(0) {}

Model& Model::operator=(const Model& o) {
  if (this != &o) {
    config_ = o.config_;
    voters_ = o.voters_;
    params_ = o.params_;
    index_ = o.index_;
    base_passes_ = 0;
  }
  return *this;
}

Model::Model(Model&& o) noexcept
    : config_(std::move(o.config_)),
      voters_(std::move(o.voters_)),
      params_(std::move(o.params_)),
      index_(std::move(o.index_)),
      base_passes_(o.base_passes_.load()) {}

Model& Model::operator=(Model&& o) noexcept {
  config_ = std::move(o.config_);
  voters_ = std::move(o.voters_);
  params_ = std::move(o.params_);
  index_ = std::move(o.index_);
  base_passes_ = o.base_passes_.load();
  return *this;
}

void Model::add_param(std::string name, Tensor value) {
  index_.emplace(name, params_.size());
  params_.emplace_back(std::move(name), std::move(value));
}

void Model::initialize(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));
  std::size_t in_channels = config_.base.channels;
  for (std::size_t i = 0; i < config_.base.conv_blocks.size(); ++i) {
    const auto& b = config_.base.conv_blocks[i];
    const double fan_in = static_cast<double>(b.kernel * b.kernel * in_channels);
    add_param("base.conv" + std::to_string(i) + ".weight",
              truncated_normal({b.kernel, b.kernel, in_channels, b.filters}, 1.0 / std::sqrt(fan_in), rng));
    add_param("base.conv" + std::to_string(i) + ".bias", Tensor({b.filters}, 0.0));
    in_channels = b.filters;
  }
  const std::size_t F = config_.base.feature_dim();
  const std::size_t K = config_.mode == HeadMode::regression ? 1 : kBins;
  for (Trait t : kTraits) {
    add_param(head_name(t, "weight"), truncated_normal({F, K}, 1.0 / std::sqrt(static_cast<double>(F)), rng));
    add_param(head_name(t, "bias"), Tensor({K}, 0.0));
  }
  if (config_.mode != HeadMode::voter) return;

  if (voters_.empty()) throw ValueError("voter mode requires at least one voter id");
  Tensor table({voters_.size(), config_.embed_dim}, 0.0);
  for (auto& v : table.storage()) v = normal(rng, 0.0, 0.05);
  add_param("voter.embedding", std::move(table));
  std::size_t width = F + config_.embed_dim;
  for (std::size_t i = 0; i < config_.voter_hidden.size(); ++i) {
    const std::size_t out = config_.voter_hidden[i];
    add_param("voter.fc" + std::to_string(i) + ".weight",
              truncated_normal({width, out}, 1.0 / std::sqrt(static_cast<double>(width)), rng));
    add_param("voter.fc" + std::to_string(i) + ".bias", Tensor({out}, 0.0));
    width = out;
  }
  // Zero output layers start every voter at the uniform distribution.
  for (Trait t : kTraits) {
    add_param(voter_out_name(t, "weight"), Tensor({width, kBins}, 0.0));
    add_param(voter_out_name(t, "bias"), Tensor({kBins}, 0.0));
  }
}

Parameter& Model::parameter(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("no parameter named '" + std::string(name) + "'");
  return params_[it->second];
}

const Parameter& Model::parameter(std::string_view name) const {
  return const_cast<Model*>(this)->parameter(name);
}

ParamGroup Model::group_of(std::string_view name) {
  if (name.starts_with("base.")) return ParamGroup::base;
  if (name.starts_with("head.")) return ParamGroup::head;
  return ParamGroup::voter;
}

std::vector<Parameter*> Model::group(ParamGroup g) {
  std::vector<Parameter*> out;
  for (auto& p : params_)
    if (group_of(p.name) == g) out.push_back(&p);
  return out;
}

// --- graphs -----------------------------------------------------------------

template <typename Bind>
Var Model::base_graph(Tape& tape, const Tensor& x, Bind bind) const {
  const auto& cfg = config_.base;
  if (x.shape() != Shape{cfg.input_size, cfg.input_size, cfg.channels})
    throw ShapeError("forward_base: expected input " +
                     shape_string({cfg.input_size, cfg.input_size, cfg.channels}) + ", got " +
                     shape_string(x.shape()));
  base_passes_.fetch_add(1, std::memory_order_relaxed);
  Var a = tape.constant(x);
  for (std::size_t i = 0; i < cfg.conv_blocks.size(); ++i) {
    const auto& b = cfg.conv_blocks[i];
    const std::string prefix = "base.conv" + std::to_string(i);
    a = ops::conv2d(a, bind(parameter(prefix + ".weight")), {b.stride, b.kernel / 2});
    a = ops::relu(ops::bias_add(a, bind(parameter(prefix + ".bias"))));
  }
  return ops::global_avg_pool(a);
}

template <typename Bind>
Var Model::head_graph(Tape& tape, Var h, Trait trait, Bind bind) const {
  (void)tape;
  if (h.value().rank() == 1) h = ops::reshape(h, {1, h.value().size()});
  Var logits = ops::bias_add(ops::matmul(h, bind(parameter(head_name(trait, "weight")))),
                             bind(parameter(head_name(trait, "bias"))));
  return config_.mode == HeadMode::regression ? ops::sigmoid(logits) : ops::softmax(logits);
}

template <typename Bind>
std::array<Var, kTraitCount> Model::voter_graph(Tape& tape, Var h, std::span<const std::size_t> rows,
                                                 Bind bind) const {
  if (config_.mode != HeadMode::voter) throw ValueError("voter model is only available in voter mode");
  if (h.value().rank() != 2 || h.value().dim(0) != rows.size())
    throw ShapeError("voter_forward: features " + shape_string(h.value().shape()) + " do not match " +
                     std::to_string(rows.size()) + " voter rows");
  (void)tape;
  Var e = ops::embedding_lookup(bind(parameter("voter.embedding")), rows);
  Var a = ops::concat(h, e);
  for (std::size_t i = 0; i < config_.voter_hidden.size(); ++i) {
    const std::string prefix = "voter.fc" + std::to_string(i);
    a = ops::relu(ops::bias_add(ops::matmul(a, bind(parameter(prefix + ".weight"))), bind(parameter(prefix + ".bias"))));
  }
  std::array<Var, kTraitCount> out;
  for (Trait t : kTraits)
    out[trait_index(t)] = ops::softmax(ops::bias_add(ops::matmul(a, bind(parameter(voter_out_name(t, "weight")))),
                                                     bind(parameter(voter_out_name(t, "bias")))));
  return out;
}

Var Model::forward_base(Tape& tape, const Tensor& x) {
  return base_graph(tape, x, [&](const Parameter& p) { return tape.param(const_cast<Parameter&>(p)); });
}

Var Model::head_forward(Tape& tape, Var h, Trait trait) {
  return head_graph(tape, h, trait, [&](const Parameter& p) { return tape.param(const_cast<Parameter&>(p)); });
}

std::array<Var, kTraitCount> Model::voter_forward(Tape& tape, Var h, std::span<const std::size_t> rows) {
  return voter_graph(tape, h, rows, [&](const Parameter& p) { return tape.param(const_cast<Parameter&>(p)); });
}

// --- inference --------------------------------------------------------------

Tensor Model::features(const Tensor& x) const {
  Tape tape;
  return base_graph(tape, x, [&](const Parameter& p) { return tape.constant(p.value); }).value();
}

Tensor Model::head_output(const Tensor& h, Trait trait) const {
  Tape tape;
  Var out = head_graph(tape, tape.constant(h), trait, [&](const Parameter& p) { return tape.constant(p.value); });
  return out.value().reshaped({out.value().size()});
}

std::vector<VotePrediction> Model::predict_rows(const Tensor& h, std::span<const std::size_t> rows, Trait trait) const {
  if (rows.empty()) return {};
  const std::size_t F = h.size();
  Tensor batch({rows.size(), F}, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(h.data().data(), F, &batch[i * F]);
  Tape tape;
  auto dists = voter_graph(tape, tape.constant(std::move(batch)), rows,
                           [&](const Parameter& p) { return tape.constant(p.value); });
  const Tensor& d = dists[trait_index(trait)].value();
  std::vector<VotePrediction> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(&d[i * kBins], kBins, out[i].dist.begin());
    out[i].vote = expected_vote(out[i].dist);
  }
  return out;
}

VotePrediction Model::predict_vote(const Tensor& h, std::uint32_t voter_id, Trait trait) const {
  if (config_.mode != HeadMode::voter) throw ValueError("predict_vote requires a voter-mode model");
  const std::size_t row = voters_.row(voter_id);
  return predict_rows(h, std::span<const std::size_t>(&row, 1), trait).front();
}

double Model::aggregate_features(const Tensor& h, Trait trait, std::size_t sample_size, Rng& rng) const {
  if (config_.mode != HeadMode::voter) throw ValueError("aggregate requires a voter-mode model");
  if (voters_.empty()) throw ValueError("aggregate: voter table is empty");
  if (sample_size == 0) throw ValueError("aggregate: sample size must be positive");
  const std::size_t n = voters_.size();
  const std::size_t k = std::min(sample_size, n);
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + uniform_index(rng, n - i)]);
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  double total = 0.0;
  for (const auto& p : predict_rows(h, pool, trait)) total += p.vote;
  return total / static_cast<double>(k);
}

double Model::aggregate(const Tensor& x, Trait trait, std::size_t sample_size, Rng& rng) const {
  return aggregate_features(features(x), trait, sample_size, rng);
}

TraitVector Model::score_features(const Tensor& h, Rng& rng, std::size_t sample_size) const {
  TraitVector out{};
  for (Trait t : kTraits) {
    double s = 0.0;
    switch (config_.mode) {
      case HeadMode::voter: s = aggregate_features(h, t, sample_size, rng); break;
      case HeadMode::regression: s = head_output(h, t)[0]; break;
      case HeadMode::classification:
      case HeadMode::distribution: {
        const Tensor o = head_output(h, t);
        Distribution d{};
        std::copy_n(o.data().data(), kBins, d.begin());
        s = expected_vote(d);
        break;
      }
    }
    out[trait_index(t)] = s;
  }
  return out;
}

TraitVector Model::score_image(const Tensor& x, Rng& rng, std::size_t sample_size) const {
  return score_features(features(x), rng, sample_size);
}

}  // namespace impression
