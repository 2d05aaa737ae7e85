#include "impression/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <map>

#include "impression/dataset.hpp"
#include "impression/error.hpp"

namespace impression {

nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : c.base.conv_blocks)
    blocks.push_back({{"filters", b.filters}, {"kernel", b.kernel}, {"stride", b.stride}});
  return {{"base", {{"input_size", c.base.input_size}, {"channels", c.base.channels}, {"conv_blocks", blocks}}},
          {"mode", std::string(head_mode_name(c.mode))},
          {"embed_dim", c.embed_dim},
          {"voter_hidden", c.voter_hidden}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  const auto& base = j.at("base");
  c.base.input_size = base.at("input_size").get<std::size_t>();
  c.base.channels = base.at("channels").get<std::size_t>();
  c.base.conv_blocks.clear();
  for (const auto& b : base.at("conv_blocks"))
    c.base.conv_blocks.push_back(
        {b.at("filters").get<std::size_t>(), b.at("kernel").get<std::size_t>(), b.at("stride").get<std::size_t>()});
  c.mode = head_mode_from_name(j.at("mode").get<std::string>());
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.voter_hidden = j.at("voter_hidden").get<std::vector<std::size_t>>();
  return c;
}

Tensor probe_input(const BaseNetworkConfig& config) {
  const std::size_t n = config.input_size, C = config.channels;
  Tensor x({n, n, C}, 0.0);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < C; ++c)
        x[(y * n + i) * C + c] =
            0.5 + 0.25 * std::sin(0.37 * static_cast<double>(y) + 0.11 * static_cast<double>(c)) *
                      std::cos(0.23 * static_cast<double>(i));
  return x;
}

Tensor probe_output(const Model& model) {
  std::vector<double> out;
  const Tensor h = model.features(probe_input(model.config().base));
  out.insert(out.end(), h.data().begin(), h.data().end());
  for (Trait t : kTraits) {
    const Tensor o = model.head_output(h, t);
    out.insert(out.end(), o.data().begin(), o.data().end());
  }
  if (model.mode() == HeadMode::voter)
    for (Trait t : kTraits) {
      const auto p = model.predict_vote(h, model.voters().ids().front(), t);
      out.insert(out.end(), p.dist.begin(), p.dist.end());
    }
  return Tensor::vector(std::move(out));
}

namespace {

class Writer {
 public:
  template <typename T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    bytes_.append(buf, sizeof(T));
  }
  void put_bytes(std::string_view s) { bytes_.append(s); }
  std::string take() { return std::move(bytes_); }

 private:
  std::string bytes_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view get_bytes(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw ValueError("checkpoint is truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

void put_block(Writer& w, const std::string& name, const Tensor& t) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
  w.put_bytes(name);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.put<std::uint64_t>(d);
  for (double v : t.data()) w.put<double>(v);
}

constexpr double kProbeTolerance = 1e-10;

}  // namespace

std::string encode_checkpoint(const Model& model, const TrainingMetadata& meta) {
  nlohmann::json header = {
      {"model", model_config_to_json(model.config())},
      {"voter_ids", model.voters().ids()},
      {"metadata",
       {{"phase_completed", meta.phase_completed},
        {"seed", meta.seed},
        {"base_epochs", meta.base_epochs},
        {"voter_epochs", meta.voter_epochs},
        {"train_config", meta.train_config}}},
  };
  const std::string json = header.dump();
  Writer w;
  w.put<std::uint8_t>(kCheckpointVersion);
  w.put<std::uint64_t>(json.size());
  w.put_bytes(json);
  const auto& params = model.parameters();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size() + 2));
  for (const auto& p : params) put_block(w, p.name, p.value);
  put_block(w, "probe.input", probe_input(model.config().base));
  put_block(w, "probe.output", probe_output(model));
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  const auto version = r.get<std::uint8_t>();
  if (version != kCheckpointVersion)
    throw ValueError("unsupported checkpoint version " + std::to_string(version));
  const auto json_len = r.get<std::uint64_t>();
  if (json_len > bytes.size()) throw ValueError("checkpoint is truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.get_bytes(json_len));
  } catch (const nlohmann::json::exception& e) {
    throw ValueError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  std::map<std::string, Tensor> blocks;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.get_bytes(r.get<std::uint32_t>()));
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw ValueError("checkpoint block '" + name + "' has implausible rank");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.get<std::uint64_t>());
      if (d == 0 || d > bytes.size()) throw ValueError("checkpoint block '" + name + "' has a bad dimension");
      n *= d;
    }
    if (n > bytes.size()) throw ValueError("checkpoint is truncated");
    std::vector<double> values(n);
    for (auto& v : values) v = r.get<double>();
    blocks.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw ValueError("trailing bytes after checkpoint blocks");

  try {
    const ModelConfig config = model_config_from_json(header.at("model"));
    const auto& md = header.at("metadata");
    TrainingMetadata meta;
    meta.phase_completed = md.at("phase_completed").get<int>();
    meta.seed = md.at("seed").get<std::uint64_t>();
    meta.base_epochs = md.at("base_epochs").get<std::size_t>();
    meta.voter_epochs = md.at("voter_epochs").get<std::size_t>();
    meta.train_config = md.value("train_config", nlohmann::json::object());

    Model model(config, header.at("voter_ids").get<std::vector<std::uint32_t>>(), 0);
    for (auto& p : model.parameters()) {
      auto it = blocks.find(p.name);
      if (it == blocks.end()) throw ValueError("checkpoint lacks parameter '" + p.name + "'");
      if (it->second.shape() != p.value.shape())
        throw ValueError("checkpoint parameter '" + p.name + "' has shape " + shape_string(it->second.shape()) +
                         ", expected " + shape_string(p.value.shape()));
      p.value = it->second;
      p.zero_grad();
    }

    auto probe = blocks.find("probe.output");
    if (probe == blocks.end()) throw ValueError("checkpoint lacks probe outputs");
    const Tensor replay = probe_output(model);
    if (replay.size() != probe->second.size()) throw ValueError("checkpoint probe has the wrong length");
    for (std::size_t i = 0; i < replay.size(); ++i)
      if (!(std::abs(replay[i] - probe->second[i]) <= kProbeTolerance))
        throw ValueError("checkpoint probe mismatch at output " + std::to_string(i));
    return {std::move(model), std::move(meta)};
  } catch (const nlohmann::json::exception& e) {
    throw ValueError(std::string("malformed checkpoint header: ") + e.what());
  }
}

void save_checkpoint(const Model& model, const TrainingMetadata& metadata, const std::filesystem::path& path) {
  write_text_file(path, encode_checkpoint(model, metadata));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_text_file(path)); }

}  // namespace impression
