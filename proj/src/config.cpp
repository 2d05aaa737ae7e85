#include "impression/config.hpp"

#include <cctype>
#include <charconv>
#include <functional>
#include <sstream>

#include "impression/dataset.hpp"
#include "impression/error.hpp"

namespace impression {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string_view strip_comment(std::string_view line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

bool bare_key(std::string_view k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
  return true;
}

class ValueParser {
 public:
  ValueParser(std::string_view text, std::size_t line) : s_(text), line_(line) {}

  ConfigValue parse() {
    ConfigValue v;
    v.line = line_;
    skip_ws();
    if (peek() == '[') {
      ++pos_;
      std::vector<ConfigValue::Scalar> items;
      skip_ws();
      if (peek() == ']') {
        ++pos_;
      } else {
        for (;;) {
          items.push_back(scalar());
          skip_ws();
          if (peek() == ',') {
            ++pos_;
            skip_ws();
            if (peek() == ']') {
              ++pos_;
              break;
            }
            continue;
          }
          if (peek() == ']') {
            ++pos_;
            break;
          }
          fail("expected ',' or ']' in array");
        }
      }
      v.value = std::move(items);
    } else {
      v.value = scalar();
    }
    skip_ws();
    if (pos_ != s_.size()) fail("unexpected text after value");
    return v;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const { throw ParseError(line_, what); }
  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }
  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }

  ConfigValue::Scalar scalar() {
    if (peek() == '"') {
      ++pos_;
      std::string out;
      while (pos_ < s_.size() && s_[pos_] != '"') {
        if (s_[pos_] == '\\' && pos_ + 1 < s_.size()) ++pos_;
        out.push_back(s_[pos_++]);
      }
      if (peek() != '"') fail("unterminated string");
      ++pos_;
      return out;
    }
    const auto start = pos_;
    while (pos_ < s_.size() && s_[pos_] != ',' && s_[pos_] != ']' && s_[pos_] != ' ' && s_[pos_] != '\t') ++pos_;
    const std::string_view tok = s_.substr(start, pos_ - start);
    if (tok.empty()) fail("missing value");
    if (tok == "true") return true;
    if (tok == "false") return false;
    const bool floating = tok.find_first_of(".eE") != std::string_view::npos || tok == "inf" || tok == "nan";
    if (!floating) {
      std::int64_t i = 0;
      auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), i);
      if (ec == std::errc() && p == tok.data() + tok.size()) return i;
    } else {
      double d = 0.0;
      auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), d);
      if (ec == std::errc() && p == tok.data() + tok.size()) return d;
    }
    fail("cannot parse value '" + std::string(tok) + "'");
  }

  std::string_view s_;
  std::size_t line_;
  std::size_t pos_ = 0;
};

// --- typed access -----------------------------------------------------------

const ConfigValue::Scalar& as_scalar(const ConfigValue& v, const std::string& key) {
  if (auto* s = std::get_if<ConfigValue::Scalar>(&v.value)) return *s;
  throw ParseError(v.line, "'" + key + "' expects a single value, not an array");
}

double scalar_double(const ConfigValue::Scalar& s, std::size_t line, const std::string& key) {
  if (auto* d = std::get_if<double>(&s)) return *d;
  if (auto* i = std::get_if<std::int64_t>(&s)) return static_cast<double>(*i);
  throw ParseError(line, "'" + key + "' expects a number");
}

std::uint64_t scalar_count(const ConfigValue::Scalar& s, std::size_t line, const std::string& key) {
  if (auto* i = std::get_if<std::int64_t>(&s)) {
    if (*i < 0) throw ParseError(line, "'" + key + "' must be non-negative");
    return static_cast<std::uint64_t>(*i);
  }
  throw ParseError(line, "'" + key + "' expects an integer");
}

std::string scalar_string(const ConfigValue::Scalar& s, std::size_t line, const std::string& key) {
  if (auto* str = std::get_if<std::string>(&s)) return *str;
  throw ParseError(line, "'" + key + "' expects a quoted string");
}

bool scalar_bool(const ConfigValue::Scalar& s, std::size_t line, const std::string& key) {
  if (auto* b = std::get_if<bool>(&s)) return *b;
  throw ParseError(line, "'" + key + "' expects true or false");
}

const std::vector<ConfigValue::Scalar>& as_array(const ConfigValue& v, const std::string& key) {
  if (auto* a = std::get_if<std::vector<ConfigValue::Scalar>>(&v.value)) return *a;
  throw ParseError(v.line, "'" + key + "' expects an array");
}

struct Field {
  std::function<void(const ConfigValue&, const std::string&)> set;
  std::function<nlohmann::json()> get;
};
using Section = std::map<std::string, Field>;

Field real(double& x) {
  return {[&x](const ConfigValue& v, const std::string& k) { x = scalar_double(as_scalar(v, k), v.line, k); },
          [&x] { return nlohmann::json(x); }};
}

template <typename T>
Field count(T& x) {
  return {[&x](const ConfigValue& v, const std::string& k) {
            x = static_cast<T>(scalar_count(as_scalar(v, k), v.line, k));
          },
          [&x] { return nlohmann::json(x); }};
}

Field flag(bool& x) {
  return {[&x](const ConfigValue& v, const std::string& k) { x = scalar_bool(as_scalar(v, k), v.line, k); },
          [&x] { return nlohmann::json(x); }};
}

template <typename T>
Field counts(std::vector<T>& xs) {
  return {[&xs](const ConfigValue& v, const std::string& k) {
            xs.clear();
            for (const auto& s : as_array(v, k)) xs.push_back(static_cast<T>(scalar_count(s, v.line, k)));
          },
          [&xs] { return nlohmann::json(xs); }};
}

struct Bindings {
  std::map<std::string, Section> sections;
  // conv blocks are edited through three parallel settings
  std::vector<std::size_t> filters;
  std::size_t kernel = 3, stride = 2;
};

void bind(RunConfig& c, Bindings& b) {
  auto& corpus = b.sections["corpus"];
  corpus["n_subjects"] = count(c.corpus.n_subjects);
  corpus["photos_per_subject"] = count(c.corpus.photos_per_subject);
  corpus["image_size"] = count(c.corpus.image_size);
  corpus["channels"] = count(c.corpus.channels);
  corpus["n_voters"] = count(c.corpus.n_voters);
  corpus["votes_per_image_train"] = count(c.corpus.votes_per_image_train);
  corpus["votes_per_image_test"] = count(c.corpus.votes_per_image_test);
  corpus["test_fraction"] = real(c.corpus.test_fraction);
  corpus["subject_spread"] = real(c.corpus.subject_spread);
  corpus["context_sd"] = real(c.corpus.context_sd);
  corpus["clutter"] = real(c.corpus.clutter);
  corpus["oracle_mc"] = count(c.corpus.oracle_mc);
  corpus["seed"] = count(c.corpus.seed);

  auto& voters = b.sections["corpus.voters"];
  voters["bias_sd"] = real(c.corpus.voters.bias_sd);
  voters["scale_median"] = real(c.corpus.voters.scale_median);
  voters["scale_log_sd"] = real(c.corpus.voters.scale_log_sd);
  voters["taste_min"] = real(c.corpus.voters.taste_min);
  voters["taste_max"] = real(c.corpus.voters.taste_max);
  voters["noise_min"] = real(c.corpus.voters.noise_min);
  voters["noise_max"] = real(c.corpus.voters.noise_max);
  voters["constant_fraction"] = real(c.corpus.voters.constant_fraction);

  auto& train = b.sections["train"];
  train["mode"] = {[&c](const ConfigValue& v, const std::string& k) {
                     try {
                       c.train.mode = head_mode_from_name(scalar_string(as_scalar(v, k), v.line, k));
                     } catch (const ValueError& e) {
                       throw ParseError(v.line, e.what());
                     }
                   },
                   [&c] { return nlohmann::json(std::string(head_mode_name(c.train.mode))); }};
  train["base_lr"] = real(c.train.base_lr);
  train["voter_lr"] = real(c.train.voter_lr);
  train["base_epochs"] = count(c.train.base_epochs);
  train["voter_epochs"] = count(c.train.voter_epochs);
  train["base_batch"] = count(c.train.base_batch);
  train["voter_batch"] = count(c.train.voter_batch);
  train["seed"] = count(c.train.seed);
  train["shuffle"] = flag(c.train.shuffle);
  train["input_size"] = count(c.train.base.input_size);
  train["channels"] = count(c.train.base.channels);
  b.filters.clear();
  for (const auto& blk : c.train.base.conv_blocks) b.filters.push_back(blk.filters);
  if (!c.train.base.conv_blocks.empty()) {
    b.kernel = c.train.base.conv_blocks.front().kernel;
    b.stride = c.train.base.conv_blocks.front().stride;
  }
  train["conv_filters"] = counts(b.filters);
  train["conv_kernel"] = count(b.kernel);
  train["conv_stride"] = count(b.stride);
  train["embed_dim"] = count(c.train.embed_dim);
  train["voter_hidden"] = counts(c.train.voter_hidden);

  auto& eval = b.sections["eval"];
  eval["seeds"] = counts(c.eval.seeds);
  eval["flavors"] = {[&c](const ConfigValue& v, const std::string& k) {
                       c.eval.flavors.clear();
                       for (const auto& s : as_array(v, k)) try {
                           c.eval.flavors.push_back(flavor_from_name(scalar_string(s, v.line, k)));
                         } catch (const ValueError& e) {
                           throw ParseError(v.line, e.what());
                         }
                     },
                     [&c] {
                       nlohmann::json j = nlohmann::json::array();
                       for (auto f : c.eval.flavors) j.push_back(std::string(flavor_name(f)));
                       return j;
                     }};
  eval["voter_sample_size"] = count(c.eval.voter_sample_size);
  eval["resamples"] = count(c.eval.resamples);
}

void sync_conv_blocks(RunConfig& c, const Bindings& b) {
  c.train.base.conv_blocks.clear();
  for (auto f : b.filters) c.train.base.conv_blocks.push_back({f, b.kernel, b.stride});
}

std::string toml_literal(const nlohmann::json& j) {
  if (j.is_array()) {
    std::string s = "[";
    for (std::size_t i = 0; i < j.size(); ++i) s += (i ? ", " : "") + toml_literal(j[i]);
    return s + "]";
  }
  if (j.is_number_float()) {
    std::string s = format_double(j.get<double>());
    if (s.find_first_of(".eE") == std::string::npos) s += ".0";
    return s;
  }
  return j.dump();
}

}  // namespace

ConfigTable parse_config_table(std::string_view text) {
  ConfigTable table;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const std::string_view line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(line_no, "unterminated section header");
      const std::string_view name = trim(line.substr(1, line.size() - 2));
      if (!bare_key(name)) throw ParseError(line_no, "bad section name '" + std::string(name) + "'");
      section = std::string(name);
      if (table.sections.contains(section)) throw ParseError(line_no, "duplicate section [" + section + "]");
      table.sections[section];
      table.header_line[section] = line_no;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(line_no, "expected key = value");
    const std::string key(trim(line.substr(0, eq)));
    if (!bare_key(key)) throw ParseError(line_no, "bad key '" + key + "'");
    auto& sec = table.sections[section];
    if (sec.contains(key)) throw ParseError(line_no, "duplicate key '" + key + "'");
    sec[key] = ValueParser(trim(line.substr(eq + 1)), line_no).parse();
  }
  return table;
}

EvalOptions EvalSection::options(std::uint64_t seed) const {
  EvalOptions o;
  o.seed = seed;
  o.voter_sample = voter_sample_size;
  o.resamples = resamples;
  o.flavors = flavors;
  return o;
}

RunConfig parse_run_config(std::string_view text) {
  const ConfigTable table = parse_config_table(text);
  RunConfig config;
  Bindings b;
  bind(config, b);
  for (const auto& [section, entries] : table.sections) {
    auto sec = b.sections.find(section);
    if (sec == b.sections.end()) {
      const auto header = table.header_line.find(section);
      const std::size_t line = header != table.header_line.end() ? header->second
                               : entries.empty()                 ? 0
                                                                 : entries.begin()->second.line;
      throw ParseError(line, section.empty() ? "keys must appear under a section" : "unknown section [" + section + "]");
    }
    for (const auto& [key, value] : entries) {
      auto field = sec->second.find(key);
      if (field == sec->second.end())
        throw ParseError(value.line, "unknown key '" + key + "' in [" + section + "]");
      field->second.set(value, key);
    }
  }
  sync_conv_blocks(config, b);
  try {
    config.corpus.validate();
    config.train.validate();
  } catch (const ValueError& e) {
    throw ParseError(0, e.what());
  }
  if (config.eval.seeds.empty()) throw ParseError(0, "eval.seeds must not be empty");
  if (config.eval.flavors.empty()) throw ParseError(0, "eval.flavors must not be empty");
  if (config.eval.resamples == 0) throw ParseError(0, "eval.resamples must be positive");
  if (config.eval.voter_sample_size == 0) throw ParseError(0, "eval.voter_sample_size must be positive");
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_text_file(path)); }

nlohmann::json run_config_to_json(const RunConfig& config) {
  RunConfig copy = config;
  Bindings b;
  bind(copy, b);
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [section, fields] : b.sections) {
    nlohmann::json* dst = &j;
    std::string_view rest = section;
    for (auto dot = rest.find('.'); dot != std::string_view::npos; dot = rest.find('.')) {
      dst = &(*dst)[std::string(rest.substr(0, dot))];
      rest.remove_prefix(dot + 1);
    }
    for (const auto& [key, field] : fields) (*dst)[std::string(rest)][key] = field.get();
  }
  return j;
}

std::string run_config_to_toml(const RunConfig& config) {
  RunConfig copy = config;
  Bindings b;
  bind(copy, b);
  std::ostringstream os;
  bool first = true;
  for (const auto& [section, fields] : b.sections) {
    os << (first ? "" : "\n") << "[" << section << "]\n";
    first = false;
    for (const auto& [key, field] : fields) os << key << " = " << toml_literal(field.get()) << "\n";
  }
  return os.str();
}

}  // namespace impression
