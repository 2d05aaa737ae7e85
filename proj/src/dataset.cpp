#include "impression/dataset.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "impression/error.hpp"

namespace impression {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_image(const Tensor& image, const std::filesystem::path& path) {
  if (image.rank() != 3) throw ShapeError("save_image: expected [H,W,C], got " + shape_string(image.shape()));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image " + path.string());
  const std::uint32_t header[3] = {static_cast<std::uint32_t>(image.dim(0)), static_cast<std::uint32_t>(image.dim(1)),
                                   static_cast<std::uint32_t>(image.dim(2))};
  out.write(reinterpret_cast<const char*>(header), sizeof header);
  std::vector<float> values(image.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(image[i]);
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
  if (!out) throw IoError("write failed for " + path.string());
}

Tensor load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  std::uint32_t header[3];
  if (!in.read(reinterpret_cast<char*>(header), sizeof header)) throw IoError("truncated image header in " + path.string());
  if (header[0] == 0 || header[1] == 0 || header[2] == 0 || header[0] > 1u << 14 || header[1] > 1u << 14 ||
      header[2] > 64)
    throw IoError("implausible image dimensions in " + path.string());
  const std::size_t n = std::size_t{header[0]} * header[1] * header[2];
  std::vector<float> values(n);
  if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(float))))
    throw IoError("truncated image data in " + path.string());
  Tensor image({header[0], header[1], header[2]}, 0.0);
  for (std::size_t i = 0; i < n; ++i) image[i] = static_cast<double>(values[i]);
  if (!image.all_finite()) throw IoError("non-finite pixel values in " + path.string());
  return image;
}

std::string split_name(Split s) { return s == Split::test ? "test" : "train"; }

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  throw ValueError("unknown split '" + name + "'");
}

std::vector<ManifestImage> Manifest::split(Split which) const {
  std::vector<ManifestImage> out;
  for (const auto& img : images)
    if (img.split == which) out.push_back(img);
  return out;
}

nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& img : m.images)
    images.push_back({{"image_id", img.image_id},
                      {"subject_id", img.subject_id},
                      {"path", img.path.generic_string()},
                      {"split", split_name(img.split)}});
  return {{"images", images},
          {"votes_csv", m.votes_csv.generic_string()},
          {"truth_csv", m.truth_csv.generic_string()},
          {"config", m.config}};
}

Manifest load_manifest(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.root = path.parent_path();
    for (const auto& img : j.at("images"))
      m.images.push_back({img.at("image_id").get<std::uint32_t>(), img.at("subject_id").get<std::uint32_t>(),
                          img.at("path").get<std::string>(), split_from_name(img.at("split").get<std::string>())});
    m.votes_csv = j.at("votes_csv").get<std::string>();
    m.truth_csv = j.value("truth_csv", std::string{});
    m.config = j.value("config", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ValueError("malformed manifest " + path.string() + ": " + e.what());
  }
  return m;
}

void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  write_text_file(path, manifest_to_json(m).dump(2) + "\n");
}

void save_truth(const TruthTable& truth, const std::filesystem::path& path) {
  std::ostringstream out;
  out << kTruthCsvHeader << '\n';
  for (const auto& [id, score] : truth.score) {
    out << id;
    for (double s : score) out << ',' << format_double(s);
    const auto se = truth.standard_error.at(id);
    for (double s : se) out << ',' << format_double(s);
    out << '\n';
  }
  write_text_file(path, out.str());
}

TruthTable load_truth(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  std::getline(in, line);
  if (line != kTruthCsvHeader) throw ParseError(1, "unexpected truth header in " + path.string());
  TruthTable truth;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 7) throw ParseError(line_no, "expected 7 fields in " + path.string());
    try {
      const auto id = static_cast<std::uint32_t>(std::stoul(fields[0]));
      TraitVector score{}, se{};
      for (std::size_t t = 0; t < kTraitCount; ++t) {
        score[t] = std::stod(fields[1 + t]);
        se[t] = std::stod(fields[4 + t]);
      }
      truth.score[id] = score;
      truth.standard_error[id] = se;
    } catch (const std::logic_error&) {
      throw ParseError(line_no, "bad number in " + path.string());
    }
  }
  return truth;
}

}  // namespace impression
