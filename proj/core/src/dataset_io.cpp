#include "kplift/synthetic.hpp"

#include <json.hpp>

#include <fstream>
#include <iterator>
#include <sstream>
#include <string_view>

namespace kplift {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// --- Locating a field in the raw manifest -------------------------------------

// Forward iterator over a byte buffer that publishes how far the parser read.
struct CountingIterator {
  using iterator_category = std::forward_iterator_tag;
  using value_type = char;
  using difference_type = std::ptrdiff_t;
  using pointer = const char*;
  using reference = const char&;

  const char* p = nullptr;
  std::size_t* consumed = nullptr;

  reference operator*() const { return *p; }
  CountingIterator& operator++() {
    ++p;
    ++*consumed;
    return *this;
  }
  CountingIterator operator++(int) {
    CountingIterator old = *this;
    ++*this;
    return old;
  }
  friend bool operator==(const CountingIterator& a, const CountingIterator& b) { return a.p == b.p; }
};

// Walks the document and reports where the value with a given path
// ("samples[3].keypoints2d") begins: the offset of the previous event, which
// the caller advances past separators.
class PathLocator : public nlohmann::json_sax<json> {
 public:
  PathLocator(std::string target, const std::size_t* consumed) : target_(std::move(target)), consumed_(consumed) {}

  bool null() override { return scalar(); }
  bool boolean(bool) override { return scalar(); }
  bool number_integer(number_integer_t) override { return scalar(); }
  bool number_unsigned(number_unsigned_t) override { return scalar(); }
  bool number_float(number_float_t, const string_t&) override { return scalar(); }
  bool string(string_t&) override { return scalar(); }
  bool binary(binary_t&) override { return scalar(); }
  bool start_object(std::size_t) override { return open(false); }
  bool key(string_t& k) override {
    frames_.back().key = k;
    mark_ = *consumed_;
    return true;
  }
  bool end_object() override { return close(); }
  bool start_array(std::size_t) override { return open(true); }
  bool end_array() override { return close(); }
  bool parse_error(std::size_t position, const std::string&, const nlohmann::detail::exception&) override {
    syntax_error_ = position;
    return false;
  }

  std::optional<std::size_t> found() const { return found_; }
  std::optional<std::size_t> syntax_error() const { return syntax_error_; }
  // Path of the innermost value open when parsing stopped.
  std::string current_path() const { return path(); }

 private:
  struct Frame {
    bool array = false;
    std::size_t index = 0;
    std::string key;
  };

  std::string path() const {
    std::string p;
    for (const auto& f : frames_) {
      if (f.array) {
        p += "[" + std::to_string(f.index) + "]";
      } else if (!f.key.empty()) {
        p += (p.empty() ? "" : ".") + f.key;
      }
    }
    return p;
  }

  bool hit() {
    if (path() == target_) {
      found_ = mark_;
      return false;
    }
    return true;
  }

  bool scalar() {
    const bool more = hit();
    advance();
    return more;
  }
  bool open(bool array) {
    if (!hit()) return false;
    frames_.push_back({array, 0, {}});
    mark_ = *consumed_;
    return true;
  }
  bool close() {
    frames_.pop_back();
    advance();
    return true;
  }
  void advance() {
    if (!frames_.empty() && frames_.back().array) ++frames_.back().index;
    mark_ = *consumed_;
  }

  std::string target_;
  const std::size_t* consumed_;
  std::vector<Frame> frames_;
  std::size_t mark_ = 0;
  std::optional<std::size_t> found_;
  std::optional<std::size_t> syntax_error_;
};

struct FieldError {
  std::string path;
  std::string message;
};

std::size_t locate(const std::string& text, std::string path) {
  for (;;) {
    std::size_t consumed = 0;
    PathLocator locator(path, &consumed);
    CountingIterator first{text.data(), &consumed};
    CountingIterator last{text.data() + text.size(), &consumed};
    json::sax_parse(first, last, &locator);
    if (auto at = locator.found()) {
      // Lookahead past a number may already sit on the separator.
      while (*at < text.size() && std::string_view(" \t\r\n:,").find(text[*at]) != std::string_view::npos) ++*at;
      return *at;
    }
    // Fall back to the closest enclosing value that exists.
    const auto cut = path.find_last_of(".[");
    if (cut == std::string::npos || cut == 0) return 0;
    path.erase(cut);
  }
}

// --- Typed access with path tracking ---------------------------------------------

class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

  Node operator[](const char* key) const {
    if (!j_.is_object()) fail("expected an object");
    auto it = j_.find(key);
    const std::string p = path_.empty() ? key : path_ + "." + key;
    if (it == j_.end()) throw FieldError{path_, std::string("missing field '") + key + "'"};
    return Node(*it, p);
  }
  Node operator[](std::size_t i) const { return Node(j_.at(i), path_ + "[" + std::to_string(i) + "]"); }

  std::size_t size(std::optional<std::size_t> expected = std::nullopt) const {
    if (!j_.is_array()) fail("expected an array");
    if (expected && j_.size() != *expected) {
      fail("expected " + std::to_string(*expected) + " entries, found " + std::to_string(j_.size()));
    }
    return j_.size();
  }
  double real() const {
    if (!j_.is_number()) fail("expected a number");
    return j_.get<double>();
  }
  long long integer() const {
    if (!j_.is_number_integer()) fail("expected an integer");
    return j_.get<long long>();
  }
  std::string str() const {
    if (!j_.is_string()) fail("expected a string");
    return j_.get<std::string>();
  }
  std::vector<double> reals(std::optional<std::size_t> expected = std::nullopt) const {
    std::vector<double> out(size(expected));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*this)[i].real();
    return out;
  }
  // Array of n arrays of length `rows`, each one a column of the result.
  Eigen::MatrixXd columns(std::size_t rows, std::optional<std::size_t> count = std::nullopt) const {
    const std::size_t n = size(count);
    Eigen::MatrixXd m(rows, n);
    for (std::size_t c = 0; c < n; ++c) {
      const auto v = (*this)[c].reals(rows);
      for (std::size_t r = 0; r < rows; ++r) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v[r];
    }
    return m;
  }
  [[noreturn]] void fail(const std::string& message) const { throw FieldError{path_, message}; }
  const std::string& path() const { return path_; }

 private:
  const json& j_;
  std::string path_;
};

json columns_json(const Eigen::MatrixXd& m) {
  json out = json::array();
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    json col = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) col.push_back(m(r, c));
    out.push_back(col);
  }
  return out;
}

json category_json(const SyntheticCategory& c) {
  json j;
  j["name"] = c.schema.name;
  j["k"] = c.schema.keypoint_count();
  j["keypoint_names"] = c.schema.keypoint_names;
  json edges = json::array();
  for (const auto& [a, b] : c.skeleton) edges.push_back({a, b});
  j["skeleton"] = edges;
  j["template"] = columns_json(c.shape_template);
  j["deformation_basis"] = columns_json(c.deformation_basis.transpose());
  return j;
}

json sample_json(const SyntheticSample& s, const std::vector<SyntheticCategory>& cats) {
  json j;
  j["id"] = s.id;
  j["category"] = cats.at(static_cast<std::size_t>(s.category)).schema.name;
  j["split"] = s.test ? "test" : "train";
  j["keypoints2d"] = columns_json(s.keypoints2d);
  j["visibility"] = s.visibility;
  j["deformation"] = s.deformation;
  j["rotation"] = columns_json(s.rotation.transpose());
  j["keypoints3d"] = columns_json(s.keypoints3d);
  j["context_factor"] = s.context;
  j["image"] = s.image_file;
  return j;
}

SyntheticCategory parse_category(const Node& n, std::size_t index, std::size_t offset) {
  SyntheticCategory c;
  c.schema.id = static_cast<int>(index);
  c.schema.name = n["name"].str();
  c.schema.block_offset = offset;
  const auto k = n["k"].integer();
  if (k < static_cast<long long>(kMinKeypointsPerCategory)) n["k"].fail("needs at least 3 keypoints");
  const auto ku = static_cast<std::size_t>(k);
  const Node names = n["keypoint_names"];
  for (std::size_t i = 0, m = names.size(ku); i < m; ++i) c.schema.keypoint_names.push_back(names[i].str());
  const Node edges = n["skeleton"];
  for (std::size_t e = 0, m = edges.size(); e < m; ++e) {
    const Node edge = edges[e];
    edge.size(2);
    const auto a = edge[std::size_t{0}].integer();
    const auto b = edge[std::size_t{1}].integer();
    if (a < 0 || b < 0 || a >= k || b >= k) edge.fail("keypoint index out of range");
    c.skeleton.emplace_back(static_cast<int>(a), static_cast<int>(b));
  }
  c.shape_template = n["template"].columns(3, ku);
  c.deformation_basis = n["deformation_basis"].columns(3 * ku).transpose();
  return c;
}

SyntheticSample parse_sample(const Node& n, const std::vector<SyntheticCategory>& cats) {
  SyntheticSample s;
  const auto id = n["id"].integer();
  if (id < 0) n["id"].fail("negative id");
  s.id = static_cast<std::size_t>(id);
  const Node cat = n["category"];
  const std::string name = cat.str();
  const SyntheticCategory* category = nullptr;
  for (const auto& c : cats) {
    if (c.schema.name == name) category = &c;
  }
  if (!category) cat.fail("unknown category '" + name + "'");
  s.category = category->schema.id;
  const std::size_t k = category->schema.keypoint_count();
  const std::string split = n["split"].str();
  if (split != "train" && split != "test") n["split"].fail("split must be 'train' or 'test'");
  s.test = split == "test";
  s.keypoints2d = n["keypoints2d"].columns(2, k);
  const Node vis = n["visibility"];
  for (std::size_t i = 0, m = vis.size(k); i < m; ++i) {
    const auto v = vis[i].integer();
    if (v != 0 && v != 1) vis[i].fail("visibility must be 0 or 1");
    s.visibility.push_back(static_cast<std::uint8_t>(v));
  }
  s.deformation = n["deformation"].reals();
  s.rotation = n["rotation"].columns(3, 3).transpose();
  s.keypoints3d = n["keypoints3d"].columns(3, k);
  s.context = n["context_factor"].real();
  s.image_file = n["image"].str();
  if (s.image_file.empty() || s.image_file.find('/') != std::string::npos) n["image"].fail("bad image file name");
  return s;
}

}  // namespace

void write_dataset(const Dataset& dataset, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["format_version"] = kDatasetFormatVersion;
  manifest["deformation_scale"] = dataset.deformation_scale;
  manifest["categories"] = json::array();
  for (const auto& c : dataset.categories) manifest["categories"].push_back(category_json(c));
  manifest["samples"] = json::array();
  for (const auto& s : dataset.samples) {
    manifest["samples"].push_back(sample_json(s, dataset.categories));
    if (s.image) write_pgm(*s.image, dir / s.image_file);
  }
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump() << '\n';
  if (!out) throw std::runtime_error("failed writing " + (dir / "manifest.json").string());
}

Dataset read_dataset(const fs::path& dir, bool load_images) {
  const fs::path file = dir / "manifest.json";
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DatasetFormatError("cannot open " + file.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t consumed = 0;
    PathLocator locator("\x01", &consumed);
    CountingIterator first{text.data(), &consumed};
    CountingIterator last{text.data() + text.size(), &consumed};
    json::sax_parse(first, last, &locator);
    const std::string where = locator.current_path();
    throw DatasetFormatError(file.string() + ": byte offset " + std::to_string(e.byte > 0 ? e.byte - 1 : 0) + ", field '" +
                             (where.empty() ? "<root>" : where) + "': malformed JSON");
  }

  Dataset ds;
  try {
    const Node root(doc, "");
    const auto version = root["format_version"].integer();
    if (version != kDatasetFormatVersion) root["format_version"].fail("unsupported version " + std::to_string(version));
    ds.deformation_scale = root["deformation_scale"].real();
    const Node cats = root["categories"];
    std::size_t offset = 0;
    for (std::size_t i = 0, n = cats.size(); i < n; ++i) {
      ds.categories.push_back(parse_category(cats[i], i, offset));
      for (std::size_t j = 0; j < i; ++j) {
        if (ds.categories[j].schema.name == ds.categories[i].schema.name) cats[i]["name"].fail("duplicate category name");
      }
      offset += ds.categories.back().schema.keypoint_count();
    }
    const Node samples = root["samples"];
    for (std::size_t i = 0, n = samples.size(); i < n; ++i) ds.samples.push_back(parse_sample(samples[i], ds.categories));
  } catch (const FieldError& e) {
    throw DatasetFormatError(file.string() + ": byte offset " + std::to_string(locate(text, e.path)) + ", field '" +
                             (e.path.empty() ? "<root>" : e.path) + "': " + e.message);
  }
  if (load_images) {
    for (auto& s : ds.samples) s.image = load_image(dir, s);
  }
  return ds;
}

ImageRaster load_image(const fs::path& dir, const SyntheticSample& sample) {
  ImageRaster img = read_pgm(dir / sample.image_file);
  if (img.width != kImageSize || img.height != kImageSize) {
    throw DatasetFormatError((dir / sample.image_file).string() + ": expected " + std::to_string(kImageSize) + "x" +
                             std::to_string(kImageSize) + " image, found " + std::to_string(img.width) + "x" +
                             std::to_string(img.height));
  }
  return img;
}

}  // namespace kplift
