#include "cmsei/data.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "cmsei/errors.hpp"

namespace cmsei {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kFormatName = "cmsei-bundle-set";
constexpr int kFormatVersion = 1;
// Upper bound on a single matrix, guards allocation from hostile manifests.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

std::string quoted(const std::string& id) { return "'" + id + "'"; }

[[noreturn]] void fail(DataError::Kind kind, const std::string& msg) { throw DataError(kind, msg); }

template <typename T>
T to_little_endian(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

template <typename T>
void write_blob(const fs::path& path, const Matrix& m) {
  std::vector<T> buf(static_cast<std::size_t>(m.size()));
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) buf[k++] = to_little_endian(static_cast<T>(m(r, c)));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(DataError::Kind::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(T)));
  if (!out) fail(DataError::Kind::kIo, "write failed for " + path.string());
}

// ---- manifest field access with diagnostics ------------------------------

const json& field(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) fail(DataError::Kind::kManifest, where + ": expected a JSON object");
  auto it = obj.find(key);
  if (it == obj.end()) fail(DataError::Kind::kManifest, where + ": missing field '" + key + "'");
  return *it;
}

std::string string_field(const json& obj, const char* key, const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_string()) fail(DataError::Kind::kManifest, where + ": field '" + key + "' must be a string");
  return v.get<std::string>();
}

std::int64_t integer(const json& v, const std::string& where) {
  if (!v.is_number_integer()) fail(DataError::Kind::kManifest, where + ": expected an integer");
  return v.get<std::int64_t>();
}

double number(const json& v, const std::string& where) {
  if (!v.is_number()) fail(DataError::Kind::kManifest, where + ": expected a number");
  return v.get<double>();
}

std::pair<Eigen::Index, Eigen::Index> shape_field(const json& obj, const std::string& where) {
  const json& s = field(obj, "shape", where);
  if (!s.is_array() || s.size() != 2) fail(DataError::Kind::kManifest, where + ": shape must be [rows, cols]");
  const std::int64_t rows = integer(s[0], where + " shape[0]");
  const std::int64_t cols = integer(s[1], where + " shape[1]");
  if (rows <= 0 || cols <= 0) {
    fail(DataError::Kind::kShape, where + ": shape must be positive, got [" + std::to_string(rows) + ", " +
                                      std::to_string(cols) + "]");
  }
  if (static_cast<std::uint64_t>(rows) > kMaxElements || static_cast<std::uint64_t>(cols) > kMaxElements ||
      static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(cols) > kMaxElements) {
    fail(DataError::Kind::kShape, where + ": shape too large");
  }
  return {static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

fs::path blob_path(const fs::path& dir, const std::string& name, const std::string& where) {
  const fs::path rel(name);
  if (name.empty() || rel.is_absolute()) fail(DataError::Kind::kManifest, where + ": invalid blob name");
  for (const auto& part : rel) {
    if (part == "..") fail(DataError::Kind::kManifest, where + ": blob name escapes the bundle directory");
  }
  return dir / rel;
}

}  // namespace

// ---- blobs -----------------------------------------------------------------

void write_float32_blob(const fs::path& path, const Matrix& m) { write_blob<float>(path, m); }
void write_float64_blob(const fs::path& path, const Matrix& m) { write_blob<double>(path, m); }

Matrix read_blob(const fs::path& path, Eigen::Index rows, Eigen::Index cols, const std::string& dtype,
                 const std::string& owner) {
  std::size_t width = 0;
  if (dtype == "float32") {
    width = 4;
  } else if (dtype == "float64") {
    width = 8;
  } else {
    fail(DataError::Kind::kManifest, owner + ": unsupported dtype '" + dtype + "'");
  }
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) fail(DataError::Kind::kIo, owner + ": missing blob file " + path.string());
  const std::uintmax_t bytes = fs::file_size(path, ec);
  if (ec) fail(DataError::Kind::kIo, owner + ": cannot stat " + path.string());
  const std::uintmax_t expected = static_cast<std::uintmax_t>(rows) * static_cast<std::uintmax_t>(cols) * width;
  if (bytes != expected) {
    std::ostringstream os;
    os << owner << ": blob " << path.filename().string() << " holds " << bytes << " bytes";
    if (bytes % (static_cast<std::uintmax_t>(cols) * width) == 0) {
      os << " (" << bytes / (static_cast<std::uintmax_t>(cols) * width) << " rows)";
    }
    os << ", declared shape " << rows << "x" << cols << " " << dtype << " needs " << expected;
    fail(DataError::Kind::kShape, os.str());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(DataError::Kind::kIo, owner + ": cannot open " + path.string());
  std::vector<char> raw(static_cast<std::size_t>(bytes));
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!in) fail(DataError::Kind::kIo, owner + ": short read on " + path.string());

  Matrix m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c, ++k) {
      if (width == 4) {
        float f;
        std::memcpy(&f, raw.data() + k * 4, 4);
        m(r, c) = static_cast<double>(to_little_endian(f));
      } else {
        double d;
        std::memcpy(&d, raw.data() + k * 8, 8);
        m(r, c) = to_little_endian(d);
      }
    }
  }
  return m;
}

// ---- dataset ----------------------------------------------------------------

std::vector<int> Dataset::sentence_image_index() const {
  std::unordered_map<std::string, int> index;
  for (std::size_t i = 0; i < images.size(); ++i) index.emplace(images[i].id, static_cast<int>(i));
  std::vector<int> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) {
    auto it = index.find(s.image_id);
    if (it == index.end()) {
      fail(DataError::Kind::kPairing,
           "sentence " + quoted(s.id) + " references unknown image_id " + quoted(s.image_id));
    }
    out.push_back(it->second);
  }
  return out;
}

std::vector<std::vector<int>> Dataset::sentences_of_image() const {
  std::vector<std::vector<int>> out(images.size());
  const auto owner = sentence_image_index();
  for (std::size_t s = 0; s < owner.size(); ++s) out[owner[s]].push_back(static_cast<int>(s));
  return out;
}

void Dataset::validate() const {
  std::set<std::string> image_ids;
  Eigen::Index visual_dim = -1;
  for (const auto& img : images) {
    const std::string who = "image " + quoted(img.id);
    if (!image_ids.insert(img.id).second) fail(DataError::Kind::kPairing, "duplicate image id " + quoted(img.id));
    const Eigen::Index k = img.region_features.rows();
    if (k <= 0 || img.region_features.cols() <= 0) fail(DataError::Kind::kShape, who + ": no regions");
    if (visual_dim < 0) visual_dim = img.region_features.cols();
    if (img.region_features.cols() != visual_dim) {
      fail(DataError::Kind::kShape, who + ": feature width " + std::to_string(img.region_features.cols()) +
                                        " differs from " + std::to_string(visual_dim));
    }
    if (!img.region_features.allFinite()) fail(DataError::Kind::kValue, who + ": non-finite region feature");
    if (static_cast<Eigen::Index>(img.boxes.size()) != k) {
      fail(DataError::Kind::kShape, who + ": " + std::to_string(img.boxes.size()) + " boxes for " +
                                        std::to_string(k) + " regions");
    }
    for (std::size_t b = 0; b < img.boxes.size(); ++b) {
      if (!img.boxes[b].valid()) fail(DataError::Kind::kValue, who + ": box " + std::to_string(b) + " is degenerate");
    }
    for (const auto& [i, j] : img.scene_edges) {
      if (i < 0 || j < 0 || i >= k || j >= k) {
        fail(DataError::Kind::kValue, who + ": scene edge (" + std::to_string(i) + ", " + std::to_string(j) +
                                          ") out of range for K=" + std::to_string(k));
      }
      if (i == j) fail(DataError::Kind::kValue, who + ": self-loop scene edge at " + std::to_string(i));
    }
  }
  std::set<std::string> sentence_ids;
  Eigen::Index text_dim = -1;
  for (const auto& s : sentences) {
    const std::string who = "sentence " + quoted(s.id);
    if (!sentence_ids.insert(s.id).second) fail(DataError::Kind::kPairing, "duplicate sentence id " + quoted(s.id));
    if (s.word_features.rows() <= 0 || s.word_features.cols() <= 0) fail(DataError::Kind::kShape, who + ": no words");
    if (text_dim < 0) text_dim = s.word_features.cols();
    if (s.word_features.cols() != text_dim) {
      fail(DataError::Kind::kShape, who + ": feature width " + std::to_string(s.word_features.cols()) +
                                        " differs from " + std::to_string(text_dim));
    }
    if (!s.word_features.allFinite()) fail(DataError::Kind::kValue, who + ": non-finite word feature");
  }
  (void)sentence_image_index();
}

Dataset slice_images(const Dataset& d, std::size_t first, std::size_t count) {
  if (first + count > d.images.size()) throw ContractError("slice_images: range exceeds image count");
  Dataset out;
  std::set<std::string> keep;
  for (std::size_t i = first; i < first + count; ++i) {
    out.images.push_back(d.images[i]);
    keep.insert(d.images[i].id);
  }
  for (const auto& s : d.sentences) {
    if (keep.count(s.image_id)) out.sentences.push_back(s);
  }
  return out;
}

// ---- synthesis --------------------------------------------------------------

namespace {

Matrix gaussian(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  }
  return m;
}

Vector gaussian_vector(std::mt19937_64& rng, Eigen::Index n, double stddev) {
  return gaussian(rng, n, 1, stddev).col(0);
}

// Rounds through float so the in-memory dataset equals its float32 storage.
void round_to_float(Matrix& m) {
  m = m.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
}

BoxD random_box(std::mt19937_64& rng, double width, double height) {
  std::uniform_real_distribution<double> frac(0.15, 0.5);
  const double w = frac(rng) * width;
  const double h = frac(rng) * height;
  std::uniform_real_distribution<double> ux(0.0, width - w);
  std::uniform_real_distribution<double> uy(0.0, height - h);
  const double x = ux(rng);
  const double y = uy(rng);
  return {x, y, x + w, y + h};
}

BoxD jitter_box(std::mt19937_64& rng, const BoxD& b, double width, double height) {
  std::normal_distribution<double> n(0.0, 1.0);
  const double sx = 0.04 * b.width();
  const double sy = 0.04 * b.height();
  BoxD out{std::clamp(b.x_min + sx * n(rng), 0.0, width), std::clamp(b.y_min + sy * n(rng), 0.0, height),
           std::clamp(b.x_max + sx * n(rng), 0.0, width), std::clamp(b.y_max + sy * n(rng), 0.0, height)};
  if (!out.valid()) return b;
  return out;
}

BoxD round_box(const BoxD& b) {
  auto r = [](double v) { return static_cast<double>(static_cast<float>(v)); };
  const BoxD out{r(b.x_min), r(b.y_min), r(b.x_max), r(b.y_max)};
  return out.valid() ? out : b;
}

}  // namespace

SyntheticDataset synthesize_with_latents(int n_images, int sentences_per_image, int regions, int words,
                                         double signal_strength, std::uint64_t seed,
                                         const SynthesisOptions& opt) {
  if (n_images <= 0 || sentences_per_image < 0 || regions <= 0 || words <= 0) {
    throw ContractError("synthesize_dataset: counts must be positive");
  }
  if (!(signal_strength >= 0.0 && signal_strength <= 1.0)) {
    throw ContractError("synthesize_dataset: signal_strength must lie in [0, 1]");
  }
  if (opt.visual_dim <= 0 || opt.text_dim <= 0 || opt.latent_dim <= 0) {
    throw ContractError("synthesize_dataset: dimensions must be positive");
  }
  const double s = signal_strength;
  const Eigen::Index latent = opt.latent_dim;
  const double spread = opt.object_spread;
  const double norm = 1.0 / std::sqrt(1.0 + spread * spread);

  std::mt19937_64 proj_rng(opt.projection_seed * 0x9E3779B97F4A7C15ULL + 17);
  const Matrix visual_proj = gaussian(proj_rng, opt.visual_dim, latent, 1.0 / std::sqrt(double(latent)));
  const Matrix text_proj = gaussian(proj_rng, opt.text_dim, latent, 1.0 / std::sqrt(double(latent)));

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SyntheticDataset out;
  out.data.images.reserve(n_images);

  for (int i = 0; i < n_images; ++i) {
    std::ostringstream id;
    id << "img_" << std::setw(5) << std::setfill('0') << i;
    ImageBundle img;
    img.id = id.str();

    const Vector z = gaussian_vector(rng, latent, 1.0);
    std::vector<Vector> object_codes;
    std::vector<BoxD> object_boxes;
    std::vector<int> region_object(regions);
    img.boxes.resize(regions);
    for (int k = 0; k < regions; ++k) {
      const bool duplicate = !object_codes.empty() && unit(rng) < opt.overlap_fraction;
      if (duplicate) {
        std::uniform_int_distribution<int> pick(0, static_cast<int>(object_codes.size()) - 1);
        const int g = pick(rng);
        region_object[k] = g;
        img.boxes[k] = round_box(jitter_box(rng, object_boxes[g], opt.image_width, opt.image_height));
      } else {
        object_codes.push_back(gaussian_vector(rng, latent, 1.0));
        object_boxes.push_back(random_box(rng, opt.image_width, opt.image_height));
        region_object[k] = static_cast<int>(object_codes.size()) - 1;
        img.boxes[k] = round_box(object_boxes.back());
      }
    }

    img.region_features.resize(regions, opt.visual_dim);
    for (int k = 0; k < regions; ++k) {
      const Vector code = z + spread * object_codes[region_object[k]];
      const Vector noise = gaussian_vector(rng, opt.visual_dim, 1.0);
      img.region_features.row(k) =
          (opt.feature_scale * (s * norm * (visual_proj * code) + (1.0 - s) * noise)).transpose();
    }
    round_to_float(img.region_features);

    const double p_edge = regions > 1 ? std::min(1.0, opt.edge_degree / double(regions - 1)) : 0.0;
    for (int a = 0; a < regions; ++a) {
      for (int b = a + 1; b < regions; ++b) {
        if (region_object[a] == region_object[b]) continue;
        if (unit(rng) < p_edge) {
          if (unit(rng) < 0.5) {
            img.scene_edges.emplace_back(a, b);
          } else {
            img.scene_edges.emplace_back(b, a);
          }
        }
      }
    }

    out.image_latents.push_back(z);
    const int n_objects = static_cast<int>(object_codes.size());
    for (int m = 0; m < sentences_per_image; ++m) {
      SentenceBundle sent;
      sent.id = img.id + "_s" + std::to_string(m);
      sent.image_id = img.id;
      const Vector y = s * z + (1.0 - s) * gaussian_vector(rng, latent, 1.0);
      int n_words = words;
      if (opt.word_jitter > 0) {
        std::uniform_int_distribution<int> len(std::max(1, words - opt.word_jitter), words);
        n_words = len(rng);
      }
      sent.word_features.resize(n_words, opt.text_dim);
      std::uniform_int_distribution<int> pick(0, n_objects - 1);
      for (int w = 0; w < n_words; ++w) {
        const Vector code = y + s * spread * object_codes[pick(rng)];
        const Vector noise = gaussian_vector(rng, opt.text_dim, 1.0);
        sent.word_features.row(w) =
            (opt.feature_scale * (norm * (text_proj * code) + (1.0 - s) * noise)).transpose();
      }
      round_to_float(sent.word_features);
      out.sentence_latents.push_back(y);
      out.data.sentences.push_back(std::move(sent));
    }
    out.data.images.push_back(std::move(img));
  }
  return out;
}

Dataset synthesize_dataset(int n_images, int sentences_per_image, int regions, int words, double signal_strength,
                           std::uint64_t seed, const SynthesisOptions& options) {
  return synthesize_with_latents(n_images, sentences_per_image, regions, words, signal_strength, seed, options)
      .data;
}

// ---- bundle-set I/O ---------------------------------------------------------

fs::path write_bundle_set(const Dataset& d, const fs::path& dir, const std::string& provenance_json) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(DataError::Kind::kIo, "cannot create " + dir.string() + ": " + ec.message());

  json manifest;
  manifest["format"] = kFormatName;
  manifest["version"] = kFormatVersion;
  if (!provenance_json.empty()) {
    try {
      manifest["provenance"] = json::parse(provenance_json);
    } catch (const json::exception& e) {
      throw ContractError(std::string("write_bundle_set: provenance is not JSON: ") + e.what());
    }
  }
  json bundles = json::array();
  for (std::size_t i = 0; i < d.images.size(); ++i) {
    const auto& img = d.images[i];
    std::ostringstream name;
    name << "image_" << std::setw(6) << std::setfill('0') << i << ".f32";
    write_float32_blob(dir / name.str(), img.region_features);
    json b;
    b["id"] = img.id;
    b["role"] = "image";
    b["shape"] = {img.region_features.rows(), img.region_features.cols()};
    b["dtype"] = "float32";
    b["blob"] = name.str();
    json boxes = json::array();
    for (const auto& box : img.boxes) boxes.push_back({box.x_min, box.y_min, box.x_max, box.y_max});
    b["boxes"] = std::move(boxes);
    json edges = json::array();
    for (const auto& [a, c] : img.scene_edges) edges.push_back({a, c});
    b["scene_edges"] = std::move(edges);
    bundles.push_back(std::move(b));
  }
  for (std::size_t i = 0; i < d.sentences.size(); ++i) {
    const auto& s = d.sentences[i];
    std::ostringstream name;
    name << "sentence_" << std::setw(6) << std::setfill('0') << i << ".f32";
    write_float32_blob(dir / name.str(), s.word_features);
    json b;
    b["id"] = s.id;
    b["role"] = "sentence";
    b["image_id"] = s.image_id;
    b["shape"] = {s.word_features.rows(), s.word_features.cols()};
    b["dtype"] = "float32";
    b["blob"] = name.str();
    bundles.push_back(std::move(b));
  }
  manifest["bundles"] = std::move(bundles);

  const fs::path path = dir / "manifest.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(DataError::Kind::kIo, "cannot open " + path.string() + " for writing");
  out << manifest.dump(1) << "\n";
  if (!out) fail(DataError::Kind::kIo, "write failed for " + path.string());
  return path;
}

Dataset load_bundle_set(const fs::path& manifest_path) {
  std::error_code ec;
  fs::path path = manifest_path;
  if (fs::is_directory(path, ec)) path /= "manifest.json";
  if (!fs::is_regular_file(path, ec)) fail(DataError::Kind::kIo, "manifest not found: " + path.string());
  const fs::path dir = path.parent_path();

  std::ifstream in(path);
  if (!in) fail(DataError::Kind::kIo, "cannot open " + path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    fail(DataError::Kind::kManifest, path.string() + ": invalid JSON: " + e.what());
  }

  const std::string where = path.filename().string();
  if (string_field(manifest, "format", where) != kFormatName) {
    fail(DataError::Kind::kManifest, where + ": not a " + std::string(kFormatName) + " manifest");
  }
  if (integer(field(manifest, "version", where), where + " version") != kFormatVersion) {
    fail(DataError::Kind::kManifest, where + ": unsupported version");
  }
  const json& bundles = field(manifest, "bundles", where);
  if (!bundles.is_array()) fail(DataError::Kind::kManifest, where + ": 'bundles' must be an array");

  Dataset d;
  for (std::size_t n = 0; n < bundles.size(); ++n) {
    const json& b = bundles[n];
    const std::string at = where + " bundle #" + std::to_string(n);
    const std::string id = string_field(b, "id", at);
    const std::string who = "bundle " + quoted(id);
    const std::string role = string_field(b, "role", who);
    const auto [rows, cols] = shape_field(b, who);
    std::string dtype = "float32";
    if (b.contains("dtype")) dtype = string_field(b, "dtype", who);
    if (dtype != "float32") fail(DataError::Kind::kManifest, who + ": feature blobs must be float32");
    const fs::path blob = blob_path(dir, string_field(b, "blob", who), who);

    if (role == "image") {
      ImageBundle img;
      img.id = id;
      const json& boxes = field(b, "boxes", who);
      if (!boxes.is_array()) fail(DataError::Kind::kManifest, who + ": 'boxes' must be an array");
      if (static_cast<Eigen::Index>(boxes.size()) != rows) {
        fail(DataError::Kind::kShape, who + ": " + std::to_string(boxes.size()) + " boxes for declared K=" +
                                          std::to_string(rows));
      }
      for (std::size_t k = 0; k < boxes.size(); ++k) {
        const json& bx = boxes[k];
        const std::string bw = who + " box " + std::to_string(k);
        if (!bx.is_array() || bx.size() != 4) fail(DataError::Kind::kManifest, bw + ": expected [x0, y0, x1, y1]");
        img.boxes.push_back({number(bx[0], bw), number(bx[1], bw), number(bx[2], bw), number(bx[3], bw)});
      }
      const json& edges = field(b, "scene_edges", who);
      if (!edges.is_array()) fail(DataError::Kind::kManifest, who + ": 'scene_edges' must be an array");
      for (const json& e : edges) {
        if (!e.is_array() || e.size() != 2) fail(DataError::Kind::kManifest, who + ": scene edge must be [i, j]");
        const std::int64_t a = integer(e[0], who + " scene edge");
        const std::int64_t c = integer(e[1], who + " scene edge");
        if (a < 0 || c < 0 || a >= rows || c >= rows) {
          fail(DataError::Kind::kValue, who + ": scene edge (" + std::to_string(a) + ", " + std::to_string(c) +
                                            ") out of range for K=" + std::to_string(rows));
        }
        img.scene_edges.emplace_back(static_cast<int>(a), static_cast<int>(c));
      }
      img.region_features = read_blob(blob, rows, cols, dtype, who);
      d.images.push_back(std::move(img));
    } else if (role == "sentence") {
      SentenceBundle s;
      s.id = id;
      s.image_id = string_field(b, "image_id", who);
      s.word_features = read_blob(blob, rows, cols, dtype, who);
      d.sentences.push_back(std::move(s));
    } else {
      fail(DataError::Kind::kManifest, who + ": unknown role '" + role + "'");
    }
  }
  d.validate();
  return d;
}

}  // namespace cmsei
