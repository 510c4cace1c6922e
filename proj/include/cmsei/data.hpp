#pragma once

// Feature bundles and the on-disk bundle-set container.
//
// Bundle-set layout (normative, see docs/bundle_format.md):
//   <dir>/manifest.json   UTF-8 JSON describing every bundle
//   <dir>/<blob>          raw little-endian float32, row-major, no header
//
// Features are stored as float32 and promoted to double on load.

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cmsei/numeric.hpp"

namespace cmsei {

inline constexpr int kDefaultRegions = 36;
inline constexpr int kDefaultVisualDim = 2048;
inline constexpr int kDefaultTextDim = 768;

using Edge = std::pair<int, int>;

struct ImageBundle {
  std::string id;
  Matrix region_features;  // K x visual_dim
  std::vector<BoxD> boxes;  // K entries
  std::vector<Edge> scene_edges;

  Eigen::Index regions() const { return region_features.rows(); }
  friend bool operator==(const ImageBundle&, const ImageBundle&) = default;
};

struct SentenceBundle {
  std::string id;
  std::string image_id;
  Matrix word_features;  // N x text_dim

  Eigen::Index words() const { return word_features.rows(); }
  friend bool operator==(const SentenceBundle&, const SentenceBundle&) = default;
};

struct Dataset {
  std::vector<ImageBundle> images;
  std::vector<SentenceBundle> sentences;

  /// Image index for every sentence; throws DataError on dangling ids.
  std::vector<int> sentence_image_index() const;
  std::vector<std::vector<int>> sentences_of_image() const;

  /// Throws DataError (shape, value, pairing) on the first violated invariant.
  void validate() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Images [first, first + count) and their sentences.
Dataset slice_images(const Dataset& d, std::size_t first, std::size_t count);

struct SynthesisOptions {
  int visual_dim = kDefaultVisualDim;
  int text_dim = kDefaultTextDim;
  int latent_dim = 16;
  /// Probability that a region is a jittered re-detection of an existing object.
  double overlap_fraction = 0.5;
  /// Expected scene-graph degree per region.
  double edge_degree = 1.5;
  /// Per-entry scale of the stored features.
  double feature_scale = 0.1;
  /// Spread of object codes around the image latent.
  double object_spread = 1.0;
  /// Seed for the modality projections, shared across data seeds so that
  /// train/validation sets generated with different seeds live in the same
  /// feature space. Changing it simulates a domain shift.
  std::uint64_t projection_seed = 0;
  /// Words per sentence vary uniformly in [N - word_jitter, N].
  int word_jitter = 0;
  double image_width = 640.0;
  double image_height = 480.0;
};

/// Generated dataset plus the latent vectors it was mixed from.
struct SyntheticDataset {
  Dataset data;
  std::vector<Vector> image_latents;
  std::vector<Vector> sentence_latents;
};

SyntheticDataset synthesize_with_latents(int n_images, int sentences_per_image, int regions, int words,
                                         double signal_strength, std::uint64_t seed,
                                         const SynthesisOptions& options = {});

Dataset synthesize_dataset(int n_images, int sentences_per_image, int regions, int words,
                           double signal_strength, std::uint64_t seed,
                           const SynthesisOptions& options = {});

/// Writes manifest.json + blobs into dir (created if missing). `provenance`
/// is embedded verbatim under the manifest's "provenance" key when non-empty.
std::filesystem::path write_bundle_set(const Dataset& d, const std::filesystem::path& dir,
                                       const std::string& provenance_json = {});

/// Accepts either the manifest path or its directory.
Dataset load_bundle_set(const std::filesystem::path& manifest_path);

// Raw blob helpers, shared with checkpoints.
void write_float32_blob(const std::filesystem::path& path, const Matrix& m);
void write_float64_blob(const std::filesystem::path& path, const Matrix& m);
Matrix read_blob(const std::filesystem::path& path, Eigen::Index rows, Eigen::Index cols,
                 const std::string& dtype, const std::string& owner);

}  // namespace cmsei
