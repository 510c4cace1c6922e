#pragma once

// Retrieval metrics over image x sentence similarity matrices.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmsei/data.hpp"
#include "cmsei/model.hpp"

namespace cmsei {

struct SimilarityMatrix {
  Matrix scores;                    // images x sentences
  std::vector<int> sentence_image;  // ground-truth image of every sentence

  Eigen::Index images() const { return scores.rows(); }
  Eigen::Index sentences() const { return scores.cols(); }
  void validate() const;
};

enum class RetrievalDirection {
  kSentenceRetrieval,  // image query, rank sentences; hit if any ground-truth caption is in the top k
  kImageRetrieval,     // sentence query, rank images
};

/// Percentage of queries whose ground truth is ranked within the top k.
/// Equal scores rank by candidate index (lower index first).
double recall_at_k(const SimilarityMatrix& sim, int k, RetrievalDirection direction);

struct RetrievalReport {
  double sentence_r1 = 0, sentence_r5 = 0, sentence_r10 = 0;
  double image_r1 = 0, image_r5 = 0, image_r10 = 0;
  double rsum = 0;

  nlohmann::ordered_json to_json() const;
  /// Aligned text table: R@1/5/10 for sentence and image retrieval, then rSum.
  std::string table(const std::string& label = "model") const;
};

RetrievalReport retrieval_report(const SimilarityMatrix& sim);

/// Mean report over contiguous folds of `fold_size` images and their own sentences.
RetrievalReport five_fold_average(const SimilarityMatrix& sim, int fold_size = 1000);

/// Elementwise mean of two similarity matrices over the same pairing.
SimilarityMatrix ensemble(const SimilarityMatrix& a, const SimilarityMatrix& b);

struct ScoringOptions {
  int threads = 1;
  /// Images scored per work item.
  int block_size = 32;
};

/// Scores every image/sentence pair of `data` with the model.
SimilarityMatrix compute_similarity(const ModelConfig& config, const ModelParams& params, const Dataset& data,
                                    const ScoringOptions& options = {});

/// Writes <dir>/<bundle id>.json with the adjacency matrices built for each
/// image (spatial, semantic) and sentence (textual).
void dump_graphs(const ModelConfig& config, const ModelParams& params, const Dataset& data,
                 const std::filesystem::path& dir);

}  // namespace cmsei
