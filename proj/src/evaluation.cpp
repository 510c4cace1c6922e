#include "cmsei/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <mutex>
#include <thread>

#include "cmsei/errors.hpp"
#include "cmsei/interaction.hpp"

namespace cmsei {

void SimilarityMatrix::validate() const {
  if (static_cast<Eigen::Index>(sentence_image.size()) != scores.cols()) {
    throw DimensionError("similarity matrix has " + std::to_string(scores.cols()) + " sentence columns but " +
                         std::to_string(sentence_image.size()) + " ground-truth entries");
  }
  for (int img : sentence_image) {
    if (img < 0 || img >= scores.rows()) throw ContractError("ground-truth image index out of range");
  }
  if (!scores.allFinite()) throw NumericError("similarity matrix has non-finite entries");
}

namespace {

// 0-based rank of `target` among `scores` (higher first, ties by lower index first).
template <typename Derived>
Eigen::Index rank_of(const Eigen::DenseBase<Derived>& scores, Eigen::Index target) {
  const double t = scores(target);
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const double s = scores(i);
    if (s > t || (s == t && i < target)) ++rank;
  }
  return rank;
}

}  // namespace

double recall_at_k(const SimilarityMatrix& sim, int k, RetrievalDirection direction) {
  sim.validate();
  if (k < 1) throw ContractError("recall_at_k: k must be >= 1");
  if (direction == RetrievalDirection::kSentenceRetrieval) {
    if (k > sim.sentences()) {
      throw ContractError("recall_at_k: k=" + std::to_string(k) + " exceeds " + std::to_string(sim.sentences()) +
                          " candidate sentences");
    }
    std::vector<std::vector<Eigen::Index>> truth(sim.images());
    for (std::size_t s = 0; s < sim.sentence_image.size(); ++s) truth[sim.sentence_image[s]].push_back(s);
    Eigen::Index hits = 0;
    for (Eigen::Index i = 0; i < sim.images(); ++i) {
      const auto row = sim.scores.row(i);
      for (Eigen::Index s : truth[i]) {
        if (rank_of(row, s) < k) {
          ++hits;
          break;
        }
      }
    }
    return sim.images() == 0 ? 0.0 : 100.0 * double(hits) / double(sim.images());
  }
  if (k > sim.images()) {
    throw ContractError("recall_at_k: k=" + std::to_string(k) + " exceeds " + std::to_string(sim.images()) +
                        " candidate images");
  }
  Eigen::Index hits = 0;
  for (Eigen::Index s = 0; s < sim.sentences(); ++s) {
    if (rank_of(sim.scores.col(s), sim.sentence_image[s]) < k) ++hits;
  }
  return sim.sentences() == 0 ? 0.0 : 100.0 * double(hits) / double(sim.sentences());
}

RetrievalReport retrieval_report(const SimilarityMatrix& sim) {
  RetrievalReport r;
  r.sentence_r1 = recall_at_k(sim, 1, RetrievalDirection::kSentenceRetrieval);
  r.sentence_r5 = recall_at_k(sim, 5, RetrievalDirection::kSentenceRetrieval);
  r.sentence_r10 = recall_at_k(sim, 10, RetrievalDirection::kSentenceRetrieval);
  r.image_r1 = recall_at_k(sim, 1, RetrievalDirection::kImageRetrieval);
  r.image_r5 = recall_at_k(sim, 5, RetrievalDirection::kImageRetrieval);
  r.image_r10 = recall_at_k(sim, 10, RetrievalDirection::kImageRetrieval);
  r.rsum = r.sentence_r1 + r.sentence_r5 + r.sentence_r10 + r.image_r1 + r.image_r5 + r.image_r10;
  return r;
}

nlohmann::ordered_json RetrievalReport::to_json() const {
  nlohmann::ordered_json j;
  j["sentence_retrieval"] = {{"R@1", sentence_r1}, {"R@5", sentence_r5}, {"R@10", sentence_r10}};
  j["image_retrieval"] = {{"R@1", image_r1}, {"R@5", image_r5}, {"R@10", image_r10}};
  j["rsum"] = rsum;
  return j;
}

std::string RetrievalReport::table(const std::string& label) const {
  const int name_w = std::max<int>(12, static_cast<int>(label.size()) + 1);
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << std::left << std::setw(name_w) << "" << "| Sentence Retrieval   | Image Retrieval      |\n";
  os << std::left << std::setw(name_w) << "Method" << "|  R@1   R@5   R@10   |  R@1   R@5   R@10   |  rSum\n";
  os << std::string(static_cast<std::size_t>(name_w), '-') << "+----------------------+----------------------+-------\n";
  os << std::left << std::setw(name_w) << label << "|" << std::right << std::setw(6) << sentence_r1 << std::setw(6)
     << sentence_r5 << std::setw(7) << sentence_r10 << "   |" << std::setw(6) << image_r1 << std::setw(6) << image_r5
     << std::setw(7) << image_r10 << "   |" << std::setw(7) << rsum << "\n";
  return os.str();
}

RetrievalReport five_fold_average(const SimilarityMatrix& sim, int fold_size) {
  sim.validate();
  if (fold_size <= 0) throw ContractError("five_fold_average: fold size must be positive");
  if (sim.images() == 0 || sim.images() % fold_size != 0) {
    throw ContractError("five_fold_average: " + std::to_string(sim.images()) + " images do not split into folds of " +
                        std::to_string(fold_size));
  }
  const Eigen::Index folds = sim.images() / fold_size;
  RetrievalReport mean;
  for (Eigen::Index f = 0; f < folds; ++f) {
    const int lo = static_cast<int>(f * fold_size);
    const int hi = lo + fold_size;
    std::vector<Eigen::Index> cols;
    SimilarityMatrix part;
    for (std::size_t s = 0; s < sim.sentence_image.size(); ++s) {
      const int img = sim.sentence_image[s];
      if (img >= lo && img < hi) {
        cols.push_back(static_cast<Eigen::Index>(s));
        part.sentence_image.push_back(img - lo);
      }
    }
    part.scores.resize(fold_size, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) {
      part.scores.col(static_cast<Eigen::Index>(c)) = sim.scores.block(lo, cols[c], fold_size, 1);
    }
    const RetrievalReport r = retrieval_report(part);
    mean.sentence_r1 += r.sentence_r1;
    mean.sentence_r5 += r.sentence_r5;
    mean.sentence_r10 += r.sentence_r10;
    mean.image_r1 += r.image_r1;
    mean.image_r5 += r.image_r5;
    mean.image_r10 += r.image_r10;
  }
  const double n = static_cast<double>(folds);
  mean.sentence_r1 /= n;
  mean.sentence_r5 /= n;
  mean.sentence_r10 /= n;
  mean.image_r1 /= n;
  mean.image_r5 /= n;
  mean.image_r10 /= n;
  mean.rsum = mean.sentence_r1 + mean.sentence_r5 + mean.sentence_r10 + mean.image_r1 + mean.image_r5 + mean.image_r10;
  return mean;
}

SimilarityMatrix ensemble(const SimilarityMatrix& a, const SimilarityMatrix& b) {
  if (a.scores.rows() != b.scores.rows() || a.scores.cols() != b.scores.cols()) {
    throw DimensionError("ensemble: similarity shapes differ, " + shape_string(a.scores) + " vs " +
                         shape_string(b.scores));
  }
  if (a.sentence_image != b.sentence_image) throw ContractError("ensemble: ground-truth pairings differ");
  SimilarityMatrix out;
  out.scores = 0.5 * (a.scores + b.scores);
  out.sentence_image = a.sentence_image;
  return out;
}

// ---- scoring ------------------------------------------------------------------

namespace {

struct FrozenImage {
  Matrix projected, final, global;
};

struct FrozenSentence {
  Matrix projected, final, global;
};

FrozenImage freeze_image(const ModelConfig& config, const ModelParams& params, const ImageBundle& img) {
  Tape tape(false);
  const BoundParams bound = bind_frozen(tape, params);
  const VisualEncoding e = encode_image(tape, bound, img, config);
  return {e.projected.value(), e.final.value(), e.global.value()};
}

FrozenSentence freeze_sentence(const ModelConfig& config, const ModelParams& params, const SentenceBundle& s) {
  Tape tape(false);
  const BoundParams bound = bind_frozen(tape, params);
  const TextEncoding e = encode_sentence(tape, bound, s, config);
  return {e.projected.value(), e.final.value(), e.global.value()};
}

template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(threads), n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

SimilarityMatrix compute_similarity(const ModelConfig& config, const ModelParams& params, const Dataset& data,
                                    const ScoringOptions& options) {
  config.validate();
  SimilarityMatrix sim;
  sim.sentence_image = data.sentence_image_index();
  const std::size_t n_img = data.images.size();
  const std::size_t n_sent = data.sentences.size();
  sim.scores = Matrix::Zero(static_cast<Eigen::Index>(n_img), static_cast<Eigen::Index>(n_sent));

  std::vector<FrozenImage> images(n_img);
  std::vector<FrozenSentence> sentences(n_sent);
  parallel_for(n_img, options.threads, [&](std::size_t i) { images[i] = freeze_image(config, params, data.images[i]); });
  parallel_for(n_sent, options.threads,
               [&](std::size_t s) { sentences[s] = freeze_sentence(config, params, data.sentences[s]); });

  const std::size_t block = static_cast<std::size_t>(std::max(1, options.block_size));
  const std::size_t n_blocks = (n_img + block - 1) / block;
  parallel_for(n_blocks, options.threads, [&](std::size_t b) {
    const std::size_t lo = b * block;
    const std::size_t hi = std::min(n_img, lo + block);
    for (std::size_t i = lo; i < hi; ++i) {
      for (std::size_t s = 0; s < n_sent; ++s) {
        Tape tape(false);
        const BoundParams bound = bind_frozen(tape, params);
        VisualEncoding ve;
        ve.projected = tape.view(images[i].projected);
        ve.final = tape.view(images[i].final);
        ve.global = tape.view(images[i].global);
        TextEncoding te;
        te.projected = tape.view(sentences[s].projected);
        te.final = tape.view(sentences[s].final);
        te.global = tape.view(sentences[s].global);
        sim.scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)) =
            score_pair(bound, ve, te, config).scalar();
      }
    }
  });
  return sim;
}

void dump_graphs(const ModelConfig& config, const ModelParams& params, const Dataset& data,
                 const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&](const std::string& id, const nlohmann::ordered_json& j) {
    std::string safe;
    for (char c : id) safe += (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-') ? c : '_';
    std::ofstream out(dir / (safe + ".json"), std::ios::trunc);
    if (!out) throw DataError(DataError::Kind::kIo, "cannot write graph dump for " + id);
    out << j.dump() << "\n";
  };
  auto entry = [](const AdjacencyMatrix& a) { return nlohmann::ordered_json::parse(adjacency_json(a)); };

  for (const auto& img : data.images) {
    Tape tape(false);
    const BoundParams bound = bind_frozen(tape, params);
    const VisualEncoding e = encode_image(tape, bound, img, config);
    nlohmann::ordered_json j;
    j["id"] = img.id;
    j["role"] = "image";
    nlohmann::ordered_json graphs = nlohmann::ordered_json::array();
    if (e.spatial_adjacency.valid()) graphs.push_back(entry({AdjacencyKind::kSpatial, e.spatial_adjacency.value()}));
    if (e.semantic_adjacency.valid()) graphs.push_back(entry({AdjacencyKind::kSemantic, e.semantic_adjacency.value()}));
    j["graphs"] = std::move(graphs);
    write(img.id, j);
  }
  for (const auto& s : data.sentences) {
    Tape tape(false);
    const BoundParams bound = bind_frozen(tape, params);
    const TextEncoding e = encode_sentence(tape, bound, s, config);
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["role"] = "sentence";
    nlohmann::ordered_json graphs = nlohmann::ordered_json::array();
    if (e.textual_adjacency.valid()) graphs.push_back(entry({AdjacencyKind::kTextual, e.textual_adjacency.value()}));
    j["graphs"] = std::move(graphs);
    write(s.id, j);
  }
}

}  // namespace cmsei
