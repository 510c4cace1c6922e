#pragma once

// Bidirectional triplet ranking loss, Adam, and the epoch loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cmsei/autodiff.hpp"
#include "cmsei/config.hpp"
#include "cmsei/data.hpp"
#include "cmsei/model.hpp"

namespace cmsei {

// ---- loss ---------------------------------------------------------------------

/// Hinge ranking loss over a BxB score matrix whose diagonal holds the matched
/// pairs (rows = images, columns = sentences):
///   sum_i sum_{j != i} [m - S_ii + S_ij]_+  +  sum_j sum_{i != j} [m - S_jj + S_ij]_+
/// Entries flagged in `positives` (besides the diagonal) are never negatives.
double triplet_loss(const Matrix& scores, double margin, NegativeMode mode = NegativeMode::kSum,
                    const Matrix* positives = nullptr);
Var triplet_loss(const Var& scores, double margin, NegativeMode mode = NegativeMode::kSum,
                 const Matrix* positives = nullptr);

// ---- optimiser ------------------------------------------------------------------

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;

  static AdamState for_params(const ModelParams& params);
};

/// Bias-corrected Adam update of every parameter from its accumulated grad.
/// Throws NumericError naming the first parameter with a non-finite gradient.
void adam_step(ModelParams& params, AdamState& state, double lr);

// ---- batches ----------------------------------------------------------------------

/// Loss of one batch of sentences paired with their images. Each distinct
/// image and sentence is encoded once; all BxB pairs are scored.
Var batch_loss(Tape& tape, const BoundParams& bound, const Dataset& data, const std::vector<int>& owner,
               const std::vector<int>& batch, const ModelConfig& model, const TrainConfig& train);

/// Seeded permutation of sentence indices for one epoch.
std::vector<int> epoch_order(std::size_t n_sentences, std::uint64_t seed, int epoch);

// ---- loop -----------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;  // 1-based count of completed epochs; 0 = before training
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> rsum;
};

struct TrainProgress {
  int epochs_completed = 0;
  double best_rsum = -1.0;
  int best_epoch = 0;
};

struct TrainOptions {
  const Dataset* validation = nullptr;
  /// When set: last.ckpt/, best.ckpt/ and metrics.jsonl are written here.
  std::optional<std::filesystem::path> output_dir;
  /// Score the validation set before the first epoch (record epoch 0).
  bool evaluate_initial = false;
  /// Run at most this many epochs in this call (the config's max still caps).
  std::optional<int> epoch_limit;
  int threads = 1;
  /// Serialised RunConfig embedded in checkpoints.
  std::string run_config_json;
  std::function<void(const EpochRecord&)> on_epoch;
};

class Trainer {
 public:
  Trainer(ModelConfig model, TrainConfig train, ModelParams params);
  /// Continue from saved parameters, optimiser state and progress.
  Trainer(ModelConfig model, TrainConfig train, ModelParams params, AdamState adam, TrainProgress progress);

  /// One pass over `data` in seeded shuffled batches. Returns the mean batch loss.
  double run_epoch(const Dataset& data);

  /// Runs epochs until max_epochs (or the option's limit); validation picks the best parameters.
  std::vector<EpochRecord> fit(const Dataset& data, const TrainOptions& options = {});

  const ModelConfig& model_config() const { return model_; }
  const TrainConfig& train_config() const { return train_; }
  const ModelParams& params() const { return params_; }
  ModelParams& params() { return params_; }
  const ModelParams& best_params() const { return best_.has_value() ? *best_ : params_; }
  const AdamState& adam() const { return adam_; }
  const TrainProgress& progress() const { return progress_; }

 private:
  ModelConfig model_;
  TrainConfig train_;
  ModelParams params_;
  AdamState adam_;
  TrainProgress progress_;
  std::optional<ModelParams> best_;
};

}  // namespace cmsei
