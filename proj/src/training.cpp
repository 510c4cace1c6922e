#include "cmsei/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "cmsei/checkpoint.hpp"
#include "cmsei/errors.hpp"
#include "cmsei/evaluation.hpp"
#include "cmsei/interaction.hpp"

namespace cmsei {

namespace {

struct HingeTerm {
  Eigen::Index pos_row, pos_col;
  Eigen::Index neg_row, neg_col;
  double value;
};

bool excluded(const Matrix* positives, Eigen::Index r, Eigen::Index c) {
  return positives != nullptr && (*positives)(r, c) != 0.0;
}

// Active hinge terms of the loss; inactive ones contribute neither value nor gradient.
std::vector<HingeTerm> hinge_terms(const Matrix& s, double margin, NegativeMode mode, const Matrix* positives) {
  if (s.rows() != s.cols()) throw DimensionError("triplet_loss: score matrix is " + shape_string(s) + ", not square");
  if (positives != nullptr && (positives->rows() != s.rows() || positives->cols() != s.cols())) {
    throw DimensionError("triplet_loss: positive mask is " + shape_string(*positives) + " for " + shape_string(s));
  }
  const Eigen::Index b = s.rows();
  std::vector<HingeTerm> terms;
  // Negative sentences for each image (row), then negative images for each sentence (column).
  for (int pass = 0; pass < 2; ++pass) {
    for (Eigen::Index q = 0; q < b; ++q) {
      const double matched = s(q, q);
      Eigen::Index best = -1;
      double best_score = 0.0;
      for (Eigen::Index n = 0; n < b; ++n) {
        if (n == q) continue;
        const Eigen::Index r = pass == 0 ? q : n;
        const Eigen::Index c = pass == 0 ? n : q;
        if (excluded(positives, r, c)) continue;
        if (mode == NegativeMode::kSum) {
          const double v = margin - matched + s(r, c);
          if (v > 0.0) terms.push_back({q, q, r, c, v});
        } else if (best < 0 || s(r, c) > best_score) {
          best = n;
          best_score = s(r, c);
        }
      }
      if (mode == NegativeMode::kHardest && best >= 0) {
        const double v = margin - matched + best_score;
        const Eigen::Index r = pass == 0 ? q : best;
        const Eigen::Index c = pass == 0 ? best : q;
        if (v > 0.0) terms.push_back({q, q, r, c, v});
      }
    }
  }
  return terms;
}

}  // namespace

double triplet_loss(const Matrix& scores, double margin, NegativeMode mode, const Matrix* positives) {
  double total = 0.0;
  for (const auto& t : hinge_terms(scores, margin, mode, positives)) total += t.value;
  return total;
}

Var triplet_loss(const Var& scores, double margin, NegativeMode mode, const Matrix* positives) {
  auto terms = hinge_terms(scores.value(), margin, mode, positives);
  Matrix out(1, 1);
  out(0, 0) = 0.0;
  for (const auto& t : terms) out(0, 0) += t.value;
  Tape& tape = *scores.tape();
  return tape.record(std::move(out), {scores}, [scores, terms](const Matrix& g, std::vector<Matrix>& adj) {
    Matrix d = Matrix::Zero(scores.rows(), scores.cols());
    for (const auto& t : terms) {
      d(t.neg_row, t.neg_col) += g(0, 0);
      d(t.pos_row, t.pos_col) -= g(0, 0);
    }
    accumulate(adj, scores, d);
  });
}

// ---- Adam ---------------------------------------------------------------------

AdamState AdamState::for_params(const ModelParams& params) {
  AdamState s;
  for (const Parameter* p : params.all()) {
    s.first_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    s.second_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
  return s;
}

void adam_step(ModelParams& params, AdamState& state, double lr) {
  auto all = params.all();
  if (state.first_moment.size() != all.size() || state.second_moment.size() != all.size()) {
    throw ContractError("adam_step: optimiser state does not match the parameter set");
  }
  for (const Parameter* p : all) {
    if (!p->grad.allFinite()) throw NumericError("non-finite gradient in parameter '" + p->name + "'");
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (std::size_t i = 0; i < all.size(); ++i) {
    Parameter& p = *all[i];
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols()) {
      throw ContractError("adam_step: moment shape mismatch for '" + p.name + "'");
    }
    m = state.beta1 * m + (1.0 - state.beta1) * p.grad;
    v = state.beta2 * v + (1.0 - state.beta2) * p.grad.cwiseAbs2();
    const Matrix m_hat = m / c1;
    const Matrix v_hat = v / c2;
    p.value.array() -= lr * m_hat.array() / (v_hat.array().sqrt() + state.eps);
  }
}

// ---- batches --------------------------------------------------------------------

Var batch_loss(Tape& tape, const BoundParams& bound, const Dataset& data, const std::vector<int>& owner,
               const std::vector<int>& batch, const ModelConfig& model, const TrainConfig& train) {
  const auto b = static_cast<Eigen::Index>(batch.size());
  if (b < 2) throw ContractError("batch_loss: a batch needs at least two pairs");

  std::map<int, VisualEncoding> images;
  for (int s : batch) {
    const int img = owner.at(s);
    if (!images.count(img)) images.emplace(img, encode_image(tape, bound, data.images.at(img), model));
  }
  std::vector<TextEncoding> sentences;
  sentences.reserve(batch.size());
  for (int s : batch) sentences.push_back(encode_sentence(tape, bound, data.sentences.at(s), model));

  // One score per (distinct image, sentence); duplicated images reuse it.
  std::map<std::pair<int, Eigen::Index>, Var> cache;
  std::vector<Var> cells;
  cells.reserve(static_cast<std::size_t>(b * b));
  Matrix positives = Matrix::Zero(b, b);
  for (Eigen::Index r = 0; r < b; ++r) {
    const int img = owner.at(batch[r]);
    for (Eigen::Index c = 0; c < b; ++c) {
      if (owner.at(batch[c]) == img) positives(r, c) = 1.0;
      auto key = std::make_pair(img, c);
      auto it = cache.find(key);
      if (it == cache.end()) {
        it = cache.emplace(key, score_pair(bound, images.at(img), sentences[c], model)).first;
      }
      cells.push_back(it->second);
    }
  }
  const Var scores = assemble(cells, b, b);
  return triplet_loss(scores, train.margin, train.negatives, &positives);
}

std::vector<int> epoch_order(std::size_t n_sentences, std::uint64_t seed, int epoch) {
  std::vector<int> order(n_sentences);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// ---- trainer ----------------------------------------------------------------------

Trainer::Trainer(ModelConfig model, TrainConfig train, ModelParams params)
    : model_(std::move(model)), train_(std::move(train)), params_(std::move(params)) {
  model_.validate();
  train_.validate();
  adam_ = AdamState::for_params(params_);
}

Trainer::Trainer(ModelConfig model, TrainConfig train, ModelParams params, AdamState adam, TrainProgress progress)
    : model_(std::move(model)),
      train_(std::move(train)),
      params_(std::move(params)),
      adam_(std::move(adam)),
      progress_(progress) {
  model_.validate();
  train_.validate();
}

double Trainer::run_epoch(const Dataset& data) {
  const std::vector<int> owner = data.sentence_image_index();
  const std::vector<int> order = epoch_order(data.sentences.size(), train_.seed, progress_.epochs_completed);
  const double lr = train_.lr_at(progress_.epochs_completed);
  const std::size_t bs = static_cast<std::size_t>(train_.batch_size);

  double total = 0.0;
  int batches = 0;
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t end = std::min(order.size(), start + bs);
    if (end - start < 2) break;
    const std::vector<int> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
    params_.zero_grad();
    Tape tape;
    const BoundParams bound = bind(tape, params_);
    const Var loss = batch_loss(tape, bound, data, owner, batch, model_, train_);
    const double value = loss.scalar();
    if (!std::isfinite(value)) {
      throw NumericError("training diverged: non-finite loss in epoch " + std::to_string(progress_.epochs_completed + 1));
    }
    tape.backward(loss);
    adam_step(params_, adam_, lr);
    total += value;
    ++batches;
  }
  progress_.epochs_completed += 1;
  return batches > 0 ? total / batches : 0.0;
}

namespace {

Checkpoint make_checkpoint(const Trainer& t, const ModelParams& params, const std::string& run_config) {
  Checkpoint c;
  c.model = t.model_config();
  c.train = t.train_config();
  c.params = params;
  c.optimizer = t.adam();
  c.progress = t.progress();
  c.run_config_json = run_config;
  return c;
}

}  // namespace

std::vector<EpochRecord> Trainer::fit(const Dataset& data, const TrainOptions& options) {
  std::vector<EpochRecord> history;
  std::ofstream metrics;
  if (options.output_dir) {
    std::filesystem::create_directories(*options.output_dir);
    metrics.open(*options.output_dir / "metrics.jsonl", std::ios::app);
  }
  const ScoringOptions scoring{options.threads, 32};
  auto validate = [&]() -> std::optional<double> {
    if (options.validation == nullptr) return std::nullopt;
    return retrieval_report(compute_similarity(model_, params_, *options.validation, scoring)).rsum;
  };
  auto emit = [&](const EpochRecord& r) {
    history.push_back(r);
    if (metrics.is_open()) {
      nlohmann::ordered_json j;
      j["epoch"] = r.epoch;
      j["loss"] = r.loss;
      j["lr"] = r.lr;
      j["rsum"] = r.rsum ? nlohmann::ordered_json(*r.rsum) : nlohmann::ordered_json(nullptr);
      metrics << j.dump() << "\n" << std::flush;
    }
    if (options.on_epoch) options.on_epoch(r);
  };

  if (options.evaluate_initial && progress_.epochs_completed == 0) {
    emit({0, std::numeric_limits<double>::quiet_NaN(), train_.lr_at(0), validate()});
  }

  int budget = train_.max_epochs - progress_.epochs_completed;
  if (options.epoch_limit) budget = std::min(budget, *options.epoch_limit);
  for (int e = 0; e < budget; ++e) {
    EpochRecord r;
    r.lr = train_.lr_at(progress_.epochs_completed);
    r.loss = run_epoch(data);
    r.epoch = progress_.epochs_completed;
    r.rsum = validate();
    // Without validation data the latest parameters are the best ones.
    const bool improved = !r.rsum.has_value() || *r.rsum > progress_.best_rsum;
    if (improved) {
      best_ = params_;
      if (r.rsum) progress_.best_rsum = *r.rsum;
      progress_.best_epoch = r.epoch;
    }
    if (options.output_dir) {
      save_checkpoint(make_checkpoint(*this, params_, options.run_config_json), *options.output_dir / "last.ckpt");
      if (improved) {
        save_checkpoint(make_checkpoint(*this, *best_, options.run_config_json), *options.output_dir / "best.ckpt");
      }
    }
    emit(r);
  }
  return history;
}

}  // namespace cmsei
