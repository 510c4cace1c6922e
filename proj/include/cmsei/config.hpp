#pragma once

// Training hyperparameters and JSON (de)serialisation of every config record.
// The JSON form is what gets embedded in checkpoints, reports and manifests.

#include <cstdint>
#include <string>

#include <json.hpp>

#include "cmsei/model.hpp"

namespace cmsei {

inline constexpr const char* kToolVersion = "0.1.0";

enum class NegativeMode {
  kSum,      // every in-batch negative contributes
  kHardest,  // only the highest-scoring negative per query
};

std::string to_string(NegativeMode m);
NegativeMode parse_negative_mode(const std::string& s);

struct TrainConfig {
  double margin = 0.2;
  double lr = 2e-4;
  double decay_rate = 0.1;
  int decay_every = 15;  // epochs; <= 0 disables decay
  int batch_size = 64;
  int max_epochs = 30;
  NegativeMode negatives = NegativeMode::kSum;
  std::uint64_t seed = 0;

  /// Settings sized for synthetic desk-scale runs.
  static TrainConfig desk_scale();

  /// Learning rate for a 0-based epoch index.
  double lr_at(int epoch) const;
  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Everything a run depends on; echoed into every artifact it produces.
struct RunConfig {
  ModelConfig model{};
  TrainConfig train{};
  std::string command;
  std::string data_path;
  std::string validation_path;
  std::string output_path;
  int threads = 1;
};

nlohmann::ordered_json to_json(const ModelConfig& c);
nlohmann::ordered_json to_json(const TrainConfig& c);
nlohmann::ordered_json to_json(const RunConfig& c);
ModelConfig model_config_from_json(const nlohmann::ordered_json& j);
TrainConfig train_config_from_json(const nlohmann::ordered_json& j);

/// {"tool": ..., "version": ..., "run_config": ...}
nlohmann::ordered_json provenance(const RunConfig& c);

}  // namespace cmsei
