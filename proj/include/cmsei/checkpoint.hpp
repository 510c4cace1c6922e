#pragma once

// Checkpoint container: a directory holding manifest.json (configs, progress,
// parameter names/shapes) plus one raw little-endian blob per matrix, the same
// layout as bundle sets.

#include <filesystem>
#include <optional>
#include <string>

#include "cmsei/config.hpp"
#include "cmsei/model.hpp"
#include "cmsei/training.hpp"

namespace cmsei {

struct Checkpoint {
  ModelConfig model{};
  TrainConfig train{};
  ModelParams params;
  std::optional<AdamState> optimizer;
  TrainProgress progress{};
  /// Serialised RunConfig of the run that wrote the checkpoint (may be empty).
  std::string run_config_json;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace cmsei
