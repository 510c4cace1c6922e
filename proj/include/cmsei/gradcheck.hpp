#pragma once

// End-to-end finite-difference check of the training loss gradient.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmsei/model.hpp"

namespace cmsei {

struct GradcheckOptions {
  int images = 3;
  int regions = 5;
  int words = 6;
  int visual_dim = 12;
  int text_dim = 10;
  int embed_dim = 8;
  Direction direction = Direction::kImageToText;
  /// Kept above the largest possible score gap so every hinge stays active.
  double margin = 2.5;
  double step = 1e-5;
  double tolerance = 1e-3;
  /// Entries whose analytic and numeric gradients are both below this are
  /// compared absolutely.
  double abs_floor = 1e-6;
};

struct GroupResult {
  std::string group;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool passed = true;
};

struct GradcheckReport {
  std::uint64_t seed = 0;
  std::vector<GroupResult> groups;
  bool passed() const;
  double max_rel_error() const;
  nlohmann::ordered_json to_json() const;
};

/// Builds a tiny seeded model and batch, then compares every parameter entry's
/// backpropagated gradient against a central difference of the loss.
GradcheckReport gradient_check(std::uint64_t seed, const GradcheckOptions& options = {});

}  // namespace cmsei
