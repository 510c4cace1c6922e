#pragma once

// Intra-modal adjacency matrices:
//   spatial  (A^s): learned region similarity, kept only where IoU > mu
//   semantic (A^v): binary, symmetrised scene-graph edges
//   textual  (A^t): dense learned word similarity
//
// Spatial and textual graphs are differentiable (they depend on trainable
// similarity maps); the semantic graph is a constant.

#include <string>
#include <vector>

#include "cmsei/autodiff.hpp"
#include "cmsei/data.hpp"

namespace cmsei {

enum class AdjacencyKind { kSpatial, kSemantic, kTextual };

std::string to_string(AdjacencyKind kind);

struct AdjacencyMatrix {
  AdjacencyKind kind = AdjacencyKind::kSpatial;
  Matrix weights;

  Eigen::Index size() const { return weights.rows(); }
};

struct GraphHyperparams {
  double mu = 0.4;

  void validate() const;
  friend bool operator==(const GraphHyperparams&, const GraphHyperparams&) = default;
};

/// 1 where IoU(box_i, box_j) > mu (strict), else 0. Diagonal is 1 for mu < 1.
Matrix iou_mask(const std::vector<BoxD>& boxes, double mu);

/// Sims = (V Wa)(V Wb)^T masked by iou_mask. Sims is recomputed from the
/// current projections, so gradients reach V, Wa and Wb.
Var build_spatial_graph(const Var& projected, const std::vector<BoxD>& boxes, const GraphHyperparams& params,
                        const Var& sim_a, const Var& sim_b);

AdjacencyMatrix build_semantic_graph(const std::vector<Edge>& scene_edges, Eigen::Index regions);

/// A^t = (T Wa)(T Wb)^T over all word pairs.
Var build_textual_graph(const Var& words, const Var& sim_a, const Var& sim_b);

/// Serialises an adjacency for debug dumps.
std::string adjacency_json(const AdjacencyMatrix& a);

}  // namespace cmsei
