#include "cmsei/graph.hpp"

#include <json.hpp>

#include "cmsei/errors.hpp"

namespace cmsei {

std::string to_string(AdjacencyKind kind) {
  switch (kind) {
    case AdjacencyKind::kSpatial:
      return "spatial";
    case AdjacencyKind::kSemantic:
      return "semantic";
    case AdjacencyKind::kTextual:
      return "textual";
  }
  return "unknown";
}

void GraphHyperparams::validate() const {
  if (!(mu >= 0.0 && mu <= 1.0)) throw ContractError("graph threshold mu must lie in [0, 1]");
}

Matrix iou_mask(const std::vector<BoxD>& boxes, double mu) {
  const auto k = static_cast<Eigen::Index>(boxes.size());
  Matrix m = Matrix::Zero(k, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    m(i, i) = 1.0 > mu ? 1.0 : 0.0;
    for (Eigen::Index j = i + 1; j < k; ++j) {
      if (iou(boxes[i], boxes[j]) > mu) {
        m(i, j) = 1.0;
        m(j, i) = 1.0;
      }
    }
  }
  return m;
}

Var build_spatial_graph(const Var& projected, const std::vector<BoxD>& boxes, const GraphHyperparams& params,
                        const Var& sim_a, const Var& sim_b) {
  params.validate();
  if (static_cast<Eigen::Index>(boxes.size()) != projected.rows()) {
    throw DimensionError("build_spatial_graph: " + std::to_string(boxes.size()) + " boxes for " +
                         std::to_string(projected.rows()) + " regions");
  }
  const Var sims = matmul(matmul(projected, sim_a), transpose(matmul(projected, sim_b)));
  return mask(sims, iou_mask(boxes, params.mu));
}

AdjacencyMatrix build_semantic_graph(const std::vector<Edge>& scene_edges, Eigen::Index regions) {
  AdjacencyMatrix a{AdjacencyKind::kSemantic, Matrix::Zero(regions, regions)};
  for (const auto& [i, j] : scene_edges) {
    if (i < 0 || j < 0 || i >= regions || j >= regions) {
      throw DimensionError("build_semantic_graph: edge (" + std::to_string(i) + ", " + std::to_string(j) +
                           ") out of range for K=" + std::to_string(regions));
    }
    if (i == j) continue;
    a.weights(i, j) = 1.0;
    a.weights(j, i) = 1.0;
  }
  return a;
}

Var build_textual_graph(const Var& words, const Var& sim_a, const Var& sim_b) {
  return matmul(matmul(words, sim_a), transpose(matmul(words, sim_b)));
}

std::string adjacency_json(const AdjacencyMatrix& a) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(a.kind);
  j["size"] = a.size();
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (Eigen::Index r = 0; r < a.weights.rows(); ++r) {
    std::vector<double> row(a.weights.cols());
    for (Eigen::Index c = 0; c < a.weights.cols(); ++c) row[c] = a.weights(r, c);
    rows.push_back(row);
  }
  j["weights"] = std::move(rows);
  return j.dump();
}

}  // namespace cmsei
