#pragma once

// Model configuration, learnable parameters and the graph-enhanced encoders.
//
// Features are stored row-wise (one region or word per row), so a linear map
// applied to every node reads `X W` rather than `W x`.

#include <cstdint>
#include <string>
#include <vector>

#include "cmsei/autodiff.hpp"
#include "cmsei/data.hpp"
#include "cmsei/graph.hpp"

namespace cmsei {

/// Which modality is refined by cross-modal attention before scoring.
enum class Direction {
  kImageToText,  // objects attend to words, scored against the pooled sentence
  kTextToImage,  // words attend to objects, scored against the pooled image
};

/// Local-global gate: one weight per feature, or one scalar per fragment.
enum class GateMode { kVector, kScalar };

/// Node features fed to the semantic-relationship GCN.
enum class SemanticGcnInput { kProjected, kSpatial };

struct Ablations {
  bool no_spatial_graph = false;   // w/o VSG
  bool no_semantic_graph = false;  // w/o VSRG
  bool no_text_graph = false;      // w/o TG
  bool no_llii = false;            // w/o local-local interaction
  bool no_lgii = false;            // w/o local-global interaction

  bool any() const { return no_spatial_graph || no_semantic_graph || no_text_graph || no_llii || no_lgii; }
  std::string describe() const;
  friend bool operator==(const Ablations&, const Ablations&) = default;
};

/// Parses a comma-separated list of {none, no-vsg, no-vsrg, no-tg, no-llii, no-lgii}.
Ablations parse_ablations(const std::string& list);

struct ModelConfig {
  int visual_dim = kDefaultVisualDim;
  int text_dim = kDefaultTextDim;
  int embed_dim = 1024;
  double lambda = 9.0;
  GraphHyperparams graph{};
  int rounds = 2;
  Direction direction = Direction::kImageToText;
  GateMode gate_mode = GateMode::kVector;
  SemanticGcnInput semantic_input = SemanticGcnInput::kProjected;
  bool normalize_adjacency = false;
  Ablations ablations{};

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string to_string(Direction d);
Direction parse_direction(const std::string& s);
std::string to_string(GateMode m);
GateMode parse_gate_mode(const std::string& s);
std::string to_string(SemanticGcnInput s);
SemanticGcnInput parse_semantic_input(const std::string& s);

/// Weights of one local-local interaction round.
struct FusionParams {
  Parameter w1, b1, w2, b2, w3, b3;
};

struct ModelParams {
  Parameter visual_weight, visual_bias;  // W^o and bias
  Parameter text_weight, text_bias;      // word projection and bias
  Parameter spatial_sim_a, spatial_sim_b, spatial_gcn, spatial_residual;
  Parameter semantic_gcn, semantic_residual, semantic_output;
  Parameter text_sim_a, text_sim_b, text_gcn, text_residual;
  std::vector<FusionParams> fusion;
  Parameter gate;

  /// Glorot-uniform weights, zero biases, deterministic in `seed`.
  static ModelParams initialize(const ModelConfig& config, std::uint64_t seed);

  /// Stable enumeration order; checkpoints and optimisers rely on it.
  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  Parameter* find(const std::string& name);
  std::size_t scalar_count() const;
  void zero_grad();
};

/// Prefix of a parameter name up to the first dot ("spatial", "fusion", ...).
std::string parameter_group(const std::string& name);

struct BoundFusion {
  Var w1, b1, w2, b2, w3, b3;
};

/// ModelParams recorded on one tape.
struct BoundParams {
  Var visual_weight, visual_bias, text_weight, text_bias;
  Var spatial_sim_a, spatial_sim_b, spatial_gcn, spatial_residual;
  Var semantic_gcn, semantic_residual, semantic_output;
  Var text_sim_a, text_sim_b, text_gcn, text_residual;
  std::vector<BoundFusion> fusion;
  Var gate;
};

BoundParams bind(Tape& tape, ModelParams& params);
/// Binds read-only views; gradients are not tracked.
BoundParams bind_frozen(Tape& tape, const ModelParams& params);

// ---- encoders --------------------------------------------------------------

/// raw W + b for every row.
Var project(const Var& raw, const Var& weight, const Var& bias);

struct VisualGcnWeights {
  Var spatial_gcn, spatial_residual, semantic_gcn, semantic_residual, semantic_output;
};

struct VisualEnhancement {
  Var spatial;  // V^s
  Var final;    // V^f
};

/// V^s = (A^s V W^s_g) W_r1 + V
/// V^f = ((A^v X W^v_g) W_r2 + V^s) W_r3 + V, X = V (default) or V^s.
/// An invalid (unbound) adjacency means the graph is ablated and its
/// convolution term is dropped.
VisualEnhancement encode_visual(const Var& projected, const Var& spatial_adjacency, const Var& semantic_adjacency,
                                const VisualGcnWeights& w, SemanticGcnInput input = SemanticGcnInput::kProjected);

/// T^f = (A^t T W^t_g) W_rt + T; an unbound adjacency yields T^f = T.
Var encode_textual(const Var& words, const Var& textual_adjacency, const Var& gcn, const Var& residual);

/// Column mean over rows (excluding masked rows when a mask is given).
Var global_pool(const Var& features);
Var global_pool(const Var& features, const std::vector<bool>& row_mask);

struct VisualEncoding {
  Var projected;  // V
  Var spatial;    // V^s
  Var final;      // V^f
  Var global;     // mean of V
  Var spatial_adjacency;  // unbound when ablated
  Var semantic_adjacency;
};

struct TextEncoding {
  Var projected;  // T
  Var final;      // T^f
  Var global;     // mean of T
  Var textual_adjacency;
};

VisualEncoding encode_image(Tape& tape, const BoundParams& p, const ImageBundle& image, const ModelConfig& config);
TextEncoding encode_sentence(Tape& tape, const BoundParams& p, const SentenceBundle& sentence,
                             const ModelConfig& config);

}  // namespace cmsei
