#include "cmsei/model.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "cmsei/errors.hpp"

namespace cmsei {

std::string Ablations::describe() const {
  std::vector<std::string> parts;
  if (no_spatial_graph) parts.emplace_back("no-vsg");
  if (no_semantic_graph) parts.emplace_back("no-vsrg");
  if (no_text_graph) parts.emplace_back("no-tg");
  if (no_llii) parts.emplace_back("no-llii");
  if (no_lgii) parts.emplace_back("no-lgii");
  if (parts.empty()) return "none";
  std::string out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out += "," + parts[i];
  return out;
}

Ablations parse_ablations(const std::string& list) {
  Ablations a;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item == "none") continue;
    if (item == "no-vsg") {
      a.no_spatial_graph = true;
    } else if (item == "no-vsrg") {
      a.no_semantic_graph = true;
    } else if (item == "no-tg") {
      a.no_text_graph = true;
    } else if (item == "no-llii") {
      a.no_llii = true;
    } else if (item == "no-lgii") {
      a.no_lgii = true;
    } else {
      throw ContractError("unknown ablation '" + item + "'");
    }
  }
  return a;
}

void ModelConfig::validate() const {
  if (visual_dim <= 0 || text_dim <= 0 || embed_dim <= 0) throw ContractError("model dimensions must be positive");
  if (!(lambda > 0.0)) throw ContractError("lambda must be positive");
  graph.validate();
  if (rounds < 0) throw ContractError("rounds must be non-negative");
  if (rounds == 0 && !ablations.no_llii) throw ContractError("rounds must be >= 1 unless local-local interaction is disabled");
}

std::string to_string(Direction d) { return d == Direction::kImageToText ? "i2t" : "t2i"; }

Direction parse_direction(const std::string& s) {
  if (s == "i2t" || s == "I-T") return Direction::kImageToText;
  if (s == "t2i" || s == "T-I") return Direction::kTextToImage;
  throw ContractError("unknown direction '" + s + "' (expected i2t or t2i)");
}

std::string to_string(GateMode m) { return m == GateMode::kVector ? "vector" : "scalar"; }

GateMode parse_gate_mode(const std::string& s) {
  if (s == "vector") return GateMode::kVector;
  if (s == "scalar") return GateMode::kScalar;
  throw ContractError("unknown gate mode '" + s + "'");
}

std::string to_string(SemanticGcnInput s) { return s == SemanticGcnInput::kProjected ? "V" : "Vs"; }

SemanticGcnInput parse_semantic_input(const std::string& s) {
  if (s == "V") return SemanticGcnInput::kProjected;
  if (s == "Vs" || s == "V^s") return SemanticGcnInput::kSpatial;
  throw ContractError("unknown semantic GCN input '" + s + "' (expected V or Vs)");
}

// ---- parameters -------------------------------------------------------------

namespace {

Parameter glorot(std::mt19937_64& rng, std::string name, Eigen::Index fan_in, Eigen::Index fan_out) {
  const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Matrix w(fan_in, fan_out);
  for (Eigen::Index i = 0; i < fan_in; ++i) {
    for (Eigen::Index j = 0; j < fan_out; ++j) w(i, j) = u(rng);
  }
  return Parameter(std::move(name), std::move(w));
}

Parameter zero_bias(std::string name, Eigen::Index width) {
  return Parameter(std::move(name), Matrix::Zero(1, width));
}

template <typename Params, typename Out>
void enumerate(Params& p, Out& out) {
  for (auto* q : {&p.visual_weight, &p.visual_bias, &p.text_weight, &p.text_bias, &p.spatial_sim_a,
                  &p.spatial_sim_b, &p.spatial_gcn, &p.spatial_residual, &p.semantic_gcn, &p.semantic_residual,
                  &p.semantic_output, &p.text_sim_a, &p.text_sim_b, &p.text_gcn, &p.text_residual}) {
    out.push_back(q);
  }
  for (auto& f : p.fusion) {
    for (auto* q : {&f.w1, &f.b1, &f.w2, &f.b2, &f.w3, &f.b3}) out.push_back(q);
  }
  out.push_back(&p.gate);
}

}  // namespace

ModelParams ModelParams::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const Eigen::Index d = config.embed_dim;
  std::mt19937_64 rng(seed);
  ModelParams p;
  p.visual_weight = glorot(rng, "projection.visual_weight", config.visual_dim, d);
  p.visual_bias = zero_bias("projection.visual_bias", d);
  p.text_weight = glorot(rng, "projection.text_weight", config.text_dim, d);
  p.text_bias = zero_bias("projection.text_bias", d);
  p.spatial_sim_a = glorot(rng, "spatial.sim_a", d, d);
  p.spatial_sim_b = glorot(rng, "spatial.sim_b", d, d);
  p.spatial_gcn = glorot(rng, "spatial.gcn", d, d);
  p.spatial_residual = glorot(rng, "spatial.residual", d, d);
  p.semantic_gcn = glorot(rng, "semantic.gcn", d, d);
  p.semantic_residual = glorot(rng, "semantic.residual", d, d);
  p.semantic_output = glorot(rng, "semantic.output", d, d);
  p.text_sim_a = glorot(rng, "textual.sim_a", d, d);
  p.text_sim_b = glorot(rng, "textual.sim_b", d, d);
  p.text_gcn = glorot(rng, "textual.gcn", d, d);
  p.text_residual = glorot(rng, "textual.residual", d, d);
  for (int r = 0; r < config.rounds; ++r) {
    const std::string pre = "fusion." + std::to_string(r) + ".";
    FusionParams f;
    f.w1 = glorot(rng, pre + "w1", d, d);
    f.b1 = zero_bias(pre + "b1", d);
    f.w2 = glorot(rng, pre + "w2", d, d);
    f.b2 = zero_bias(pre + "b2", d);
    f.w3 = glorot(rng, pre + "w3", d, d);
    f.b3 = zero_bias(pre + "b3", d);
    p.fusion.push_back(std::move(f));
  }
  p.gate = glorot(rng, "gate.weight", d, d);
  return p;
}

std::vector<Parameter*> ModelParams::all() {
  std::vector<Parameter*> out;
  enumerate(*this, out);
  return out;
}

std::vector<const Parameter*> ModelParams::all() const {
  std::vector<const Parameter*> out;
  enumerate(*this, out);
  return out;
}

Parameter* ModelParams::find(const std::string& name) {
  for (Parameter* p : all()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const Parameter* p : all()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void ModelParams::zero_grad() {
  for (Parameter* p : all()) p->zero_grad();
}

std::string parameter_group(const std::string& name) { return name.substr(0, name.find('.')); }

BoundParams bind(Tape& tape, ModelParams& p) {
  BoundParams b;
  b.visual_weight = tape.param(p.visual_weight);
  b.visual_bias = tape.param(p.visual_bias);
  b.text_weight = tape.param(p.text_weight);
  b.text_bias = tape.param(p.text_bias);
  b.spatial_sim_a = tape.param(p.spatial_sim_a);
  b.spatial_sim_b = tape.param(p.spatial_sim_b);
  b.spatial_gcn = tape.param(p.spatial_gcn);
  b.spatial_residual = tape.param(p.spatial_residual);
  b.semantic_gcn = tape.param(p.semantic_gcn);
  b.semantic_residual = tape.param(p.semantic_residual);
  b.semantic_output = tape.param(p.semantic_output);
  b.text_sim_a = tape.param(p.text_sim_a);
  b.text_sim_b = tape.param(p.text_sim_b);
  b.text_gcn = tape.param(p.text_gcn);
  b.text_residual = tape.param(p.text_residual);
  for (auto& f : p.fusion) {
    b.fusion.push_back({tape.param(f.w1), tape.param(f.b1), tape.param(f.w2), tape.param(f.b2), tape.param(f.w3),
                        tape.param(f.b3)});
  }
  b.gate = tape.param(p.gate);
  return b;
}

BoundParams bind_frozen(Tape& tape, const ModelParams& p) {
  BoundParams b;
  auto v = [&tape](const Parameter& q) { return tape.view(q.value); };
  b.visual_weight = v(p.visual_weight);
  b.visual_bias = v(p.visual_bias);
  b.text_weight = v(p.text_weight);
  b.text_bias = v(p.text_bias);
  b.spatial_sim_a = v(p.spatial_sim_a);
  b.spatial_sim_b = v(p.spatial_sim_b);
  b.spatial_gcn = v(p.spatial_gcn);
  b.spatial_residual = v(p.spatial_residual);
  b.semantic_gcn = v(p.semantic_gcn);
  b.semantic_residual = v(p.semantic_residual);
  b.semantic_output = v(p.semantic_output);
  b.text_sim_a = v(p.text_sim_a);
  b.text_sim_b = v(p.text_sim_b);
  b.text_gcn = v(p.text_gcn);
  b.text_residual = v(p.text_residual);
  for (const auto& f : p.fusion) b.fusion.push_back({v(f.w1), v(f.b1), v(f.w2), v(f.b2), v(f.w3), v(f.b3)});
  b.gate = v(p.gate);
  return b;
}

// ---- encoders -----------------------------------------------------------------

Var project(const Var& raw, const Var& weight, const Var& bias) {
  if (raw.cols() != weight.rows()) {
    throw DimensionError("project: features are " + shape_string(raw.value()) + " but weight is " +
                         shape_string(weight.value()));
  }
  return add_row(matmul(raw, weight), bias);
}

namespace {

void require_square(const char* op, const Var& a, Eigen::Index n) {
  if (a.rows() != n || a.cols() != n) {
    throw DimensionError(std::string(op) + ": adjacency is " + shape_string(a.value()) + ", expected " +
                         std::to_string(n) + "x" + std::to_string(n));
  }
}

}  // namespace

VisualEnhancement encode_visual(const Var& projected, const Var& spatial_adjacency, const Var& semantic_adjacency,
                                const VisualGcnWeights& w, SemanticGcnInput input) {
  const Eigen::Index k = projected.rows();
  VisualEnhancement out;
  if (spatial_adjacency.valid()) {
    require_square("encode_visual", spatial_adjacency, k);
    const Var conv = matmul(matmul(spatial_adjacency, projected), w.spatial_gcn);
    out.spatial = add(matmul(conv, w.spatial_residual), projected);
  } else {
    out.spatial = projected;
  }
  Var inner = out.spatial;
  if (semantic_adjacency.valid()) {
    require_square("encode_visual", semantic_adjacency, k);
    const Var nodes = input == SemanticGcnInput::kProjected ? projected : out.spatial;
    const Var conv = matmul(matmul(semantic_adjacency, nodes), w.semantic_gcn);
    inner = add(matmul(conv, w.semantic_residual), out.spatial);
  }
  out.final = add(matmul(inner, w.semantic_output), projected);
  return out;
}

Var encode_textual(const Var& words, const Var& textual_adjacency, const Var& gcn, const Var& residual) {
  if (!textual_adjacency.valid()) return words;
  require_square("encode_textual", textual_adjacency, words.rows());
  const Var conv = matmul(matmul(textual_adjacency, words), gcn);
  return add(matmul(conv, residual), words);
}

Var global_pool(const Var& features) {
  if (features.rows() == 0) throw ContractError("global_pool: no rows");
  return mean_rows(features);
}

Var global_pool(const Var& features, const std::vector<bool>& row_mask) {
  if (features.rows() == 0) throw ContractError("global_pool: no rows");
  return mean_rows(features, row_mask);
}

VisualEncoding encode_image(Tape& tape, const BoundParams& p, const ImageBundle& image, const ModelConfig& config) {
  VisualEncoding e;
  e.projected = project(tape.constant(image.region_features), p.visual_weight, p.visual_bias);
  if (!config.ablations.no_spatial_graph) {
    e.spatial_adjacency = build_spatial_graph(e.projected, image.boxes, config.graph, p.spatial_sim_a, p.spatial_sim_b);
    if (config.normalize_adjacency) e.spatial_adjacency = symmetric_normalize(e.spatial_adjacency);
  }
  if (!config.ablations.no_semantic_graph) {
    e.semantic_adjacency = tape.constant(build_semantic_graph(image.scene_edges, image.regions()).weights);
    if (config.normalize_adjacency) e.semantic_adjacency = symmetric_normalize(e.semantic_adjacency);
  }
  const VisualGcnWeights w{p.spatial_gcn, p.spatial_residual, p.semantic_gcn, p.semantic_residual,
                           p.semantic_output};
  const VisualEnhancement enh = encode_visual(e.projected, e.spatial_adjacency, e.semantic_adjacency, w,
                                              config.semantic_input);
  e.spatial = enh.spatial;
  e.final = enh.final;
  e.global = global_pool(e.projected);
  return e;
}

TextEncoding encode_sentence(Tape& tape, const BoundParams& p, const SentenceBundle& sentence,
                             const ModelConfig& config) {
  TextEncoding e;
  e.projected = project(tape.constant(sentence.word_features), p.text_weight, p.text_bias);
  if (!config.ablations.no_text_graph) {
    e.textual_adjacency = build_textual_graph(e.projected, p.text_sim_a, p.text_sim_b);
    if (config.normalize_adjacency) e.textual_adjacency = symmetric_normalize(e.textual_adjacency);
  }
  e.final = encode_textual(e.projected, e.textual_adjacency, p.text_gcn, p.text_residual);
  e.global = global_pool(e.projected);
  return e;
}

}  // namespace cmsei
