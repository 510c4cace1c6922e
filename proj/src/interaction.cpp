#include "cmsei/interaction.hpp"

#include "cmsei/errors.hpp"

namespace cmsei {

Var attention_weights(const Var& queries, const Var& context, double lambda) {
  if (context.rows() == 0) throw ContractError("attention: empty context");
  if (queries.cols() != context.cols()) {
    throw DimensionError("attention: query width " + std::to_string(queries.cols()) + " vs context width " +
                         std::to_string(context.cols()));
  }
  const Var sims = matmul(l2_normalize_rows(queries), transpose(l2_normalize_rows(context)));
  return smoothed_softmax_rows(sims, lambda);
}

Var local_local_round(const Var& queries, const Var& context, double lambda, const BoundFusion& w) {
  const Var alpha = attention_weights(queries, context, lambda);
  const Var attended = matmul(alpha, context);
  const Var modulated = hadamard(queries, tanh(add_row(matmul(attended, w.w2), w.b2)));
  const Var fused = add(modulated, add_row(matmul(attended, w.w3), w.b3));
  return add(relu(add_row(matmul(fused, w.w1), w.b1)), queries);
}

Var local_global_gate(const Var& attended, const Var& context_global, const Var& projected, const Var& gate_weight,
                      GateMode mode) {
  if (projected.rows() != attended.rows() || projected.cols() != attended.cols()) {
    throw DimensionError("local_global_gate: projected features " + shape_string(projected.value()) +
                         " vs attended " + shape_string(attended.value()));
  }
  const Var logits = mul_row(matmul(attended, gate_weight), context_global);
  Var gated;
  if (mode == GateMode::kVector) {
    gated = hadamard(sigmoid(logits), attended);
  } else {
    gated = mul_col(attended, sigmoid(sum_cols(logits)));
  }
  return add(add(gated, attended), relu(projected));
}

Var pair_score(const Var& final_features, const Var& context_global, ZeroNormPolicy policy) {
  const Var pooled = l2_normalize_rows(global_pool(final_features));
  return cosine(pooled, context_global, policy);
}

Var refine(const BoundParams& p, const VisualEncoding& image, const TextEncoding& sentence, const ModelConfig& config) {
  const bool i2t = config.direction == Direction::kImageToText;
  Var query = i2t ? image.final : sentence.final;
  const Var context = i2t ? sentence.final : image.final;
  const Var query_projected = i2t ? image.projected : sentence.projected;
  const Var context_global = i2t ? sentence.global : image.global;

  if (!config.ablations.no_llii) {
    if (static_cast<int>(p.fusion.size()) < config.rounds) {
      throw ContractError("refine: model has " + std::to_string(p.fusion.size()) + " fusion rounds, config wants " +
                          std::to_string(config.rounds));
    }
    for (int r = 0; r < config.rounds; ++r) query = local_local_round(query, context, config.lambda, p.fusion[r]);
  }
  if (!config.ablations.no_lgii) {
    query = local_global_gate(query, context_global, query_projected, p.gate, config.gate_mode);
  }
  return query;
}

Var score_pair(const BoundParams& p, const VisualEncoding& image, const TextEncoding& sentence,
               const ModelConfig& config) {
  const Var context_global = config.direction == Direction::kImageToText ? sentence.global : image.global;
  return pair_score(refine(p, image, sentence, config), context_global);
}

}  // namespace cmsei
