#pragma once

// Cross-modal refinement and pair scoring.
//
// Every routine is written for a generic (query, context) pair of modalities.
// Image-to-text uses objects as queries and words as context; text-to-image
// swaps the roles.

#include "cmsei/autodiff.hpp"
#include "cmsei/model.hpp"

namespace cmsei {

/// alpha = softmax_rows(lambda * cos(query_i, context_j)), queries x contexts.
Var attention_weights(const Var& queries, const Var& context, double lambda);

/// One local-local round:
///   q_i = sum_j alpha_ij c_j
///   out_i = ReLU((x_i .* tanh(q_i W2 + b2) + q_i W3 + b3) W1 + b1) + x_i
Var local_local_round(const Var& queries, const Var& context, double lambda, const BoundFusion& w);

/// r_i = sigmoid((x_i Wr) .* g)         (vector mode; scalar mode sums the product)
/// out_i = r_i .* x_i + x_i + ReLU(p_i)  where p is the projected input feature.
Var local_global_gate(const Var& attended, const Var& context_global, const Var& projected, const Var& gate_weight,
                      GateMode mode = GateMode::kVector);

/// cos(normalize(mean_i x_i), g).
Var pair_score(const Var& final_features, const Var& context_global, ZeroNormPolicy policy = ZeroNormPolicy::kZero);

/// Refined fragments of the query modality for one image/sentence pair.
Var refine(const BoundParams& p, const VisualEncoding& image, const TextEncoding& sentence, const ModelConfig& config);

/// Full interaction + score for one pair in the configured direction.
Var score_pair(const BoundParams& p, const VisualEncoding& image, const TextEncoding& sentence,
               const ModelConfig& config);

}  // namespace cmsei
