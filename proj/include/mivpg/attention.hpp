#pragma once

#include <string>
#include <utility>

#include "mivpg/params.hpp"
#include "mivpg/tensor.hpp"

namespace mivpg {

// Row-stochastic attention weights, shape {heads, R1, R2}. Detached values,
// kept for diagnostics and export.
struct AttentionMap {
  TensorPtr weights;
  std::size_t heads() const { return weights->shape()[0]; }
  std::size_t queries() const { return weights->shape()[1]; }
  std::size_t keys() const { return weights->shape()[2]; }
  double at(std::size_t h, std::size_t i, std::size_t j) const {
    const auto& s = weights->shape();
    return weights->data[(h * s[1] + i) * s[2] + j];
  }
};

// Four square projections with biases plus the head count. dim must divide
// evenly into heads; violations fail here, never at call time.
struct AttentionParams {
  std::size_t num_heads = 1;
  TensorPtr W_q, b_q, W_k, b_k, W_v, b_v, W_o, b_o;

  static AttentionParams init(std::size_t dim, std::size_t heads, Rng& rng,
                              double stddev = 0.02);
  std::size_t dim() const { return W_q->rows(); }
  void register_into(ParamSet& set, const std::string& prefix) const;
};

// softmax(Q K^T / sqrt(D)) V on raw matrices; also returns the map.
std::pair<TensorPtr, AttentionMap> scaled_dot_attention(Tape& tape, const TensorPtr& q,
                                                        const TensorPtr& k,
                                                        const TensorPtr& v);

// Projected multi-head attention: heads run on split channels, outputs are
// concatenated and projected by W_o.
std::pair<TensorPtr, AttentionMap> multi_head_attention(Tape& tape,
                                                        const AttentionParams& params,
                                                        const TensorPtr& q_in,
                                                        const TensorPtr& k_in,
                                                        const TensorPtr& v_in);

// q + MHA(q, bag, bag); invariant to the bag's row order.
TensorPtr query_residual_cross_attention(Tape& tape, const TensorPtr& q,
                                         const TensorPtr& bag,
                                         const AttentionParams& params,
                                         AttentionMap* map_out = nullptr);

}  // namespace mivpg
