#pragma once

#include <string>

#include "mivpg/params.hpp"
#include "mivpg/tensor.hpp"

namespace mivpg {

enum class PoolKind { mean, max, cls_select, ab_mil };

enum class Activation { identity, tanh, gelu };

// Which instance aggregator to use. The attention variant scores each
// instance as w^T tanh(u x^T) and softmax-normalizes across the bag.
struct PoolingSpec {
  PoolKind kind = PoolKind::mean;
  TensorPtr w;              // {attn_width, 1}, attention pooling only
  TensorPtr u;              // {attn_width, dim}, attention pooling only
  std::size_t cls_index = 0;

  static PoolingSpec mean_pool();
  static PoolingSpec max_pool();
  static PoolingSpec cls_select(std::size_t index = 0);
  static PoolingSpec attention_pool(std::size_t attn_width, std::size_t dim, Rng& rng,
                                    double stddev = 0.02);
  void register_into(ParamSet& set, const std::string& prefix) const;
};

// One pooled row plus the normalized instance weights that produced it
// (absent for max pooling, where no weighting exists).
struct BagEmbedding {
  TensorPtr vector;    // {1, dim}
  TensorPtr weights;   // {m} or nullptr
};

// Normalized attention-pooling weights over the bag rows; shape {m}.
TensorPtr ab_mil_weights(Tape& tape, const PoolingSpec& spec, const TensorPtr& bag);

BagEmbedding pool_bag(Tape& tape, const PoolingSpec& spec, const TensorPtr& bag);

// Row i of the output is activation(lambda * x_i + gamma * pooled).
TensorPtr perm_equivalence_layer(Tape& tape, const TensorPtr& x, const PoolingSpec& pool,
                                 double lambda, double gamma, Activation activation);

}  // namespace mivpg
