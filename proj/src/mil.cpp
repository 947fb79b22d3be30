#include "mivpg/mil.hpp"

namespace mivpg {

PoolingSpec PoolingSpec::mean_pool() { return PoolingSpec{PoolKind::mean, nullptr, nullptr, 0}; }

PoolingSpec PoolingSpec::max_pool() { return PoolingSpec{PoolKind::max, nullptr, nullptr, 0}; }

PoolingSpec PoolingSpec::cls_select(std::size_t index) {
  return PoolingSpec{PoolKind::cls_select, nullptr, nullptr, index};
}

PoolingSpec PoolingSpec::attention_pool(std::size_t attn_width, std::size_t dim, Rng& rng,
                                        double stddev) {
  PoolingSpec spec;
  spec.kind = PoolKind::ab_mil;
  spec.w = Tensor::randn({attn_width, 1}, rng, stddev, 0.0, true);
  spec.u = Tensor::randn({attn_width, dim}, rng, stddev, 0.0, true);
  return spec;
}

void PoolingSpec::register_into(ParamSet& set, const std::string& prefix) const {
  if (w) set.add(prefix + ".w", w);
  if (u) set.add(prefix + ".u", u);
}

TensorPtr ab_mil_weights(Tape& tape, const PoolingSpec& spec, const TensorPtr& bag) {
  if (spec.kind != PoolKind::ab_mil || !spec.w || !spec.u) {
    throw ConfigError("ab_mil_weights: spec is not attention pooling");
  }
  if (bag->rows() == 0) throw EmptyBagError("ab_mil_weights: empty bag");
  if (spec.u->cols() != bag->cols()) {
    throw ConfigError("ab_mil_weights: u " + shape_str(spec.u->shape()) +
                      " does not match instances " + shape_str(bag->shape()));
  }
  const std::size_t m = bag->rows();
  // scores_i = w^T tanh(u x_i^T), computed for all rows at once.
  auto hidden = tanh_elem(tape, matmul(tape, bag, transpose(tape, spec.u)));
  auto scores = matmul(tape, hidden, spec.w);                       // {m, 1}
  auto alpha = softmax_rows(tape, transpose(tape, scores));         // {1, m}
  return reshape(tape, alpha, {m});
}

BagEmbedding pool_bag(Tape& tape, const PoolingSpec& spec, const TensorPtr& bag) {
  if (bag->rows() == 0) throw EmptyBagError("pool_bag: empty bag");
  const std::size_t m = bag->rows();
  switch (spec.kind) {
    case PoolKind::mean: {
      auto pooled = mean_rows(tape, bag);
      auto weights = Tensor::full({m}, 1.0 / static_cast<double>(m));
      return {pooled, weights};
    }
    case PoolKind::max:
      return {max_rows(tape, bag), nullptr};
    case PoolKind::cls_select: {
      if (spec.cls_index >= m) {
        throw IndexError("pool_bag: cls index " + std::to_string(spec.cls_index) +
                         " out of range for " + shape_str(bag->shape()));
      }
      auto pooled = slice_rows(tape, bag, spec.cls_index, spec.cls_index + 1);
      auto weights = Tensor::zeros({m});
      weights->data[spec.cls_index] = 1.0;
      return {pooled, weights};
    }
    case PoolKind::ab_mil: {
      auto alpha = ab_mil_weights(tape, spec, bag);
      auto pooled = matmul(tape, reshape(tape, alpha, {1, m}), bag);
      return {pooled, alpha};
    }
  }
  throw ConfigError("pool_bag: unknown pooling kind");
}

TensorPtr perm_equivalence_layer(Tape& tape, const TensorPtr& x, const PoolingSpec& pool,
                                 double lambda, double gamma, Activation activation) {
  auto pooled = pool_bag(tape, pool, x).vector;
  auto mixed = add_row_broadcast(tape, scale(tape, x, lambda), scale(tape, pooled, gamma));
  switch (activation) {
    case Activation::identity: return mixed;
    case Activation::tanh: return tanh_elem(tape, mixed);
    case Activation::gelu: return gelu(tape, mixed);
  }
  throw ConfigError("perm_equivalence_layer: unknown activation");
}

}  // namespace mivpg
