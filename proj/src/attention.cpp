#include "mivpg/attention.hpp"

#include <cmath>

namespace mivpg {

AttentionParams AttentionParams::init(std::size_t dim, std::size_t heads, Rng& rng,
                                      double stddev) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention: dim " + std::to_string(dim) +
                      " not divisible by heads " + std::to_string(heads));
  }
  AttentionParams p;
  p.num_heads = heads;
  p.W_q = Tensor::randn({dim, dim}, rng, stddev, 0.0, true);
  p.b_q = Tensor::zeros({1, dim}, true);
  p.W_k = Tensor::randn({dim, dim}, rng, stddev, 0.0, true);
  p.b_k = Tensor::zeros({1, dim}, true);
  p.W_v = Tensor::randn({dim, dim}, rng, stddev, 0.0, true);
  p.b_v = Tensor::zeros({1, dim}, true);
  p.W_o = Tensor::randn({dim, dim}, rng, stddev, 0.0, true);
  p.b_o = Tensor::zeros({1, dim}, true);
  return p;
}

void AttentionParams::register_into(ParamSet& set, const std::string& prefix) const {
  set.add(prefix + ".W_q", W_q);
  set.add(prefix + ".b_q", b_q);
  set.add(prefix + ".W_k", W_k);
  set.add(prefix + ".b_k", b_k);
  set.add(prefix + ".W_v", W_v);
  set.add(prefix + ".b_v", b_v);
  set.add(prefix + ".W_o", W_o);
  set.add(prefix + ".b_o", b_o);
}

namespace {

// Detached copy of softmax weights per head, stacked into {heads, R1, R2}.
AttentionMap stack_maps(const std::vector<TensorPtr>& softmaxes) {
  const std::size_t h = softmaxes.size();
  const std::size_t r1 = softmaxes[0]->rows();
  const std::size_t r2 = softmaxes[0]->cols();
  std::vector<double> values;
  values.reserve(h * r1 * r2);
  for (const auto& s : softmaxes)
    values.insert(values.end(), s->data.begin(), s->data.end());
  return AttentionMap{Tensor::from_values({h, r1, r2}, std::move(values))};
}

TensorPtr attention_core(Tape& tape, const TensorPtr& q, const TensorPtr& k,
                         const TensorPtr& v, TensorPtr* softmax_out) {
  if (k->rows() == 0) throw EmptyBagError("attention: no keys (empty bag)");
  if (q->cols() != k->cols()) {
    throw ShapeError("attention: Q " + shape_str(q->shape()) + " vs K " +
                     shape_str(k->shape()));
  }
  if (k->rows() != v->rows()) {
    throw ShapeError("attention: K " + shape_str(k->shape()) + " vs V " +
                     shape_str(v->shape()));
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q->cols()));
  auto scores = scale(tape, matmul(tape, q, transpose(tape, k)), inv_sqrt_d);
  auto weights = softmax_rows(tape, scores);
  if (softmax_out) *softmax_out = weights;
  return matmul(tape, weights, v);
}

}  // namespace

std::pair<TensorPtr, AttentionMap> scaled_dot_attention(Tape& tape, const TensorPtr& q,
                                                        const TensorPtr& k,
                                                        const TensorPtr& v) {
  TensorPtr weights;
  auto out = attention_core(tape, q, k, v, &weights);
  return {out, stack_maps({weights})};
}

std::pair<TensorPtr, AttentionMap> multi_head_attention(Tape& tape,
                                                        const AttentionParams& params,
                                                        const TensorPtr& q_in,
                                                        const TensorPtr& k_in,
                                                        const TensorPtr& v_in) {
  if (k_in->rows() == 0) throw EmptyBagError("attention: no keys (empty bag)");
  const std::size_t d = params.dim();
  const std::size_t h = params.num_heads;
  const std::size_t hd = d / h;

  auto q = add_row_broadcast(tape, matmul(tape, q_in, params.W_q), params.b_q);
  auto k = add_row_broadcast(tape, matmul(tape, k_in, params.W_k), params.b_k);
  auto v = add_row_broadcast(tape, matmul(tape, v_in, params.W_v), params.b_v);

  std::vector<TensorPtr> head_outs(h);
  std::vector<TensorPtr> head_maps(h);
  for (std::size_t i = 0; i < h; ++i) {
    auto qh = slice_cols(tape, q, i * hd, (i + 1) * hd);
    auto kh = slice_cols(tape, k, i * hd, (i + 1) * hd);
    auto vh = slice_cols(tape, v, i * hd, (i + 1) * hd);
    head_outs[i] = attention_core(tape, qh, kh, vh, &head_maps[i]);
  }
  auto merged = h == 1 ? head_outs[0] : concat_cols(tape, head_outs);
  auto out = add_row_broadcast(tape, matmul(tape, merged, params.W_o), params.b_o);
  return {out, stack_maps(head_maps)};
}

TensorPtr query_residual_cross_attention(Tape& tape, const TensorPtr& q,
                                         const TensorPtr& bag,
                                         const AttentionParams& params,
                                         AttentionMap* map_out) {
  if (bag->rows() == 0) throw EmptyBagError("cross-attention: empty bag");
  auto [attended, map] = multi_head_attention(tape, params, q, bag, bag);
  if (map_out) *map_out = map;
  return add(tape, q, attended);
}

}  // namespace mivpg
