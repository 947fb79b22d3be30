#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "grad_check.hpp"
#include "reference.hpp"

#include "mivpg/attention.hpp"
#include "mivpg/invariants.hpp"

using namespace mivpg;

namespace {

TensorPtr make(Shape shape, std::vector<double> v, bool rg = false) {
  return Tensor::from_values(std::move(shape), std::move(v), rg);
}

// identity projections, zero biases: MHA reduces to the bare attention core
AttentionParams identity_params(std::size_t d, std::size_t heads = 1) {
  Rng rng(1);
  auto p = AttentionParams::init(d, heads, rng);
  const auto eye = [d] {
    auto t = Tensor::zeros({d, d}, true);
    for (std::size_t i = 0; i < d; ++i) t->at(i, i) = 1.0;
    return t;
  };
  p.W_q = eye();
  p.W_k = eye();
  p.W_v = eye();
  p.W_o = eye();
  return p;
}

}  // namespace

TEST_CASE("single key: output equals V exactly") {
  Tape tape;
  auto q = make({3, 2}, {0.3, -2.0, 5.0, 1.0, 0.0, 0.0});
  auto k = make({1, 2}, {0.7, 0.1});
  auto v = make({1, 2}, {4.0, -3.0});
  auto [out, map] = scaled_dot_attention(tape, q, k, v);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(out->at(i, 0) == 4.0);
    CHECK(out->at(i, 1) == -3.0);
    CHECK(map.at(0, i, 0) == 1.0);
  }
}

TEST_CASE("identical keys: output is the mean of V rows") {
  Tape tape;
  auto q = make({1, 2}, {1.0, 2.0});
  auto k = make({3, 2}, {0.5, -0.5, 0.5, -0.5, 0.5, -0.5});
  auto v = make({3, 2}, {3.0, 0.0, 0.0, 3.0, 3.0, 3.0});
  auto out = scaled_dot_attention(tape, q, k, v).first;
  CHECK(out->at(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(out->at(0, 1) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("basis case matches the scalar softmax-attention oracle") {
  Tape tape;
  auto q = make({1, 2}, {1, 0});
  auto k = make({2, 2}, {1, 0, 0, 1});
  auto v = make({2, 2}, {1, 0, 0, 1});
  auto [out, map] = scaled_dot_attention(tape, q, k, v);
  auto expect = ref::attention(ref::from_tensor(q), ref::from_tensor(k),
                               ref::from_tensor(v), 2);
  CHECK(ref::max_abs_diff(expect, out) < 1e-12);
  CHECK(out->at(0, 0) == doctest::Approx(0.6698).epsilon(1e-4));
  CHECK(out->at(0, 1) == doctest::Approx(0.3302).epsilon(1e-4));
  CHECK(map.at(0, 0, 0) + map.at(0, 0, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("empty key set raises the empty-bag error") {
  Tape tape;
  auto q = make({2, 2}, {1, 0, 0, 1});
  auto k = Tensor::zeros({0, 2});
  auto v = Tensor::zeros({0, 2});
  CHECK_THROWS_AS(scaled_dot_attention(tape, q, k, v), EmptyBagError);
  Rng rng(1);
  auto params = AttentionParams::init(2, 1, rng);
  CHECK_THROWS_AS(multi_head_attention(tape, params, q, k, v), EmptyBagError);
}

TEST_CASE("head count must divide the dimension at construction") {
  Rng rng(1);
  CHECK_THROWS_AS(AttentionParams::init(6, 4, rng), ConfigError);
  CHECK_NOTHROW(AttentionParams::init(6, 3, rng));
}

TEST_CASE("single-head MHA equals scaled_dot_attention on projected inputs") {
  Rng rng(21);
  auto params = AttentionParams::init(4, 1, rng);
  auto q_in = Tensor::randn({3, 4}, rng);
  auto kv_in = Tensor::randn({5, 4}, rng);
  Tape tape;
  auto out = multi_head_attention(tape, params, q_in, kv_in, kv_in).first;

  auto q = add_row_broadcast(tape, matmul(tape, q_in, params.W_q), params.b_q);
  auto k = add_row_broadcast(tape, matmul(tape, kv_in, params.W_k), params.b_k);
  auto v = add_row_broadcast(tape, matmul(tape, kv_in, params.W_v), params.b_v);
  auto core = scaled_dot_attention(tape, q, k, v).first;
  auto expect = add_row_broadcast(tape, matmul(tape, core, params.W_o), params.b_o);
  CHECK(max_abs_diff(out, expect) < 1e-12);
}

TEST_CASE("two heads match the per-head brute-force oracle") {
  Rng rng(22);
  auto params = AttentionParams::init(4, 2, rng);
  // nonzero biases so the oracle exercises them too
  for (auto& b : {params.b_q, params.b_k, params.b_v, params.b_o}) {
    for (auto& x : b->data) x = rng.normal(0.0, 0.1);
  }
  auto q_in = Tensor::randn({3, 4}, rng);
  auto kv_in = Tensor::randn({5, 4}, rng);
  Tape tape;
  auto out = multi_head_attention(tape, params, q_in, kv_in, kv_in).first;
  auto expect = ref::multi_head_attention(params, ref::from_tensor(q_in),
                                          ref::from_tensor(kv_in), ref::from_tensor(kv_in));
  CHECK(ref::max_abs_diff(expect, out) < 1e-12);
}

TEST_CASE("key-order invariance over 50 random trials") {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t heads = 1 + rng.next_below(2);
    const std::size_t d = heads * (2 + rng.next_below(3));
    auto params = AttentionParams::init(d, heads, rng);
    auto q_in = Tensor::randn({2 + rng.next_below(3), d}, rng);
    auto kv = Tensor::randn({2 + rng.next_below(5), d}, rng);
    auto perm = rng.permutation(kv->rows());
    auto kv_perm = permute_rows_copy(kv, perm);

    Tape tape;
    tape.enabled = false;
    auto base = multi_head_attention(tape, params, q_in, kv, kv).first;
    auto shuffled = multi_head_attention(tape, params, q_in, kv_perm, kv_perm).first;
    CHECK(max_abs_diff(base, shuffled) < 1e-9);
  }
}

TEST_CASE("query-order equivariance: rows permute with the queries") {
  Rng rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    auto params = AttentionParams::init(4, 2, rng);
    auto q_in = Tensor::randn({5, 4}, rng);
    auto kv = Tensor::randn({3, 4}, rng);
    auto perm = rng.permutation(5);

    Tape tape;
    tape.enabled = false;
    auto base = multi_head_attention(tape, params, q_in, kv, kv).first;
    auto permuted = multi_head_attention(tape, params, permute_rows_copy(q_in, perm), kv, kv).first;
    CHECK(max_abs_diff(permuted, permute_rows_copy(base, perm)) < 1e-9);
  }
}

TEST_CASE("attention map is row-stochastic") {
  Rng rng(25);
  auto params = AttentionParams::init(6, 3, rng);
  auto q_in = Tensor::randn({4, 6}, rng);
  auto kv = Tensor::randn({7, 6}, rng);
  Tape tape;
  auto map = multi_head_attention(tape, params, q_in, kv, kv).second;
  for (std::size_t h = 0; h < map.heads(); ++h) {
    for (std::size_t i = 0; i < map.queries(); ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < map.keys(); ++j) {
        const double w = map.at(h, i, j);
        CHECK(w >= 0.0);
        CHECK(w <= 1.0);
        sum += w;
      }
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("attention parameter gradients match finite differences") {
  Rng rng(26);
  auto params = AttentionParams::init(4, 2, rng);
  auto q_in = Tensor::randn({3, 4}, rng);
  auto kv = Tensor::randn({4, 4}, rng);
  auto readout = Tensor::randn({3, 4}, rng);

  const std::vector<TensorPtr> tensors = {params.W_q, params.b_q, params.W_k, params.b_k,
                                          params.W_v, params.b_v, params.W_o, params.b_o};
  const auto loss_value = [&] {
    Tape tape;
    tape.enabled = false;
    auto out = multi_head_attention(tape, params, q_in, kv, kv).first;
    return sum_all(tape, mul_elem(tape, out, readout))->data[0];
  };

  Tape tape;
  auto out = multi_head_attention(tape, params, q_in, kv, kv).first;
  auto loss = sum_all(tape, mul_elem(tape, out, readout));
  for (const auto& t : tensors) t->zero_grad();
  tape.backward_from(loss);
  CHECK(gradcheck::max_rel_error(tensors, loss_value) < 1e-6);
}

TEST_CASE("query residual: zero value path returns q unchanged") {
  Rng rng(27);
  auto params = identity_params(3);
  for (auto& x : params.W_v->data) x = 0.0;
  for (auto& x : params.W_o->data) x = 0.0;
  auto q = Tensor::randn({2, 3}, rng);
  auto bag = Tensor::zeros({1, 3});
  Tape tape;
  auto out = query_residual_cross_attention(tape, q, bag, params);
  CHECK(max_abs_diff(out, q) == 0.0);
}

TEST_CASE("query residual is invariant to bag row shuffles") {
  Rng rng(28);
  auto params = AttentionParams::init(4, 2, rng);
  auto q = Tensor::randn({3, 4}, rng);
  auto bag = Tensor::randn({6, 4}, rng);
  Tape tape;
  tape.enabled = false;
  auto base = query_residual_cross_attention(tape, q, bag, params);
  for (int trial = 0; trial < 10; ++trial) {
    auto shuffled = permute_rows_copy(bag, rng.permutation(6));
    auto out = query_residual_cross_attention(tape, q, shuffled, params);
    CHECK(max_abs_diff(base, out) < 1e-9);
  }

  auto empty = Tensor::zeros({0, 4});
  CHECK_THROWS_AS(query_residual_cross_attention(tape, q, empty, params), EmptyBagError);
}

TEST_CASE("query residual matches the composition oracle") {
  Rng rng(29);
  auto params = AttentionParams::init(2, 1, rng);
  auto q = Tensor::randn({2, 2}, rng);
  auto bag = Tensor::randn({3, 2}, rng);
  Tape tape;
  auto out = query_residual_cross_attention(tape, q, bag, params);

  auto attended = ref::multi_head_attention(params, ref::from_tensor(q),
                                            ref::from_tensor(bag), ref::from_tensor(bag));
  auto expect = ref::add(ref::from_tensor(q), attended);
  CHECK(ref::max_abs_diff(expect, out) < 1e-12);
}
