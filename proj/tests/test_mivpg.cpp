#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "grad_check.hpp"
#include "reference.hpp"

#include "mivpg/invariants.hpp"
#include "mivpg/mivpg.hpp"

using namespace mivpg;

namespace {

MivpgConfig tiny_config() {
  MivpgConfig c;
  c.num_blocks = 2;
  c.num_queries = 3;
  c.model_dim = 8;
  c.heads = 2;
  c.cross_attn_every = 2;
  c.ffn_hidden = 16;
  c.instance_dim = 5;
  c.abmil_width = 4;
  c.ppeg_kernels = {3};
  return c;
}

Bag random_hier_bag(Rng& rng, std::size_t n, std::size_t d,
                    std::size_t p_lo = 2, std::size_t p_hi = 4) {
  std::vector<TensorPtr> groups;
  for (std::size_t i = 0; i < n; ++i) {
    groups.push_back(Tensor::randn({p_lo + rng.next_below(p_hi - p_lo + 1), d}, rng));
  }
  return Bag::hierarchical(std::move(groups));
}

// scalar-loop mirror of one block, composed from the reference primitives
struct RefBlockOut {
  ref::Mat q;
  ref::Mat bag;
};

RefBlockOut ref_block(const BlockParams& bp, const MivpgConfig& cfg, std::size_t index,
                      const ref::Mat& q, const ref::Mat& bag) {
  auto q1 = ref::layer_norm(ref::add(q, ref::multi_head_attention(bp.self_attn, q, q, q)));
  ref::Mat bag2 = bag;
  if (cfg.use_csa && bp.csa) {
    const ref::Mat& kv = cfg.csa_use_current_queries ? q1 : q;
    bag2 = ref::layer_norm(ref::add(bag, ref::multi_head_attention(*bp.csa, bag, kv, kv)));
  }
  ref::Mat q2 = q1;
  if (cfg.block_has_cross(index) && bp.cross_attn) {
    q2 = ref::layer_norm(
        ref::add(q1, ref::multi_head_attention(*bp.cross_attn, q1, bag2, bag2)));
  }
  auto hidden = ref::gelu(ref::linear(q2, ref::from_tensor(bp.ffn.W1), ref::from_tensor(bp.ffn.b1)));
  auto ffn = ref::linear(hidden, ref::from_tensor(bp.ffn.W2), ref::from_tensor(bp.ffn.b2));
  auto q3 = ref::layer_norm(ref::add(q2, ffn));
  return {q3, bag2};
}

AttentionParams identity_attention(std::size_t d) {
  Rng rng(1);
  auto p = AttentionParams::init(d, 1, rng);
  for (auto& x : p.W_q->data) x = 0.0;
  for (auto& x : p.W_k->data) x = 0.0;
  for (auto& x : p.W_v->data) x = 0.0;
  for (auto& x : p.W_o->data) x = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    p.W_q->at(i, i) = 1.0;
    p.W_k->at(i, i) = 1.0;
    p.W_v->at(i, i) = 1.0;
    p.W_o->at(i, i) = 1.0;
  }
  return p;
}

}  // namespace

TEST_CASE("init_queries: shape, determinism, and sample spread") {
  MivpgConfig c;
  c.num_queries = 100;
  c.model_dim = 100;
  Rng r1(7), r2(7);
  auto q1 = init_queries(c, r1);
  auto q2 = init_queries(c, r2);
  CHECK(q1->shape() == Shape{100, 100});
  CHECK(q1->data == q2->data);   // bit-identical for the same seed

  double mean = 0.0;
  for (double v : q1->data) mean += v;
  mean /= 1e4;
  double var = 0.0;
  for (double v : q1->data) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / 1e4);
  CHECK(sd > 0.018);
  CHECK(sd < 0.022);
}

TEST_CASE("ppeg with zero kernels is exactly the identity") {
  Rng rng(11);
  for (std::size_t m : {1u, 4u, 7u, 16u, 37u}) {
    auto tokens = Tensor::randn({m, 6}, rng);
    PpegParams params;
    params.kernel_sizes = {3, 5};
    params.kernels = {Tensor::zeros({6, 3, 3}, true), Tensor::zeros({6, 5, 5}, true)};
    Tape tape;
    auto out = ppeg(tape, tokens, params);
    CHECK(out->shape() == tokens->shape());
    CHECK(out->data == tokens->data);   // bit-exact identity path
  }
}

TEST_CASE("ppeg on a single token applies only the center taps") {
  Rng rng(12);
  auto token = Tensor::randn({1, 4}, rng);
  PpegParams params = PpegParams::init({3, 5}, 4, rng, 0.5);
  Tape tape;
  auto out = ppeg(tape, token, params);
  for (std::size_t c = 0; c < 4; ++c) {
    double taps = 0.0;
    taps += params.kernels[0]->data[c * 9 + 4];    // center of the 3x3
    taps += params.kernels[1]->data[c * 25 + 12];  // center of the 5x5
    CHECK(out->data[c] == doctest::Approx(token->data[c] * (1.0 + taps)).epsilon(1e-12));
  }
}

TEST_CASE("ppeg on four tokens matches the direct convolution loop") {
  Rng rng(13);
  auto tokens = Tensor::randn({4, 3}, rng);
  PpegParams params = PpegParams::init({3}, 3, rng, 0.7);
  Tape tape;
  auto out = ppeg(tape, tokens, params);

  // 4 tokens fill a 2x2 grid exactly; same-padding 3x3 convolution by hand
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = tokens->data[(y * 2 + x) * 3 + c];
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy > 1 || xx < 0 || xx > 1) continue;
            acc += tokens->data[(yy * 2 + xx) * 3 + c] *
                   params.kernels[0]->data[c * 9 + (dy + 1) * 3 + (dx + 1)];
          }
        CHECK(out->data[(y * 2 + x) * 3 + c] == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("ppeg padding repeats the leading tokens") {
  // 3 tokens pad to a 2x2 grid whose last cell repeats token 0; with a
  // one-hot east-neighbor kernel, output(1,0) picks up that repeated token.
  auto tokens = Tensor::from_values({3, 1}, {10.0, 20.0, 30.0});
  PpegParams params;
  params.kernel_sizes = {3};
  params.kernels = {Tensor::zeros({1, 3, 3}, true)};
  params.kernels[0]->data[1 * 3 + 2] = 1.0;   // tap at (dy=0, dx=+1)
  Tape tape;
  auto out = ppeg(tape, tokens, params);
  CHECK(out->data[0] == doctest::Approx(10.0 + 20.0));   // sees token 1
  CHECK(out->data[1] == doctest::Approx(20.0));          // east edge is zero padding
  CHECK(out->data[2] == doctest::Approx(30.0 + 10.0));   // sees the repeated token 0
}

TEST_CASE("csa update with a zeroed value path normalizes the residual only") {
  Rng rng(14);
  auto params = AttentionParams::init(6, 2, rng);
  for (auto& x : params.W_v->data) x = 0.0;
  for (auto& x : params.W_o->data) x = 0.0;
  auto bag = Tensor::randn({4, 6}, rng);
  auto queries = Tensor::randn({3, 6}, rng);
  Tape tape;
  auto out = csa_update(tape, bag, queries, params);
  auto expect = layer_norm(tape, bag);
  CHECK(max_abs_diff(out, expect) == 0.0);
}

TEST_CASE("csa update is permutation-equivariant") {
  Rng rng(15);
  auto params = AttentionParams::init(8, 2, rng);
  Tape tape;
  tape.enabled = false;
  for (int trial = 0; trial < 25; ++trial) {
    auto bag = Tensor::randn({3 + rng.next_below(5), 8}, rng);
    auto queries = Tensor::randn({2 + rng.next_below(4), 8}, rng);
    auto perm = rng.permutation(bag->rows());
    auto direct = csa_update(tape, permute_rows_copy(bag, perm), queries, params);
    auto mapped = permute_rows_copy(csa_update(tape, bag, queries, params), perm);
    CHECK(max_abs_diff(direct, mapped) < 1e-9);
  }
}

TEST_CASE("csa update with one query adds the same vector to every row") {
  Rng rng(16);
  auto params = AttentionParams::init(6, 2, rng);
  auto bag = Tensor::randn({5, 6}, rng);
  auto query = Tensor::randn({1, 6}, rng);
  Tape tape;
  auto out = csa_update(tape, bag, query, params);

  // with a single key the attention weight is 1 for every bag row, so the
  // update is the projected value row, identical everywhere
  auto update = ref::multi_head_attention(params, ref::from_tensor(query),
                                          ref::from_tensor(query), ref::from_tensor(query));
  ref::Mat shifted = ref::from_tensor(bag);
  for (std::size_t i = 0; i < shifted.r; ++i)
    for (std::size_t j = 0; j < shifted.c; ++j) shifted.at(i, j) += update.at(0, j);
  auto expect = ref::layer_norm(shifted);
  CHECK(ref::max_abs_diff(expect, out) < 1e-12);
}

TEST_CASE("low-rank attention approximates full self-attention on separated rows") {
  const std::size_t d = 4;
  auto id1 = identity_attention(d);
  auto id2 = identity_attention(d);
  auto bag = Tensor::zeros({3, d});
  bag->at(0, 0) = 40.0;
  bag->at(1, 1) = 40.0;
  bag->at(2, 2) = 40.0;
  Tape tape;
  auto out = low_rank_self_attention(tape, bag, bag, id1, id2);
  auto full = ref::attention(ref::from_tensor(bag), ref::from_tensor(bag),
                             ref::from_tensor(bag), d);
  CHECK(ref::max_abs_diff(full, out) < 1e-9);
}

TEST_CASE("low-rank attention is equivariant in the bag rows") {
  Rng rng(17);
  auto s1 = AttentionParams::init(6, 2, rng);
  auto s2 = AttentionParams::init(6, 2, rng);
  auto probe = Tensor::randn({2, 6}, rng);
  Tape tape;
  tape.enabled = false;
  for (int trial = 0; trial < 20; ++trial) {
    auto bag = Tensor::randn({5, 6}, rng);
    auto perm = rng.permutation(5);
    auto direct = low_rank_self_attention(tape, permute_rows_copy(bag, perm), probe, s1, s2);
    auto mapped = permute_rows_copy(low_rank_self_attention(tape, bag, probe, s1, s2), perm);
    CHECK(max_abs_diff(direct, mapped) < 1e-9);
  }
}

TEST_CASE("low-rank attention on a single instance matches the composition oracle") {
  Rng rng(18);
  auto s1 = AttentionParams::init(4, 1, rng);
  auto s2 = AttentionParams::init(4, 1, rng);
  auto bag = Tensor::randn({1, 4}, rng);
  auto probe = Tensor::randn({3, 4}, rng);
  Tape tape;
  auto out = low_rank_self_attention(tape, bag, probe, s1, s2);

  auto summary = ref::multi_head_attention(s1, ref::from_tensor(probe),
                                           ref::from_tensor(bag), ref::from_tensor(bag));
  ref::Mat sm(summary.r, summary.c);
  sm.v = summary.v;
  auto expect = ref::multi_head_attention(s2, ref::from_tensor(bag), sm, sm);
  CHECK(ref::max_abs_diff(expect, out) < 1e-12);
}

TEST_CASE("block without correlation or cross-attention passes the bag through") {
  auto config = tiny_config();
  config.use_csa = false;
  Rng rng(19);
  auto params = init_params(config, rng);
  auto q = Tensor::randn({config.num_queries, config.model_dim}, rng);
  auto bag = Tensor::randn({4, config.model_dim}, rng);
  Tape tape;
  // block 1 has no cross-attention under cross_attn_every = 2
  auto out = mivpg_block(tape, {q, bag}, 1, config, params.blocks[1]);
  CHECK(out.bag.get() == bag.get());   // same tensor, untouched
}

TEST_CASE("query output ignores bag row order inside a block") {
  auto config = tiny_config();
  Rng rng(20);
  auto params = init_params(config, rng);
  auto q = Tensor::randn({config.num_queries, config.model_dim}, rng);
  auto bag = Tensor::randn({5, config.model_dim}, rng);
  Tape tape;
  tape.enabled = false;
  auto base = mivpg_block(tape, {q, bag}, 0, config, params.blocks[0]);
  for (int trial = 0; trial < 10; ++trial) {
    auto perm = rng.permutation(5);
    auto out = mivpg_block(tape, {q, permute_rows_copy(bag, perm)}, 0, config,
                           params.blocks[0]);
    CHECK(max_abs_diff(base.q, out.q) < 1e-9);
  }
}

TEST_CASE("single block matches the fully unrolled scalar oracle") {
  for (bool current_queries : {false, true}) {
    auto config = tiny_config();
    config.csa_use_current_queries = current_queries;
    Rng rng(21);
    auto params = init_params(config, rng);
    auto q = Tensor::randn({config.num_queries, config.model_dim}, rng);
    auto bag = Tensor::randn({4, config.model_dim}, rng);
    Tape tape;
    auto out = mivpg_block(tape, {q, bag}, 0, config, params.blocks[0]);
    auto expect = ref_block(params.blocks[0], config, 0, ref::from_tensor(q),
                            ref::from_tensor(bag));
    CHECK(ref::max_abs_diff(expect.q, out.q) < 1e-11);
    CHECK(ref::max_abs_diff(expect.bag, out.bag) < 1e-11);
  }
}

TEST_CASE("forward on a singleton bag emits all-ones attention columns") {
  auto config = tiny_config();
  Rng rng(22);
  auto params = init_params(config, rng);
  auto bag = Bag::hierarchical({Tensor::randn({1, config.instance_dim}, rng)});
  Tape tape;
  auto [q, diag] = mivpg_forward(tape, bag, config, params);
  CHECK(q->shape() == Shape{config.num_queries, config.model_dim});
  CHECK(!diag.cross_maps.empty());
  for (const auto& map : diag.cross_maps) {
    CHECK(map.keys() == 1);
    for (std::size_t h = 0; h < map.heads(); ++h)
      for (std::size_t i = 0; i < map.queries(); ++i)
        CHECK(map.at(h, i, 0) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("identical patches give uniform per-image pooling weights") {
  auto config = tiny_config();
  Rng rng(23);
  auto params = init_params(config, rng);
  Tape tape;
  // every image holds copies of a single (per-image) patch
  std::vector<TensorPtr> groups;
  const std::vector<std::size_t> patches{3, 2, 4};
  for (std::size_t p : patches) {
    auto row = Tensor::randn({1, config.instance_dim}, rng);
    groups.push_back(concat_rows(tape, std::vector<TensorPtr>(p, row)));
  }
  auto diag = mivpg_forward(tape, Bag::hierarchical(groups), config, params).second;
  REQUIRE(diag.image_alphas.size() == patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    REQUIRE(diag.image_alphas[i].size() == patches[i]);
    for (double a : diag.image_alphas[i]) {
      CHECK(a == doctest::Approx(1.0 / static_cast<double>(patches[i])).epsilon(1e-9));
    }
  }
}

TEST_CASE("hierarchical forward matches the pooling + block composition oracle") {
  auto config = tiny_config();
  Rng rng(24);
  auto params = init_params(config, rng);
  auto bag = random_hier_bag(rng, 2, config.instance_dim, 3, 3);
  Tape tape;
  auto [q, diag] = mivpg_forward(tape, bag, config, params);

  // oracle: attention-pool each image, project, then run the blocks
  ref::Mat rows(bag.groups.size(), config.instance_dim);
  for (std::size_t i = 0; i < bag.groups.size(); ++i) {
    auto group = ref::from_tensor(bag.groups[i]);
    auto alpha = ref::abmil_alpha(group, ref::from_tensor(params.image_pool.u),
                                  ref::from_tensor(params.image_pool.w));
    for (std::size_t j = 0; j < group.c; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < group.r; ++r) s += alpha[r] * group.at(r, j);
      rows.at(i, j) = s;
    }
    for (std::size_t r = 0; r < group.r; ++r)
      CHECK(diag.image_alphas[i][r] == doctest::Approx(alpha[r]).epsilon(1e-12));
  }
  auto x = ref::linear(rows, ref::from_tensor(params.in_proj_W),
                       ref::from_tensor(params.in_proj_b));
  ref::Mat rq = ref::from_tensor(params.queries);
  for (std::size_t l = 0; l < config.num_blocks; ++l) {
    auto out = ref_block(params.blocks[l], config, l, rq, x);
    rq = out.q;
    x = out.bag;
  }
  CHECK(ref::max_abs_diff(rq, q) < 1e-10);
}

TEST_CASE("flatten baseline on one image equals the flat forward") {
  auto config = tiny_config();
  Rng rng(25);
  auto params = init_params(config, rng);
  auto patches = Tensor::randn({5, config.instance_dim}, rng);
  Tape tape;
  tape.enabled = false;
  auto flat_q = mivpg_forward(tape, Bag::flat_bag(patches), config, params).first;
  auto flattened = flatten_baseline_forward(tape, Bag::hierarchical({patches}), config,
                                            params);
  CHECK(max_abs_diff(flat_q, flattened) == 0.0);
}

TEST_CASE("flatten baseline ignores the order of flattened rows") {
  auto config = tiny_config();
  Rng rng(26);
  auto params = init_params(config, rng);
  auto bag = random_hier_bag(rng, 3, config.instance_dim);
  Tape tape;
  tape.enabled = false;
  auto base = flatten_baseline_forward(tape, bag, config, params);

  auto all = concat_rows(tape, bag.groups);
  for (int trial = 0; trial < 10; ++trial) {
    auto shuffled = permute_rows_copy(all, rng.permutation(all->rows()));
    auto out = flatten_baseline_forward(
        tape, Bag::hierarchical({shuffled}), config, params);
    CHECK(max_abs_diff(base, out) < 1e-9);
  }
}

TEST_CASE("duplicated patches inflate flattened attention but not image pooling") {
  auto config = tiny_config();
  config.num_blocks = 2;
  Rng rng(27);
  auto params = init_params(config, rng);

  const std::size_t n = 4, p = 3;
  std::vector<TensorPtr> groups;
  for (std::size_t i = 0; i < n; ++i)
    groups.push_back(Tensor::randn({p, config.instance_dim}, rng));
  auto bag = Bag::hierarchical(groups);

  // triple image 0's patches
  Tape tape;
  tape.enabled = false;
  std::vector<TensorPtr> tripled_groups = groups;
  tripled_groups[0] = concat_rows(tape, {groups[0], groups[0], groups[0]});
  auto tripled = Bag::hierarchical(tripled_groups);

  const auto flattened_share = [&](const Bag& b, std::size_t rows0) {
    ForwardDiagnostics diag;
    flatten_baseline_forward(tape, b, config, params, &diag);
    double image0 = 0.0, total = 0.0;
    for (const auto& map : diag.cross_maps) {
      for (std::size_t h = 0; h < map.heads(); ++h)
        for (std::size_t i = 0; i < map.queries(); ++i)
          for (std::size_t j = 0; j < map.keys(); ++j) {
            const double w = map.at(h, i, j);
            total += w;
            if (j < rows0) image0 += w;
          }
    }
    return image0 / total;
  };
  const auto image_share = [&](const Bag& b) {
    auto diag = mivpg_forward(tape, b, config, params).second;
    double image0 = 0.0, total = 0.0;
    for (const auto& map : diag.cross_maps) {
      for (std::size_t h = 0; h < map.heads(); ++h)
        for (std::size_t i = 0; i < map.queries(); ++i)
          for (std::size_t j = 0; j < map.keys(); ++j) {
            const double w = map.at(h, i, j);
            total += w;
            if (j == 0) image0 += w;
          }
    }
    return image0 / total;
  };

  const double flat_before = flattened_share(bag, p);
  const double flat_after = flattened_share(tripled, 3 * p);
  const double hier_before = image_share(bag);
  const double hier_after = image_share(tripled);

  CHECK((flat_after - flat_before) / flat_before > 0.5);
  CHECK(std::abs(hier_after - hier_before) / hier_before < 0.10);
  // tripling identical patches renormalizes to the same pooled embedding
  CHECK(std::abs(hier_after - hier_before) < 1e-9);
}

TEST_CASE("final queries are invariant to every bag reordering when ppeg is off") {
  Rng rng(28);
  for (int trial = 0; trial < 6; ++trial) {
    auto config = tiny_config();
    config.use_csa = trial % 2 == 0;
    config.num_blocks = 2 + trial % 2;
    auto params = init_params(config, rng);
    Tape tape;
    tape.enabled = false;

    // flat bag: exhaustive over all 24 orderings of 4 instances
    auto flat = Tensor::randn({4, config.instance_dim}, rng);
    auto base = mivpg_forward(tape, Bag::flat_bag(flat), config, params).first;
    std::vector<std::size_t> perm{0, 1, 2, 3};
    do {
      auto q = mivpg_forward(tape, Bag::flat_bag(permute_rows_copy(flat, perm)), config,
                             params).first;
      CHECK(max_abs_diff(base, q) < 1e-9);
    } while (std::next_permutation(perm.begin(), perm.end()));

    // hierarchical bag: image order and patch order within an image
    auto bag = random_hier_bag(rng, 3, config.instance_dim);
    auto hier_base = mivpg_forward(tape, bag, config, params).first;
    for (int t = 0; t < 10; ++t) {
      std::vector<TensorPtr> groups = bag.groups;
      auto gperm = rng.permutation(groups.size());
      std::vector<TensorPtr> shuffled(groups.size());
      for (std::size_t i = 0; i < groups.size(); ++i) {
        shuffled[i] = permute_rows_copy(groups[gperm[i]],
                                        rng.permutation(groups[gperm[i]]->rows()));
      }
      auto q = mivpg_forward(tape, Bag::hierarchical(shuffled), config, params).first;
      CHECK(max_abs_diff(hier_base, q) < 1e-9);
    }
  }
}

TEST_CASE("ppeg breaks flat-bag permutation invariance with nonzero kernels") {
  auto config = tiny_config();
  config.use_ppeg = true;
  Rng rng(29);
  auto params = init_params(config, rng);
  auto flat = Tensor::randn({9, config.instance_dim}, rng);
  Tape tape;
  tape.enabled = false;
  auto base = mivpg_forward(tape, Bag::flat_bag(flat), config, params).first;
  std::size_t changed = 0, tried = 0;
  for (int t = 0; t < 30; ++t) {
    auto perm = rng.permutation(9);
    bool identity = true;
    for (std::size_t i = 0; i < 9; ++i) identity = identity && perm[i] == i;
    if (identity) continue;
    ++tried;
    auto q = mivpg_forward(tape, Bag::flat_bag(permute_rows_copy(flat, perm)), config,
                           params).first;
    if (max_abs_diff(base, q) > 1e-6) ++changed;
  }
  CHECK(changed == tried);
}

TEST_CASE("csa update cost counts linearly in the bag size") {
  auto config = tiny_config();
  const std::size_t d = config.model_dim;
  Rng rng(30);
  auto params = AttentionParams::init(d, config.heads, rng);
  auto queries = Tensor::randn({config.num_queries, d}, rng);
  const std::size_t r = config.num_queries;

  const auto measure = [&](std::size_t m) {
    auto bag = Tensor::randn({m, d}, rng);
    Tape tape;
    tape.enabled = false;
    reset_mac_count();
    csa_update(tape, bag, queries, params);
    return mac_count();
  };
  const auto closed_form = [&](std::size_t m) {
    return 2 * (m + r) * d * d + 2 * m * r * d;
  };

  for (std::size_t m : {16u, 32u, 48u, 64u}) CHECK(measure(m) == closed_form(m));
  // affine in m: equal first differences over equal steps
  CHECK(measure(64) - measure(48) == measure(32) - measure(16));

  // reference sizes: m=1024 instances, 32 queries, width 64
  {
    Rng big_rng(99);
    auto big_params = AttentionParams::init(64, 4, big_rng);
    auto big_queries = Tensor::randn({32, 64}, big_rng);
    auto big_bag = Tensor::randn({1024, 64}, big_rng);
    Tape tape;
    tape.enabled = false;
    reset_mac_count();
    csa_update(tape, big_bag, big_queries, big_params);
    CHECK(mac_count() == 2 * (1024 + 32) * 64 * 64 + 2 * 1024 * 32 * 64);
    CHECK(mac_count() == 12845056u);
  }

  // full pairwise self-attention for contrast: quadratic growth
  const auto full_sa = [&](std::size_t m) {
    auto bag = Tensor::randn({m, d}, rng);
    Tape tape;
    tape.enabled = false;
    reset_mac_count();
    multi_head_attention(tape, params, bag, bag, bag);
    return mac_count();
  };
  const auto d1 = full_sa(32) - full_sa(16);
  const auto d2 = full_sa(48) - full_sa(32);
  const auto d3 = full_sa(64) - full_sa(48);
  CHECK(d2 > d1);                  // superlinear over equal steps
  CHECK(d3 - d2 == d2 - d1);       // constant second difference of a quadratic
  CHECK(d3 > d2);
  reset_mac_count();
}

TEST_CASE("two-block model gradients match finite differences end to end") {
  auto config = tiny_config();
  config.use_ppeg = true;
  Rng rng(31);
  auto params = init_params(config, rng);
  // redraw at a healthy scale: near-zero init keeps the early softmax-path
  // gradients below what central differences can resolve at float64
  for (auto& [name, tensor] : params.registry.items) {
    for (auto& v : tensor->data) v = rng.normal(0.0, 0.3);
  }
  auto bag = random_hier_bag(rng, 3, config.instance_dim, 2, 3);
  auto readout = Tensor::randn({config.num_queries, config.model_dim}, rng);

  const auto loss_value = [&] {
    Tape tape;
    tape.enabled = false;
    auto q = mivpg_forward(tape, bag, config, params).first;
    return sum_all(tape, mul_elem(tape, q, readout))->data[0];
  };

  Tape tape;
  auto q = mivpg_forward(tape, bag, config, params).first;
  auto loss = sum_all(tape, mul_elem(tape, q, readout));
  params.registry.zero_grads();
  tape.backward_from(loss);

  double worst = 0.0;
  for (const auto& [name, tensor] : params.registry.items) {
    const auto res = gradcheck::check_tensor(name, tensor, loss_value);
    INFO(name);
    CHECK(res.rel_error < 1e-5);
    worst = std::max(worst, res.rel_error);
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("config json: defaults, round trip, unknown keys, validation") {
  auto c = config_from_json("{}");
  CHECK(c.num_blocks == 12);
  CHECK(c.num_queries == 32);
  CHECK(c.cross_attn_every == 2);
  CHECK(c.ppeg_kernels == std::vector<std::size_t>{3, 5, 7});

  auto c2 = config_from_json(
      R"({"num_blocks": 4, "num_queries": 8, "model_dim": 32, "heads": 4,
          "use_csa": false, "ppeg_kernels": [3]})");
  CHECK(c2.num_blocks == 4);
  CHECK(!c2.use_csa);
  auto c3 = config_from_json(config_to_json(c2));
  CHECK(config_to_json(c3) == config_to_json(c2));
  CHECK(c3.digest() == c2.digest());
  CHECK(c3.digest() != config_from_json("{}").digest());

  CHECK_THROWS_AS(config_from_json(R"({"num_block": 4})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"model_dim": 10, "heads": 4})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"ppeg_kernels": [4]})"), ConfigError);
  CHECK_THROWS_AS(config_from_json("not json"), ConfigError);
}

TEST_CASE("parameter snapshots round-trip exactly") {
  auto config = tiny_config();
  config.use_ppeg = true;
  Rng rng(32);
  auto params = init_params(config, rng);
  const std::string path = "test_params_roundtrip.txt";
  save_params(params.registry, path);

  Rng rng2(99);
  auto restored = init_params(config, rng2, PoolKind::ab_mil);
  load_params(restored.registry, path);
  for (std::size_t i = 0; i < params.registry.items.size(); ++i) {
    CHECK(params.registry.items[i].first == restored.registry.items[i].first);
    CHECK(params.registry.items[i].second->data == restored.registry.items[i].second->data);
  }

  // mismatched architectures are rejected
  auto other_config = tiny_config();
  other_config.num_blocks = 1;
  Rng rng3(5);
  auto other = init_params(other_config, rng3);
  CHECK_THROWS_AS(load_params(other.registry, path), ConfigError);
  std::filesystem::remove(path);
}

TEST_CASE("empty bags are rejected everywhere") {
  auto config = tiny_config();
  Rng rng(33);
  auto params = init_params(config, rng);
  Tape tape;
  CHECK_THROWS_AS(Bag::flat_bag(Tensor::zeros({0, 5})), EmptyBagError);
  CHECK_THROWS_AS(Bag::hierarchical({}), EmptyBagError);
  CHECK_THROWS_AS(Bag::hierarchical({Tensor::zeros({0, 5})}), EmptyBagError);
}
