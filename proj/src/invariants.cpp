#include "mivpg/invariants.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

namespace mivpg {

TensorPtr permute_rows_copy(const TensorPtr& t, const std::vector<std::size_t>& perm) {
  const std::size_t m = t->rows(), n = t->cols();
  if (perm.size() != m) {
    throw ContractError("permute_rows_copy: permutation size " +
                        std::to_string(perm.size()) + " vs " + shape_str(t->shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = t->data[perm[i] * n + j];
  }
  return Tensor::from_values({m, n}, std::move(out));
}

double max_abs_diff(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape() != b->shape()) return 1e300;
  double mx = 0.0;
  for (std::size_t i = 0; i < a->size(); ++i) {
    mx = std::max(mx, std::abs(a->data[i] - b->data[i]));
  }
  return mx;
}

namespace {

Bag random_bag(int scenario, std::size_t d_in, Rng& rng) {
  const auto group = [&](std::size_t p) {
    return Tensor::randn({p, d_in}, rng);
  };
  if (scenario == 1) {
    return Bag::flat_bag(group(3 + rng.next_below(6)));
  }
  const std::size_t n = 2 + rng.next_below(4);
  std::vector<TensorPtr> groups;
  for (std::size_t i = 0; i < n; ++i) {
    groups.push_back(group(scenario == 2 ? 1 : 2 + rng.next_below(4)));
  }
  return Bag::hierarchical(std::move(groups));
}

Bag permute_images(const Bag& bag, const std::vector<std::size_t>& perm) {
  std::vector<TensorPtr> groups(bag.groups.size());
  for (std::size_t i = 0; i < perm.size(); ++i) groups[i] = bag.groups[perm[i]];
  return Bag::hierarchical(std::move(groups));
}

Bag permute_patches(const Bag& bag, std::size_t image, const std::vector<std::size_t>& perm) {
  std::vector<TensorPtr> groups = bag.groups;
  groups[image] = permute_rows_copy(groups[image], perm);
  return bag.flat ? Bag::flat_bag(groups[0]) : Bag::hierarchical(std::move(groups));
}

struct Cell {
  int scenario;
  bool use_csa;
  bool use_ppeg;
  std::uint64_t seed;
};

}  // namespace

SuiteReport run_invariant_suite(const SuiteOptions& options) {
  SuiteReport report;

  std::vector<Cell> cells;
  for (int scenario = 1; scenario <= 3; ++scenario) {
    for (int csa = 0; csa <= 1; ++csa) {
      for (int pe = 0; pe <= 1; ++pe) {
        for (std::size_t s = 0; s < options.seeds_per_cell; ++s) {
          cells.push_back({scenario, csa == 1, pe == 1,
                           options.seed + s * 1000 + scenario * 100 +
                               static_cast<std::uint64_t>(csa) * 10 +
                               static_cast<std::uint64_t>(pe)});
        }
      }
    }
  }

  for (const auto& cell : cells) {
    Rng rng(cell.seed);
    MivpgConfig config;
    config.num_blocks = 2 + rng.next_below(2);
    config.num_queries = 3 + rng.next_below(4);
    config.heads = 1 + rng.next_below(2);
    config.model_dim = config.heads * (8 + rng.next_below(8));
    config.cross_attn_every = 1 + rng.next_below(2);
    config.use_csa = cell.use_csa;
    config.use_ppeg = cell.use_ppeg;
    config.instance_dim = 4 + rng.next_below(8);
    config.abmil_width = 8;
    auto params = init_params(config, rng);
    Bag bag = random_bag(cell.scenario, config.instance_dim, rng);

    Tape tape;
    tape.enabled = false;
    auto [base_q, base_diag] = mivpg_forward(tape, bag, config, params);

    const auto emit = [&](const std::string& name, double metric, const std::string& st) {
      report.rows.push_back({cell.scenario, cell.use_csa, cell.use_ppeg, cell.seed, name,
                             metric, st});
    };

    // 1. permutation invariance of the final query embeddings
    {
      double worst = 0.0;
      bool applicable = true;
      if (!cell.use_ppeg) {
        for (std::size_t t = 0; t < options.permutations; ++t) {
          Bag permuted = bag;
          if (bag.flat) {
            permuted = permute_patches(bag, 0, rng.permutation(bag.groups[0]->rows()));
          } else if (t % 2 == 0) {
            permuted = permute_images(bag, rng.permutation(bag.groups.size()));
          } else {
            const std::size_t img = rng.next_below(bag.groups.size());
            permuted = permute_patches(bag, img, rng.permutation(bag.groups[img]->rows()));
          }
          auto q = mivpg_forward(tape, permuted, config, params).first;
          worst = std::max(worst, max_abs_diff(base_q, q));
        }
      } else if (cell.scenario == 3) {
        // positional encoding acts on image rows; patch order within an
        // image must still not matter
        for (std::size_t t = 0; t < options.permutations; ++t) {
          const std::size_t img = rng.next_below(bag.groups.size());
          Bag permuted = permute_patches(bag, img, rng.permutation(bag.groups[img]->rows()));
          auto q = mivpg_forward(tape, permuted, config, params).first;
          worst = std::max(worst, max_abs_diff(base_q, q));
        }
      } else {
        applicable = false;
      }
      if (!applicable) emit("perm_invariance", 0.0, "skip");
      else emit("perm_invariance", worst, worst < options.tolerance ? "pass" : "fail");
    }

    // 2. correlation update equivariance
    if (cell.use_csa) {
      double worst = 0.0;
      for (std::size_t t = 0; t < 5; ++t) {
        auto b = Tensor::randn({4 + rng.next_below(4), config.model_dim}, rng);
        auto q = Tensor::randn({config.num_queries, config.model_dim}, rng);
        auto perm = rng.permutation(b->rows());
        auto direct = csa_update(tape, permute_rows_copy(b, perm), q, *params.blocks[0].csa);
        auto mapped = permute_rows_copy(csa_update(tape, b, q, *params.blocks[0].csa), perm);
        worst = std::max(worst, max_abs_diff(direct, mapped));
      }
      emit("csa_equivariance", worst, worst < options.tolerance ? "pass" : "fail");
    } else {
      emit("csa_equivariance", 0.0, "skip");
    }

    // 3. attention maps are row-stochastic
    {
      double worst = 0.0;
      for (const auto& map : base_diag.cross_maps) {
        for (std::size_t h = 0; h < map.heads(); ++h) {
          for (std::size_t i = 0; i < map.queries(); ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < map.keys(); ++j) {
              const double w = map.at(h, i, j);
              if (w < 0.0 || w > 1.0) worst = std::max(worst, 1.0);
              sum += w;
            }
            worst = std::max(worst, std::abs(sum - 1.0));
          }
        }
      }
      emit("map_row_stochastic", worst, worst < options.tolerance ? "pass" : "fail");
    }

    // 4. positional encoding must react to token order
    if (cell.use_ppeg) {
      const std::size_t m = base_diag.bag_rows;
      double best = 0.0;
      bool changed = false;
      for (std::size_t t = 0; t < 5 && !changed; ++t) {
        Bag permuted = bag;
        if (bag.flat) {
          auto perm = rng.permutation(m);
          bool identity = true;
          for (std::size_t i = 0; i < m; ++i) identity = identity && perm[i] == i;
          if (identity) continue;
          permuted = permute_patches(bag, 0, perm);
        } else {
          if (bag.groups.size() < 2) break;
          auto perm = rng.permutation(bag.groups.size());
          bool identity = true;
          for (std::size_t i = 0; i < perm.size(); ++i) identity = identity && perm[i] == i;
          if (identity) continue;
          permuted = permute_images(bag, perm);
        }
        auto q = mivpg_forward(tape, permuted, config, params).first;
        const double diff = max_abs_diff(base_q, q);
        best = std::max(best, diff);
        changed = diff > 1e-6;
      }
      emit("ppeg_sensitivity", best, changed ? "pass" : "fail");
    } else {
      emit("ppeg_sensitivity", 0.0, "skip");
    }
  }

  return report;
}

void write_suite_csv(const SuiteReport& report, std::ostream& out) {
  out << "scenario,use_csa,use_ppeg,seed,invariant,metric,status\n";
  char buf[40];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%.3e", r.metric);
    out << r.scenario << "," << (r.use_csa ? 1 : 0) << "," << (r.use_ppeg ? 1 : 0) << ","
        << r.seed << "," << r.invariant << "," << buf << "," << r.status << "\n";
  }
}

}  // namespace mivpg
