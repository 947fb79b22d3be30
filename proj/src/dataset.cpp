#include "mivpg/dataset.hpp"

#include <cmath>

namespace mivpg {

namespace {

double dist2(const double* a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// One background instance around the image offset, resampled until it stays
// clear of the witness.
std::vector<double> background_instance(Rng& rng, const std::vector<double>& witness,
                                        double epsilon, const std::vector<double>& offset) {
  const std::size_t d = witness.size();
  std::vector<double> x(d);
  for (int tries = 0; tries < 64; ++tries) {
    for (std::size_t i = 0; i < d; ++i) x[i] = offset[i] + rng.normal();
    if (dist2(x.data(), witness) > epsilon * epsilon) return x;
  }
  throw GenerationError("task: cannot sample instances away from the witness; "
                        "epsilon too large for the instance distribution");
}

// A point within epsilon of the witness; exactly the witness when epsilon = 0.
std::vector<double> witness_instance(Rng& rng, const std::vector<double>& witness,
                                     double epsilon) {
  std::vector<double> x = witness;
  if (epsilon <= 0.0) return x;
  const std::size_t d = witness.size();
  std::vector<double> dir(d);
  double norm2 = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    dir[i] = rng.normal();
    norm2 += dir[i] * dir[i];
  }
  const double norm = std::sqrt(norm2);
  // radius below epsilon with a margin so the membership test is unambiguous
  const double radius = 0.9 * epsilon * rng.uniform();
  if (norm > 0.0) {
    for (std::size_t i = 0; i < d; ++i) x[i] += dir[i] / norm * radius;
  }
  return x;
}

TensorPtr make_group(Rng& rng, const std::vector<double>& witness, double epsilon,
                     double offset_scale, std::size_t patches, std::ptrdiff_t witness_at) {
  const std::size_t d = witness.size();
  std::vector<double> offset(d, 0.0);
  if (offset_scale > 0.0) {
    for (auto& v : offset) v = rng.normal(0.0, offset_scale);
  }
  std::vector<double> values;
  values.reserve(patches * d);
  for (std::size_t p = 0; p < patches; ++p) {
    const auto inst = (static_cast<std::ptrdiff_t>(p) == witness_at)
                          ? witness_instance(rng, witness, epsilon)
                          : background_instance(rng, witness, epsilon, offset);
    values.insert(values.end(), inst.begin(), inst.end());
  }
  return Tensor::from_values({patches, d}, std::move(values));
}

std::size_t draw_size(Rng& rng, std::size_t lo, std::size_t hi) {
  if (hi < lo) throw GenerationError("task: bag size range is empty");
  return lo + static_cast<std::size_t>(rng.next_below(hi - lo + 1));
}

}  // namespace

bool bag_contains_witness(const Bag& bag, const std::vector<double>& witness,
                          double epsilon) {
  for (const auto& g : bag.groups) {
    for (std::size_t r = 0; r < g->rows(); ++r) {
      if (std::sqrt(dist2(&g->data[r * g->cols()], witness)) <= epsilon) return true;
    }
  }
  return false;
}

Dataset generate_task(const SyntheticTaskSpec& spec) {
  if (spec.scenario < 1 || spec.scenario > 3) {
    throw ConfigError("task: scenario must be 1, 2, or 3");
  }
  if (spec.num_bags == 0) throw GenerationError("task: num_bags must be >= 1");
  Rng rng(spec.seed);

  Dataset ds;
  ds.spec = spec;
  ds.witness.resize(spec.instance_dim);
  double norm2 = 0.0;
  for (auto& v : ds.witness) {
    v = rng.normal();
    norm2 += v * v;
  }
  const double norm = std::sqrt(norm2);
  for (auto& v : ds.witness) v = v / norm * spec.witness_scale;

  // Draw labels until the balance constraint holds.
  std::vector<int> labels(spec.num_bags);
  bool balanced = false;
  for (int attempt = 0; attempt < 100 && !balanced; ++attempt) {
    std::size_t positives = 0;
    for (auto& l : labels) {
      l = rng.uniform() < 0.5 ? 0 : 1;
      positives += static_cast<std::size_t>(l);
    }
    const double frac = static_cast<double>(positives) / static_cast<double>(spec.num_bags);
    balanced = frac >= 0.4 && frac <= 0.6;
  }
  if (!balanced) {
    throw GenerationError("task: could not reach class balance in [0.4, 0.6] after "
                          "bounded resampling");
  }

  for (std::size_t b = 0; b < spec.num_bags; ++b) {
    const bool positive = labels[b] == 1;
    Bag bag;
    if (spec.scenario == 1) {
      const std::size_t m = draw_size(rng, spec.min_patches, spec.max_patches);
      const std::ptrdiff_t at =
          positive ? static_cast<std::ptrdiff_t>(rng.next_below(m)) : -1;
      bag = Bag::flat_bag(
          make_group(rng, ds.witness, spec.epsilon, spec.image_offset_scale, m, at));
    } else {
      const std::size_t n = draw_size(rng, spec.min_images, spec.max_images);
      const std::size_t witness_image = positive ? rng.next_below(n) : n;
      std::vector<TensorPtr> groups;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t p = spec.scenario == 2
                                  ? 1
                                  : draw_size(rng, spec.min_patches, spec.max_patches);
        const std::ptrdiff_t at =
            (i == witness_image) ? static_cast<std::ptrdiff_t>(rng.next_below(p)) : -1;
        groups.push_back(
            make_group(rng, ds.witness, spec.epsilon, spec.image_offset_scale, p, at));
      }
      bag = Bag::hierarchical(std::move(groups));
    }

    int label = positive ? 1 : 0;
    if (spec.label_noise > 0.0 && rng.uniform() < spec.label_noise) label = 1 - label;
    ds.bags.push_back({std::move(bag), label});
  }
  return ds;
}

}  // namespace mivpg
