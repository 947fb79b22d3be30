#pragma once

#include <cstdint>
#include <vector>

#include "mivpg/mivpg.hpp"

namespace mivpg {

// Witness-detection task: a bag is positive iff it contains at least one
// instance within epsilon of a fixed witness vector.
struct SyntheticTaskSpec {
  int scenario = 3;
  std::size_t instance_dim = 32;
  std::size_t num_bags = 1000;
  std::size_t min_images = 2, max_images = 8;     // N range (scenarios 2 and 3)
  std::size_t min_patches = 4, max_patches = 16;  // P range (scenarios 1 and 3), M for flat bags
  double witness_scale = 14.0;                    // norm of the witness vector
  double epsilon = 0.5;
  // every image draws a mean offset of this scale, shared by its background
  // patches; image-level nuisance variation that set-level pooling must absorb
  double image_offset_scale = 1.0;
  double label_noise = 0.0;
  std::uint64_t seed = 1;
};

struct LabeledBag {
  Bag bag;
  int label;   // 0 or 1
};

struct Dataset {
  SyntheticTaskSpec spec;
  std::vector<double> witness;
  std::vector<LabeledBag> bags;
};

// Deterministic generation from the seed; class balance lands in [0.4, 0.6]
// or generation fails after bounded resampling.
Dataset generate_task(const SyntheticTaskSpec& spec);

// Ground-truth membership test: does any instance lie within epsilon of the
// witness vector?
bool bag_contains_witness(const Bag& bag, const std::vector<double>& witness,
                          double epsilon);

}  // namespace mivpg
