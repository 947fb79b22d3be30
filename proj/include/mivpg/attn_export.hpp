#pragma once

#include <string>
#include <vector>

#include "mivpg/mivpg.hpp"

namespace mivpg {

// Runs one forward pass and writes attention diagnostics as CSV:
//   cross_attention_block<i>.csv   one row per (head, query), columns w_j over
//                                  the trunk instances; rows sum to 1
//   patch_weights_image<j>.csv     per-image instance weights (hierarchical
//                                  bags only), a single row summing to 1
// Returns the written paths in a deterministic order.
std::vector<std::string> export_attention(const Bag& bag, const MivpgConfig& config,
                                          const MivpgParams& params,
                                          const std::string& out_dir);

}  // namespace mivpg
