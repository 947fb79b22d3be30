#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mivpg/mivpg.hpp"

namespace mivpg {

// Permuted copy of a matrix: row i of the result is rows[perm[i]].
TensorPtr permute_rows_copy(const TensorPtr& t, const std::vector<std::size_t>& perm);

double max_abs_diff(const TensorPtr& a, const TensorPtr& b);

struct SuiteOptions {
  std::uint64_t seed = 1;
  std::size_t seeds_per_cell = 2;
  std::size_t permutations = 20;
  double tolerance = 1e-9;
};

struct SuiteRow {
  int scenario = 1;
  bool use_csa = false;
  bool use_ppeg = false;
  std::uint64_t seed = 0;
  std::string invariant;
  double metric = 0.0;
  std::string status;   // pass | fail | skip
};

struct SuiteReport {
  std::vector<SuiteRow> rows;
  bool all_pass() const {
    for (const auto& r : rows)
      if (r.status == "fail") return false;
    return true;
  }
};

// Exercises the permutation properties over the full default grid:
// scenarios 1-3 x correlation on/off x positional encoding on/off.
SuiteReport run_invariant_suite(const SuiteOptions& options);

void write_suite_csv(const SuiteReport& report, std::ostream& out);

}  // namespace mivpg
