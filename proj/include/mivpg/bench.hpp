#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace mivpg {

// Instance-correlation mechanisms compared by the scaling benchmark:
//   full_sa     pairwise self-attention over the bag, O(M^2 D) work
//   low_rank_sa two-stage attention through an M'-row probe, O(M M' D)
//   csa         attention onto R query rows, O(M R D)
enum class Mechanism { full_sa, low_rank_sa, csa };

std::string mechanism_name(Mechanism m);
Mechanism mechanism_from_name(const std::string& name);

struct BenchRow {
  std::size_t m = 0;
  double median_seconds = 0.0;
  std::uint64_t macs = 0;
  bool capped = false;   // allocation failed; row kept without measurements
};

struct BenchResult {
  Mechanism mechanism = Mechanism::full_sa;
  std::size_t r = 0;
  std::size_t dim = 0;
  std::vector<BenchRow> rows;
  double slope = 0.0;   // least-squares log-log slope of median time vs M
};

// Closed-form multiply-accumulate count of the bare attention core for one
// mechanism at bag size m.
std::uint64_t mechanism_macs(Mechanism mechanism, std::size_t m, std::size_t r,
                             std::size_t dim);

// Streaming attention kernel: out = softmax(Q K^T / sqrt(d)) V computed one
// score row at a time, O(r2) scratch. Returns the executed MAC count.
std::uint64_t attention_stream(const double* q, std::size_t r1, const double* k,
                               const double* v, std::size_t r2, std::size_t d,
                               double* out);

// Median wall time over `repeats` runs plus exact MAC counts per bag size.
BenchResult bench_complexity(Mechanism mechanism, const std::vector<std::size_t>& m_list,
                             std::size_t r, std::size_t repeats, std::size_t dim = 64,
                             std::uint64_t seed = 1);

double fit_log_log_slope(const std::vector<std::size_t>& x, const std::vector<double>& y);

void write_bench_csv(const BenchResult& result, std::ostream& out, bool mac_only);

}  // namespace mivpg
