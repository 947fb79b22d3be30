#include "mivpg/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <new>
#include <ostream>
#include <vector>

#include "mivpg/error.hpp"
#include "mivpg/rng.hpp"

namespace mivpg {

std::string mechanism_name(Mechanism m) {
  switch (m) {
    case Mechanism::full_sa: return "full_sa";
    case Mechanism::low_rank_sa: return "low_rank_sa";
    case Mechanism::csa: return "csa";
  }
  return "unknown";
}

Mechanism mechanism_from_name(const std::string& name) {
  if (name == "full_sa") return Mechanism::full_sa;
  if (name == "low_rank_sa") return Mechanism::low_rank_sa;
  if (name == "csa") return Mechanism::csa;
  throw ConfigError("bench: unknown mechanism '" + name + "'");
}

std::uint64_t mechanism_macs(Mechanism mechanism, std::size_t m, std::size_t r,
                             std::size_t dim) {
  const std::uint64_t M = m, R = r, D = dim;
  switch (mechanism) {
    case Mechanism::full_sa: return 2 * M * M * D;          // scores + weighted sum
    case Mechanism::low_rank_sa: return 4 * M * R * D;      // both stages, probe of R rows
    case Mechanism::csa: return 2 * M * R * D;
  }
  return 0;
}

std::uint64_t attention_stream(const double* q, std::size_t r1, const double* k,
                               const double* v, std::size_t r2, std::size_t d,
                               double* out) {
  if (r2 == 0) throw EmptyBagError("attention_stream: no keys");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> scores(r2);
  std::uint64_t macs = 0;
  for (std::size_t i = 0; i < r1; ++i) {
    const double* qi = q + i * d;
    double mx = -1e300;
    for (std::size_t j = 0; j < r2; ++j) {
      const double* kj = k + j * d;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += qi[c] * kj[c];
      s *= inv_sqrt_d;
      scores[j] = s;
      mx = std::max(mx, s);
    }
    macs += static_cast<std::uint64_t>(r2) * d;
    double sum = 0.0;
    for (std::size_t j = 0; j < r2; ++j) {
      scores[j] = std::exp(scores[j] - mx);
      sum += scores[j];
    }
    const double inv = 1.0 / sum;
    double* oi = out + i * d;
    for (std::size_t c = 0; c < d; ++c) oi[c] = 0.0;
    for (std::size_t j = 0; j < r2; ++j) {
      const double w = scores[j] * inv;
      const double* vj = v + j * d;
      for (std::size_t c = 0; c < d; ++c) oi[c] += w * vj[c];
    }
    macs += static_cast<std::uint64_t>(r2) * d;
  }
  return macs;
}

namespace {

// One timed pass of a mechanism over an M x dim bag; probe/query rows are
// the same buffer across repeats.
std::uint64_t run_mechanism(Mechanism mech, const std::vector<double>& bag, std::size_t m,
                            const std::vector<double>& probe, std::size_t r,
                            std::size_t dim, std::vector<double>& out,
                            std::vector<double>& scratch) {
  switch (mech) {
    case Mechanism::full_sa:
      return attention_stream(bag.data(), m, bag.data(), bag.data(), m, dim, out.data());
    case Mechanism::csa:
      return attention_stream(bag.data(), m, probe.data(), probe.data(), r, dim,
                              out.data());
    case Mechanism::low_rank_sa: {
      std::uint64_t macs =
          attention_stream(probe.data(), r, bag.data(), bag.data(), m, dim,
                           scratch.data());
      macs += attention_stream(bag.data(), m, scratch.data(), scratch.data(), r, dim,
                               out.data());
      return macs;
    }
  }
  return 0;
}

}  // namespace

double fit_log_log_slope(const std::vector<std::size_t>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) return 0.0;
  const std::size_t n = x.size();
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lx = std::log(static_cast<double>(x[i]));
    const double ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double denom = static_cast<double>(n) * sxx - sx * sx;
  return (static_cast<double>(n) * sxy - sx * sy) / denom;
}

BenchResult bench_complexity(Mechanism mechanism, const std::vector<std::size_t>& m_list,
                             std::size_t r, std::size_t repeats, std::size_t dim,
                             std::uint64_t seed) {
  if (repeats < 5) throw ConfigError("bench: repeats must be >= 5 for a usable median");
  for (std::size_t i = 1; i < m_list.size(); ++i) {
    if (m_list[i] <= m_list[i - 1]) throw ConfigError("bench: m-list must ascend");
  }
  BenchResult result;
  result.mechanism = mechanism;
  result.r = r;
  result.dim = dim;

  Rng rng(seed);
  std::vector<double> probe(r * dim);
  for (auto& v : probe) v = rng.normal();

  for (std::size_t m : m_list) {
    BenchRow row;
    row.m = m;
    try {
      std::vector<double> bag(m * dim);
      for (auto& v : bag) v = rng.normal();
      std::vector<double> out(m * dim);
      std::vector<double> scratch(r * dim);

      std::vector<double> times(repeats);
      std::uint64_t macs = 0;
      for (std::size_t rep = 0; rep < repeats; ++rep) {
        const auto t0 = std::chrono::steady_clock::now();
        macs = run_mechanism(mechanism, bag, m, probe, r, dim, out, scratch);
        const auto t1 = std::chrono::steady_clock::now();
        times[rep] = std::chrono::duration<double>(t1 - t0).count();
      }
      std::sort(times.begin(), times.end());
      row.median_seconds = times[repeats / 2];
      row.macs = macs;
    } catch (const std::bad_alloc&) {
      row.capped = true;   // too large for this host; keep the row, skip the numbers
    }
    result.rows.push_back(row);
  }

  std::vector<std::size_t> ms;
  std::vector<double> ts;
  for (const auto& row : result.rows) {
    if (!row.capped && row.median_seconds > 0.0) {
      ms.push_back(row.m);
      ts.push_back(row.median_seconds);
    }
  }
  result.slope = fit_log_log_slope(ms, ts);
  return result;
}

void write_bench_csv(const BenchResult& result, std::ostream& out, bool mac_only) {
  char buf[40];
  if (mac_only) {
    out << "mechanism,m,r,dim,macs\n";
    for (const auto& row : result.rows) {
      out << mechanism_name(result.mechanism) << "," << row.m << "," << result.r << ","
          << result.dim << "," << row.macs << "\n";
    }
    return;
  }
  out << "mechanism,m,r,dim,macs,median_seconds,capped\n";
  for (const auto& row : result.rows) {
    std::snprintf(buf, sizeof(buf), "%.9e", row.median_seconds);
    out << mechanism_name(result.mechanism) << "," << row.m << "," << result.r << ","
        << result.dim << "," << row.macs << "," << buf << "," << (row.capped ? 1 : 0)
        << "\n";
  }
  std::snprintf(buf, sizeof(buf), "%.6f", result.slope);
  out << "# fitted_log_log_slope=" << buf << "\n";
}

}  // namespace mivpg
