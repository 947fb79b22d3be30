#include "mivpg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace mivpg {

namespace {

thread_local std::uint64_t g_mac_count = 0;

std::size_t shape_product(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

void require_2d(const TensorPtr& t, const char* op) {
  if (t->shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " +
                     shape_str(t->shape()));
  }
}

void require_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
  if (a->shape() != b->shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch: " + shape_str(a->shape()) +
                     " vs " + shape_str(b->shape()));
  }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += " x ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::uint64_t mac_count() { return g_mac_count; }
void reset_mac_count() { g_mac_count = 0; }
void add_macs(std::uint64_t n) { g_mac_count += n; }

Tensor::Tensor(Shape shape, std::vector<double> values, bool rg)
    : data(std::move(values)), requires_grad(rg), shape_(std::move(shape)) {
  if (shape_product(shape_) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " needs " +
                     std::to_string(shape_product(shape_)) + " values, got " +
                     std::to_string(data.size()));
  }
}

TensorPtr Tensor::zeros(Shape shape, bool rg) {
  const std::size_t n = shape_product(shape);
  return std::make_shared<Tensor>(std::move(shape), std::vector<double>(n, 0.0), rg);
}

TensorPtr Tensor::full(Shape shape, double value, bool rg) {
  const std::size_t n = shape_product(shape);
  return std::make_shared<Tensor>(std::move(shape), std::vector<double>(n, value), rg);
}

TensorPtr Tensor::from_values(Shape shape, std::vector<double> values, bool rg) {
  return std::make_shared<Tensor>(std::move(shape), std::move(values), rg);
}

TensorPtr Tensor::scalar(double value, bool rg) {
  return from_values({1, 1}, {value}, rg);
}

TensorPtr Tensor::randn(Shape shape, Rng& rng, double stddev, double mean, bool rg) {
  const std::size_t n = shape_product(shape);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = rng.normal(mean, stddev);
  return std::make_shared<Tensor>(std::move(shape), std::move(v), rg);
}

std::size_t Tensor::rows() const {
  if (shape_.size() != 2) throw ShapeError("rows(): tensor is " + shape_str(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() != 2) throw ShapeError("cols(): tensor is " + shape_str(shape_));
  return shape_[1];
}

double& Tensor::at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

bool Tape::wants_grad(std::initializer_list<TensorPtr> inputs) const {
  if (!enabled) return false;
  for (const auto& t : inputs) {
    if (t && t->requires_grad) return true;
  }
  return false;
}

void Tape::record(std::vector<TensorPtr> inputs, TensorPtr output,
                  std::function<void()> backward) {
  records_.push_back({std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward_from(const TensorPtr& loss) {
  if (loss->size() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        shape_str(loss->shape()));
  }
  loss->ensure_grad();
  loss->grad[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;   // no gradient reached this value
    it->backward();
  }
}

// ---- op helpers ------------------------------------------------------------

namespace {

TensorPtr make_output(Tape& tape, Shape shape, std::vector<double> values,
                      bool track) {
  auto out = Tensor::from_values(std::move(shape), std::move(values));
  out->requires_grad = track;
  (void)tape;
  return out;
}

}  // namespace

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a->rows(), k = a->cols(), k2 = b->rows(), n = b->cols();
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a->shape()) +
                     " vs " + shape_str(b->shape()));
  }
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = a->data[i * k + kk];
      const double* brow = &b->data[kk * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  g_mac_count += static_cast<std::uint64_t>(m) * k * n;

  const bool track = tape.wants_grad({a, b});
  auto y = make_output(tape, {m, n}, std::move(out), track);
  if (track) {
    tape.record({a, b}, y, [a, b, y, m, k, n] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double g = y->grad[i * n + j];
            for (std::size_t kk = 0; kk < k; ++kk)
              a->grad[i * k + kk] += g * b->data[kk * n + j];
          }
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t kk = 0; kk < k; ++kk)
          for (std::size_t i = 0; i < m; ++i) {
            const double av = a->data[i * k + kk];
            for (std::size_t j = 0; j < n; ++j)
              b->grad[kk * n + j] += av * y->grad[i * n + j];
          }
      }
    });
  }
  return y;
}

TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] + b->data[i];
  const bool track = tape.wants_grad({a, b});
  auto y = make_output(tape, a->shape(), std::move(out), track);
  if (track) {
    tape.record({a, b}, y, [a, b, y] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < y->grad.size(); ++i) a->grad[i] += y->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < y->grad.size(); ++i) b->grad[i] += y->grad[i];
      }
    });
  }
  return y;
}

TensorPtr add_row_broadcast(Tape& tape, const TensorPtr& a, const TensorPtr& row) {
  require_2d(a, "add_row_broadcast");
  require_2d(row, "add_row_broadcast");
  if (row->rows() != 1 || row->cols() != a->cols()) {
    throw ShapeError("add_row_broadcast: row " + shape_str(row->shape()) +
                     " does not broadcast over " + shape_str(a->shape()));
  }
  const std::size_t m = a->rows(), n = a->cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a->data[i * n + j] + row->data[j];
  const bool track = tape.wants_grad({a, row});
  auto y = make_output(tape, {m, n}, std::move(out), track);
  if (track) {
    tape.record({a, row}, y, [a, row, y, m, n] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < m * n; ++i) a->grad[i] += y->grad[i];
      }
      if (row->requires_grad) {
        row->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) row->grad[j] += y->grad[i * n + j];
      }
    });
  }
  return y;
}

TensorPtr scale(Tape& tape, const TensorPtr& a, double c) {
  std::vector<double> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a->data[i];
  const bool track = tape.wants_grad({a});
  auto y = make_output(tape, a->shape(), std::move(out), track);
  if (track) {
    tape.record({a}, y, [a, y, c] {
      a->ensure_grad();
      for (std::size_t i = 0; i < y->grad.size(); ++i) a->grad[i] += c * y->grad[i];
    });
  }
  return y;
}

TensorPtr mul_elem(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  require_same_shape(a, b, "mul_elem");
  std::vector<double> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * b->data[i];
  const bool track = tape.wants_grad({a, b});
  auto y = make_output(tape, a->shape(), std::move(out), track);
  if (track) {
    tape.record({a, b}, y, [a, b, y] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < y->grad.size(); ++i)
          a->grad[i] += y->grad[i] * b->data[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < y->grad.size(); ++i)
          b->grad[i] += y->grad[i] * a->data[i];
      }
    });
  }
  return y;
}

TensorPtr softmax_rows(Tape& tape, const TensorPtr& a) {
  require_2d(a, "softmax_rows");
  const std::size_t m = a->rows(), n = a->cols();
  if (n == 0) throw EmptyBagError("softmax_rows: zero-width rows");
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = &a->data[i * n];
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(x[j] - mx);
      out[i * n + j] = e;
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= inv;
  }
  const bool track = tape.wants_grad({a});
  auto y = make_output(tape, {m, n}, std::move(out), track);
  if (track) {
    tape.record({a}, y, [a, y, m, n] {
      a->ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const double* s = &y->data[i * n];
        const double* g = &y->grad[i * n];
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * s[j];
        for (std::size_t j = 0; j < n; ++j)
          a->grad[i * n + j] += s[j] * (g[j] - dot);
      }
    });
  }
  return y;
}

TensorPtr tanh_elem(Tape& tape, const TensorPtr& a) {
  std::vector<double> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a->data[i]);
  const bool track = tape.wants_grad({a});
  auto y = make_output(tape, a->shape(), std::move(out), track);
  if (track) {
    tape.record({a}, y, [a, y] {
      a->ensure_grad();
      for (std::size_t i = 0; i < y->grad.size(); ++i) {
        const double t = y->data[i];
        a->grad[i] += y->grad[i] * (1.0 - t * t);
      }
    });
  }
  return y;
}

TensorPtr gelu(Tape& tape, const TensorPtr& a) {
  std::vector<double> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a->data[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  const bool track = tape.wants_grad({a});
  auto y = make_output(tape, a->shape(), std::move(out), track);
  if (track) {
    tape.record({a}, y, [a, y] {
      a->ensure_grad();
      for (std::size_t i = 0; i < y->grad.size(); ++i) {
        const double x = a->data[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        a->grad[i] += y->grad[i] * (cdf + x * pdf);
      }
    });
  }
  return y;
}

TensorPtr layer_norm(Tape& tape, const TensorPtr& a, double eps) {
  require_2d(a, "layer_norm");
  const std::size_t m = a->rows(), n = a->cols();
  std::vector<double> out(m * n);
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = &a->data[i * n];
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (x[j] - mu) * is;
  }
  const bool track = tape.wants_grad({a});
  auto y = make_output(tape, {m, n}, std::move(out), track);
  if (track) {
    tape.record({a}, y, [a, y, inv_std = std::move(inv_std), m, n] {
      a->ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const double* xn = &y->data[i * n];
        const double* g = &y->grad[i * n];
        double gmean = 0.0, gxmean = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          gmean += g[j];
          gxmean += g[j] * xn[j];
        }
        gmean /= static_cast<double>(n);
        gxmean /= static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j)
          a->grad[i * n + j] += inv_std[i] * (g[j] - gmean - xn[j] * gxmean);
      }
    });
  }
  return y;
}

TensorPtr transpose(Tape& tape, const TensorPtr& a) {
  require_2d(a, "transpose");
  const std::size_t m = a->rows(), n = a->cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a->data[i * n + j];
  const bool track = tape.wants_grad({a});
  auto y = make_output(tape, {n, m}, std::move(out), track);
  if (track) {
    tape.record({a}, y, [a, y, m, n] {
      a->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) a->grad[i * n + j] += y->grad[j * m + i];
    });
  }
  return y;
}

TensorPtr concat_rows(Tape& tape, const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw EmptyBagError("concat_rows: nothing to concatenate");
  const std::size_t n = parts[0]->cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_rows");
    if (p->cols() != n) {
      throw ShapeError("concat_rows: column mismatch: " + shape_str(parts[0]->shape()) +
                       " vs " + shape_str(p->shape()));
    }
    total += p->rows();
  }
  std::vector<double> out;
  out.reserve(total * n);
  for (const auto& p : parts) out.insert(out.end(), p->data.begin(), p->data.end());
  bool track = false;
  for (const auto& p : parts) track = track || tape.wants_grad({p});
  auto y = make_output(tape, {total, n}, std::move(out), track);
  if (track) {
    tape.record(parts, y, [parts, y, n] {
      std::size_t r0 = 0;
      for (const auto& p : parts) {
        const std::size_t rows = p->rows();
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < rows * n; ++i)
            p->grad[i] += y->grad[r0 * n + i];
        }
        r0 += rows;
      }
    });
  }
  return y;
}

TensorPtr concat_cols(Tape& tape, const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw EmptyBagError("concat_cols: nothing to concatenate");
  const std::size_t m = parts[0]->rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    if (p->rows() != m) {
      throw ShapeError("concat_cols: row mismatch: " + shape_str(parts[0]->shape()) +
                       " vs " + shape_str(p->shape()));
    }
    total += p->cols();
  }
  std::vector<double> out(m * total);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const std::size_t n = p->cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * total + c0 + j] = p->data[i * n + j];
    c0 += n;
  }
  bool track = false;
  for (const auto& p : parts) track = track || tape.wants_grad({p});
  auto y = make_output(tape, {m, total}, std::move(out), track);
  if (track) {
    tape.record(parts, y, [parts, y, m, total] {
      std::size_t c = 0;
      for (const auto& p : parts) {
        const std::size_t n = p->cols();
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
              p->grad[i * n + j] += y->grad[i * total + c + j];
        }
        c += n;
      }
    });
  }
  return y;
}

TensorPtr slice_rows(Tape& tape, const TensorPtr& a, std::size_t r0, std::size_t r1) {
  require_2d(a, "slice_rows");
  if (r0 >= r1 || r1 > a->rows()) {
    throw IndexError("slice_rows: range [" + std::to_string(r0) + ", " +
                     std::to_string(r1) + ") invalid for " + shape_str(a->shape()));
  }
  const std::size_t n = a->cols(), m = r1 - r0;
  std::vector<double> out(a->data.begin() + r0 * n, a->data.begin() + r1 * n);
  const bool track = tape.wants_grad({a});
  auto y = make_output(tape, {m, n}, std::move(out), track);
  if (track) {
    tape.record({a}, y, [a, y, r0, m, n] {
      a->ensure_grad();
      for (std::size_t i = 0; i < m * n; ++i) a->grad[r0 * n + i] += y->grad[i];
    });
  }
  return y;
}

TensorPtr slice_cols(Tape& tape, const TensorPtr& a, std::size_t c0, std::size_t c1) {
  require_2d(a, "slice_cols");
  if (c0 >= c1 || c1 > a->cols()) {
    throw IndexError("slice_cols: range [" + std::to_string(c0) + ", " +
                     std::to_string(c1) + ") invalid for " + shape_str(a->shape()));
  }
  const std::size_t m = a->rows(), n = a->cols(), w = c1 - c0;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a->data[i * n + c0 + j];
  const bool track = tape.wants_grad({a});
  auto y = make_output(tape, {m, w}, std::move(out), track);
  if (track) {
    tape.record({a}, y, [a, y, c0, m, n, w] {
      a->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j)
          a->grad[i * n + c0 + j] += y->grad[i * w + j];
    });
  }
  return y;
}

TensorPtr gather_rows(Tape& tape, const TensorPtr& a,
                      const std::vector<std::size_t>& index) {
  require_2d(a, "gather_rows");
  const std::size_t n = a->cols();
  for (std::size_t idx : index) {
    if (idx >= a->rows()) {
      throw IndexError("gather_rows: index " + std::to_string(idx) +
                       " out of range for " + shape_str(a->shape()));
    }
  }
  std::vector<double> out(index.size() * n);
  for (std::size_t i = 0; i < index.size(); ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a->data[index[i] * n + j];
  const bool track = tape.wants_grad({a});
  auto y = make_output(tape, {index.size(), n}, std::move(out), track);
  if (track) {
    tape.record({a}, y, [a, y, index, n] {
      a->ensure_grad();
      for (std::size_t i = 0; i < index.size(); ++i)
        for (std::size_t j = 0; j < n; ++j)
          a->grad[index[i] * n + j] += y->grad[i * n + j];
    });
  }
  return y;
}

TensorPtr mean_rows(Tape& tape, const TensorPtr& a) {
  require_2d(a, "mean_rows");
  const std::size_t m = a->rows(), n = a->cols();
  if (m == 0) throw EmptyBagError("mean_rows: no rows");
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a->data[i * n + j];
  const double inv = 1.0 / static_cast<double>(m);
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
  const bool track = tape.wants_grad({a});
  auto y = make_output(tape, {1, n}, std::move(out), track);
  if (track) {
    tape.record({a}, y, [a, y, m, n, inv] {
      a->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) a->grad[i * n + j] += inv * y->grad[j];
    });
  }
  return y;
}

TensorPtr max_rows(Tape& tape, const TensorPtr& a) {
  require_2d(a, "max_rows");
  const std::size_t m = a->rows(), n = a->cols();
  if (m == 0) throw EmptyBagError("max_rows: no rows");
  std::vector<double> out(n);
  std::vector<std::size_t> arg(n, 0);
  for (std::size_t j = 0; j < n; ++j) {
    double best = a->data[j];
    std::size_t bi = 0;
    for (std::size_t i = 1; i < m; ++i) {
      const double v = a->data[i * n + j];
      if (v > best) {   // strict: ties keep the first index
        best = v;
        bi = i;
      }
    }
    out[j] = best;
    arg[j] = bi;
  }
  const bool track = tape.wants_grad({a});
  auto y = make_output(tape, {1, n}, std::move(out), track);
  if (track) {
    tape.record({a}, y, [a, y, arg = std::move(arg), n] {
      a->ensure_grad();
      for (std::size_t j = 0; j < n; ++j) a->grad[arg[j] * n + j] += y->grad[j];
    });
  }
  return y;
}

TensorPtr sum_all(Tape& tape, const TensorPtr& a) {
  double s = 0.0;
  for (double v : a->data) s += v;
  const bool track = tape.wants_grad({a});
  auto y = make_output(tape, {1, 1}, {s}, track);
  if (track) {
    tape.record({a}, y, [a, y] {
      a->ensure_grad();
      const double g = y->grad[0];
      for (std::size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += g;
    });
  }
  return y;
}

TensorPtr reshape(Tape& tape, const TensorPtr& a, Shape shape) {
  if (shape_product(shape) != a->size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a->shape()) + " as " +
                     shape_str(shape));
  }
  const bool track = tape.wants_grad({a});
  auto y = make_output(tape, std::move(shape), a->data, track);
  if (track) {
    tape.record({a}, y, [a, y] {
      a->ensure_grad();
      for (std::size_t i = 0; i < y->grad.size(); ++i) a->grad[i] += y->grad[i];
    });
  }
  return y;
}

TensorPtr depthwise_conv2d(Tape& tape, const TensorPtr& grid, const TensorPtr& kernel,
                           std::size_t s) {
  require_2d(grid, "depthwise_conv2d");
  if (kernel->shape().size() != 3) {
    throw ShapeError("depthwise_conv2d: kernel must be {channels, k, k}, got " +
                     shape_str(kernel->shape()));
  }
  const std::size_t d = grid->cols();
  const std::size_t k = kernel->shape()[1];
  if (grid->rows() != s * s) {
    throw ShapeError("depthwise_conv2d: grid " + shape_str(grid->shape()) +
                     " is not " + std::to_string(s) + "^2 cells");
  }
  if (kernel->shape()[0] != d || kernel->shape()[2] != k) {
    throw ShapeError("depthwise_conv2d: kernel " + shape_str(kernel->shape()) +
                     " does not match grid " + shape_str(grid->shape()));
  }
  if (k % 2 == 0) throw ConfigError("depthwise_conv2d: kernel size must be odd");
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  const std::ptrdiff_t ss = static_cast<std::ptrdiff_t>(s);

  std::vector<double> out(s * s * d, 0.0);
  std::uint64_t macs = 0;
  for (std::ptrdiff_t y0 = 0; y0 < ss; ++y0) {
    for (std::ptrdiff_t x0 = 0; x0 < ss; ++x0) {
      double* orow = &out[static_cast<std::size_t>(y0 * ss + x0) * d];
      for (std::ptrdiff_t dy = -half; dy <= half; ++dy) {
        const std::ptrdiff_t yy = y0 + dy;
        if (yy < 0 || yy >= ss) continue;
        for (std::ptrdiff_t dx = -half; dx <= half; ++dx) {
          const std::ptrdiff_t xx = x0 + dx;
          if (xx < 0 || xx >= ss) continue;
          const double* irow = &grid->data[static_cast<std::size_t>(yy * ss + xx) * d];
          const std::size_t koff =
              (static_cast<std::size_t>(dy + half) * k + static_cast<std::size_t>(dx + half));
          for (std::size_t c = 0; c < d; ++c) {
            orow[c] += irow[c] * kernel->data[c * k * k + koff];
          }
          macs += d;
        }
      }
    }
  }
  g_mac_count += macs;

  const bool track = tape.wants_grad({grid, kernel});
  auto y = make_output(tape, {s * s, d}, std::move(out), track);
  if (track) {
    tape.record({grid, kernel}, y, [grid, kernel, y, s, d, k, half] {
      const std::ptrdiff_t ss = static_cast<std::ptrdiff_t>(s);
      if (grid->requires_grad) grid->ensure_grad();
      if (kernel->requires_grad) kernel->ensure_grad();
      for (std::ptrdiff_t y0 = 0; y0 < ss; ++y0) {
        for (std::ptrdiff_t x0 = 0; x0 < ss; ++x0) {
          const double* grow = &y->grad[static_cast<std::size_t>(y0 * ss + x0) * d];
          for (std::ptrdiff_t dy = -half; dy <= half; ++dy) {
            const std::ptrdiff_t yy = y0 + dy;
            if (yy < 0 || yy >= ss) continue;
            for (std::ptrdiff_t dx = -half; dx <= half; ++dx) {
              const std::ptrdiff_t xx = x0 + dx;
              if (xx < 0 || xx >= ss) continue;
              const std::size_t in_off = static_cast<std::size_t>(yy * ss + xx) * d;
              const std::size_t koff =
                  (static_cast<std::size_t>(dy + half) * k + static_cast<std::size_t>(dx + half));
              for (std::size_t c = 0; c < d; ++c) {
                if (grid->requires_grad)
                  grid->grad[in_off + c] += grow[c] * kernel->data[c * k * k + koff];
                if (kernel->requires_grad)
                  kernel->grad[c * k * k + koff] += grow[c] * grid->data[in_off + c];
              }
            }
          }
        }
      }
    });
  }
  return y;
}

TensorPtr bce_with_logits_mean(Tape& tape, const TensorPtr& logits,
                               const std::vector<double>& targets) {
  require_2d(logits, "bce_with_logits_mean");
  if (logits->cols() != 1 || logits->rows() != targets.size()) {
    throw ShapeError("bce_with_logits_mean: logits " + shape_str(logits->shape()) +
                     " vs " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = targets.size();
  if (n == 0) throw EmptyBagError("bce_with_logits_mean: no samples");
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits->data[i];
    loss += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  loss /= static_cast<double>(n);
  const bool track = tape.wants_grad({logits});
  auto y = make_output(tape, {1, 1}, {loss}, track);
  if (track) {
    tape.record({logits}, y, [logits, y, targets, n] {
      logits->ensure_grad();
      const double g = y->grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double z = logits->data[i];
        const double sig = 1.0 / (1.0 + std::exp(-z));
        logits->grad[i] += g * (sig - targets[i]);
      }
    });
  }
  return y;
}

}  // namespace mivpg
