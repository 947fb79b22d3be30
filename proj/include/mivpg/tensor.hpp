#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mivpg/error.hpp"
#include "mivpg/rng.hpp"

namespace mivpg {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major float64 buffer with an optional gradient of the same shape.
class Tensor {
 public:
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static TensorPtr zeros(Shape shape, bool requires_grad = false);
  static TensorPtr full(Shape shape, double value, bool requires_grad = false);
  static TensorPtr from_values(Shape shape, std::vector<double> values,
                               bool requires_grad = false);
  static TensorPtr scalar(double value, bool requires_grad = false);
  static TensorPtr randn(Shape shape, Rng& rng, double stddev = 1.0,
                         double mean = 0.0, bool requires_grad = false);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data.size(); }

  // 2-D accessors; most of the library works on matrices.
  std::size_t rows() const;
  std::size_t cols() const;
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  void ensure_grad();   // allocate a zero gradient buffer if absent
  void zero_grad();

  std::vector<double> data;
  std::vector<double> grad;   // empty until a backward pass touches it
  bool requires_grad = false;

 private:
  Shape shape_;
};

// Multiply-accumulate accounting for the forward kernels (matmul and the
// depthwise convolution). Thread-local, reset manually.
std::uint64_t mac_count();
void reset_mac_count();
void add_macs(std::uint64_t n);

// Records forward operations in execution order; replaying the records in
// reverse visits them in reverse topological order. Gradient accumulation is
// additive, so a tensor consumed k times receives the sum of k contributions.
class Tape {
 public:
  struct Record {
    std::vector<TensorPtr> inputs;
    TensorPtr output;
    std::function<void()> backward;
  };

  bool enabled = true;   // disabled tapes skip recording (pure inference)

  bool wants_grad(std::initializer_list<TensorPtr> inputs) const;
  void record(std::vector<TensorPtr> inputs, TensorPtr output,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  // requires_grad tensor reachable from the recorded operations.
  void backward_from(const TensorPtr& loss);

  void clear() { records_.clear(); }
  std::size_t size() const { return records_.size(); }

 private:
  std::vector<Record> records_;
};

// ---- differentiable operations -------------------------------------------

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b);
// Adds a 1 x n row vector to every row of an m x n matrix.
TensorPtr add_row_broadcast(Tape& tape, const TensorPtr& a, const TensorPtr& row);
TensorPtr scale(Tape& tape, const TensorPtr& a, double c);
TensorPtr mul_elem(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr softmax_rows(Tape& tape, const TensorPtr& a);
TensorPtr tanh_elem(Tape& tape, const TensorPtr& a);
TensorPtr gelu(Tape& tape, const TensorPtr& a);   // exact erf form
TensorPtr layer_norm(Tape& tape, const TensorPtr& a, double eps = 1e-5);
TensorPtr transpose(Tape& tape, const TensorPtr& a);
TensorPtr concat_rows(Tape& tape, const std::vector<TensorPtr>& parts);
TensorPtr concat_cols(Tape& tape, const std::vector<TensorPtr>& parts);
TensorPtr slice_rows(Tape& tape, const TensorPtr& a, std::size_t r0, std::size_t r1);
TensorPtr slice_cols(Tape& tape, const TensorPtr& a, std::size_t c0, std::size_t c1);
// Builds a matrix whose row i is a.row(index[i]); repeats allowed.
TensorPtr gather_rows(Tape& tape, const TensorPtr& a, const std::vector<std::size_t>& index);
TensorPtr mean_rows(Tape& tape, const TensorPtr& a);   // m x n -> 1 x n
TensorPtr max_rows(Tape& tape, const TensorPtr& a);    // ties route to the first index
TensorPtr sum_all(Tape& tape, const TensorPtr& a);     // -> 1 x 1
TensorPtr reshape(Tape& tape, const TensorPtr& a, Shape shape);

// Depthwise 2-D convolution over an s x s grid of d-channel cells stored as
// an s*s x d matrix (row = cell, row-major cells). Kernel shape {d, k, k},
// zero padding, output spatial shape equals input spatial shape.
TensorPtr depthwise_conv2d(Tape& tape, const TensorPtr& grid, const TensorPtr& kernel,
                           std::size_t s);

// Numerically stable mean binary cross-entropy over logits (n x 1).
TensorPtr bce_with_logits_mean(Tape& tape, const TensorPtr& logits,
                               const std::vector<double>& targets);

}  // namespace mivpg
