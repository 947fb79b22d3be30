#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mivpg/tensor.hpp"

namespace mivpg {

// Ordered named registry of trainable tensors. Order is deterministic and
// drives optimizer state, gradient checks, and the on-disk format.
struct ParamSet {
  std::vector<std::pair<std::string, TensorPtr>> items;

  TensorPtr add(const std::string& name, const TensorPtr& t) {
    items.emplace_back(name, t);
    return t;
  }

  TensorPtr find(const std::string& name) const {
    for (const auto& [n, t] : items)
      if (n == name) return t;
    return nullptr;
  }

  std::vector<TensorPtr> tensors() const {
    std::vector<TensorPtr> out;
    out.reserve(items.size());
    for (const auto& [n, t] : items) out.push_back(t);
    return out;
  }

  void zero_grads() {
    for (auto& [n, t] : items) t->zero_grad();
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items) n += t->size();
    return n;
  }
};

}  // namespace mivpg
