#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mivpg/dataset.hpp"
#include "mivpg/mivpg.hpp"

namespace mivpg {

struct TrainOptions {
  std::size_t epochs = 50;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  std::size_t batch_size = 8;
  PoolKind image_pool_kind = PoolKind::ab_mil;
  // Collapse every bag to a single mean-pooled instance before the trunk;
  // the no-MIL control with an identical parameter tree.
  bool mean_pool_baseline = false;
  // Stop once validation accuracy stays at or above this for two epochs in a
  // row; > 1 disables early stopping.
  double early_stop_val_accuracy = 2.0;
};

struct RunMetrics {
  std::vector<double> train_loss;     // one entry per completed epoch
  std::vector<double> val_accuracy;   // same length
  double test_accuracy = 0.0;
  std::uint64_t seed = 0;
  std::string config_digest;
};

// The trained model: trunk parameters plus the binary classification head
// applied to the mean of the final query embeddings.
struct Model {
  MivpgConfig config;
  MivpgParams params;
  TensorPtr head_W;   // {D, 1}
  TensorPtr head_b;   // {1, 1}
  ParamSet trainable; // trunk + head
  bool mean_pool_input = false;

  static Model init(const MivpgConfig& config, std::uint64_t seed,
                    PoolKind image_pool_kind = PoolKind::ab_mil);
  TensorPtr logit(Tape& tape, const Bag& bag) const;
  int predict(const Bag& bag) const;
};

// Adam with bias correction; deterministic given the parameter order.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<TensorPtr> params, double lr, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);
  void step();

 private:
  std::vector<TensorPtr> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
};

// 70/10/20 train/val/test split, Adam on binary cross-entropy. The model is
// left in its trained state when a Model pointer is supplied.
RunMetrics train(const Dataset& dataset, const MivpgConfig& config,
                 const TrainOptions& options, Model* trained = nullptr);

double evaluate_accuracy(const Model& model, const std::vector<LabeledBag>& bags);

void write_metrics_csv(const RunMetrics& metrics, std::ostream& out);

}  // namespace mivpg
