#include "mivpg/train.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

namespace mivpg {

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Collapse a bag to one instance: per-image mean of patches, then the mean
// over images.
Bag collapse_to_mean(Tape& tape, const Bag& bag) {
  std::vector<TensorPtr> means;
  means.reserve(bag.groups.size());
  for (const auto& g : bag.groups) means.push_back(mean_rows(tape, g));
  auto stacked = means.size() == 1 ? means[0] : concat_rows(tape, means);
  auto pooled = means.size() == 1 ? stacked : mean_rows(tape, stacked);
  return Bag::flat_bag(pooled);
}

}  // namespace

Model Model::init(const MivpgConfig& config, std::uint64_t seed, PoolKind pool_kind) {
  Rng rng(seed);
  Model m;
  m.config = config;
  m.params = init_params(config, rng, pool_kind);
  m.head_W = Tensor::randn({config.model_dim, 1}, rng, 0.02, 0.0, true);
  m.head_b = Tensor::zeros({1, 1}, true);
  m.trainable = m.params.registry;
  m.trainable.add("head.W", m.head_W);
  m.trainable.add("head.b", m.head_b);
  return m;
}

TensorPtr Model::logit(Tape& tape, const Bag& bag) const {
  const Bag& input = bag;
  TensorPtr q;
  if (mean_pool_input) {
    Bag collapsed = collapse_to_mean(tape, input);
    q = mivpg_forward(tape, collapsed, config, params).first;
  } else {
    q = mivpg_forward(tape, input, config, params).first;
  }
  auto summary = mean_rows(tape, q);
  return add_row_broadcast(tape, matmul(tape, summary, head_W), head_b);
}

int Model::predict(const Bag& bag) const {
  Tape tape;
  tape.enabled = false;
  return logit(tape, bag)->data[0] > 0.0 ? 1 : 0;
}

AdamOptimizer::AdamOptimizer(std::vector<TensorPtr> params, double lr, double beta1,
                             double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p->size(), 0.0);
    v_.emplace_back(p->size(), 0.0);
  }
}

void AdamOptimizer::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    if (p.grad.empty()) continue;
    for (std::size_t j = 0; j < p.data.size(); ++j) {
      const double g = p.grad[j];
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      p.data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

double evaluate_accuracy(const Model& model, const std::vector<LabeledBag>& bags) {
  if (bags.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& lb : bags) {
    if (model.predict(lb.bag) == lb.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(bags.size());
}

RunMetrics train(const Dataset& dataset, const MivpgConfig& config,
                 const TrainOptions& options, Model* trained) {
  if (dataset.bags.empty()) throw TrainingError("train: empty dataset");
  const std::size_t n = dataset.bags.size();
  const std::size_t n_train = (n * 7) / 10;
  const std::size_t n_val = n / 10;
  if (n_train == 0 || n_train + n_val >= n) {
    throw TrainingError("train: dataset too small for a 70/10/20 split");
  }
  std::vector<LabeledBag> val_set(dataset.bags.begin() + n_train,
                                  dataset.bags.begin() + n_train + n_val);
  std::vector<LabeledBag> test_set(dataset.bags.begin() + n_train + n_val,
                                   dataset.bags.end());

  Model model = Model::init(config, options.seed, options.image_pool_kind);
  model.mean_pool_input = options.mean_pool_baseline;
  AdamOptimizer optimizer(model.trainable.tensors(), options.lr);
  Rng shuffle_rng(options.seed ^ 0x5DEECE66Dull);

  RunMetrics metrics;
  metrics.seed = options.seed;
  metrics.config_digest = config.digest();

  std::vector<std::size_t> order(n_train);
  for (std::size_t i = 0; i < n_train; ++i) order[i] = i;

  std::size_t streak = 0;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n_train; start += options.batch_size) {
      const std::size_t stop = std::min(start + options.batch_size, n_train);
      Tape tape;
      std::vector<TensorPtr> logits;
      std::vector<double> targets;
      for (std::size_t i = start; i < stop; ++i) {
        const auto& lb = dataset.bags[order[i]];
        logits.push_back(model.logit(tape, lb.bag));
        targets.push_back(static_cast<double>(lb.label));
      }
      auto batch_logits = logits.size() == 1 ? logits[0] : concat_rows(tape, logits);
      auto loss = bce_with_logits_mean(tape, batch_logits, targets);
      if (!std::isfinite(loss->data[0])) {
        throw TrainingError("train: loss diverged at epoch " + std::to_string(epoch));
      }
      loss_sum += loss->data[0] * static_cast<double>(stop - start);
      model.trainable.zero_grads();
      tape.backward_from(loss);
      optimizer.step();
    }
    metrics.train_loss.push_back(loss_sum / static_cast<double>(n_train));
    metrics.val_accuracy.push_back(evaluate_accuracy(model, val_set));

    if (metrics.val_accuracy.back() >= options.early_stop_val_accuracy) {
      if (++streak >= 2) break;
    } else {
      streak = 0;
    }
  }

  metrics.test_accuracy = evaluate_accuracy(model, test_set);
  if (trained) *trained = std::move(model);
  return metrics;
}

void write_metrics_csv(const RunMetrics& metrics, std::ostream& out) {
  out << "metric,epoch,value\n";
  for (std::size_t e = 0; e < metrics.train_loss.size(); ++e) {
    out << "train_loss," << e << "," << format_double(metrics.train_loss[e]) << "\n";
    out << "val_accuracy," << e << "," << format_double(metrics.val_accuracy[e]) << "\n";
  }
  out << "test_accuracy,," << format_double(metrics.test_accuracy) << "\n";
  out << "seed,," << metrics.seed << "\n";
  out << "config_digest,," << metrics.config_digest << "\n";
}

}  // namespace mivpg
