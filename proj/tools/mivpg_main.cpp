#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mivpg/attn_export.hpp"
#include "mivpg/bagfile.hpp"
#include "mivpg/bench.hpp"
#include "mivpg/dataset.hpp"
#include "mivpg/invariants.hpp"
#include "mivpg/mivpg.hpp"
#include "mivpg/train.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvariantFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw mivpg::IoError("cannot open for writing: " + path);
  out << text;
  if (!out) throw mivpg::IoError("write failed: " + path);
}

std::vector<std::size_t> parse_m_list(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(static_cast<std::size_t>(std::stoull(item)));
  }
  if (out.empty()) throw mivpg::ConfigError("bench: empty m-list");
  return out;
}

int run_check(const mivpg::SuiteOptions& options, const std::string& out_path) {
  auto report = mivpg::run_invariant_suite(options);
  std::ostringstream csv;
  mivpg::write_suite_csv(report, csv);
  if (!out_path.empty()) write_text_file(out_path, csv.str());
  std::size_t pass = 0, fail = 0, skip = 0;
  for (const auto& row : report.rows) {
    if (row.status == "pass") ++pass;
    else if (row.status == "fail") ++fail;
    else ++skip;
  }
  std::cout << "invariant suite: " << pass << " pass, " << fail << " fail, " << skip
            << " skip (" << report.rows.size() << " rows)\n";
  if (!report.all_pass()) {
    for (const auto& row : report.rows) {
      if (row.status == "fail") {
        std::cout << "FAIL scenario=" << row.scenario << " csa=" << row.use_csa
                  << " ppeg=" << row.use_ppeg << " seed=" << row.seed << " "
                  << row.invariant << " metric=" << row.metric << "\n";
      }
    }
    return kExitInvariantFailure;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-instance visual prompt generator: invariant checks, scaling "
               "benchmarks, synthetic training, attention export"};
  app.require_subcommand(1);

  // ---- check ----
  auto* check = app.add_subcommand("check", "Run the permutation-invariance suite");
  std::string check_grid = "default";
  mivpg::SuiteOptions suite_options;
  std::string check_out;
  check->add_option("--grid", check_grid, "Grid preset: default|small");
  check->add_option("--seed", suite_options.seed, "Base seed");
  check->add_option("--out", check_out, "Report CSV path");

  // ---- bench ----
  auto* bench = app.add_subcommand("bench", "Benchmark correlation mechanisms");
  std::string bench_mechanism = "csa";
  std::string bench_m_list = "512,1024,2048,4096,8192";
  std::size_t bench_r = 32;
  std::size_t bench_repeats = 5;
  std::size_t bench_dim = 64;
  std::uint64_t bench_seed = 1;
  bool bench_mac_only = false;
  std::string bench_out;
  bench->add_option("--mechanism", bench_mechanism, "full_sa|low_rank_sa|csa");
  bench->add_option("--m-list", bench_m_list, "Comma-separated ascending bag sizes");
  bench->add_option("--r", bench_r, "Query/probe rows");
  bench->add_option("--repeats", bench_repeats, "Timing repeats per size");
  bench->add_option("--dim", bench_dim, "Embedding dimension");
  bench->add_option("--seed", bench_seed, "Input seed");
  bench->add_flag("--mac-only", bench_mac_only, "Emit only deterministic MAC counts");
  bench->add_option("--out", bench_out, "CSV output path");

  // ---- train ----
  auto* train_cmd = app.add_subcommand("train", "Train on the synthetic witness task");
  mivpg::SyntheticTaskSpec task;
  mivpg::TrainOptions train_options;
  std::string train_config_path;
  std::string train_out;
  std::string train_save_params;
  bool train_baseline = false;
  std::string train_pooling = "ab_mil";
  train_cmd->add_option("--scenario", task.scenario, "1|2|3")->check(CLI::Range(1, 3));
  train_cmd->add_option("--config", train_config_path, "Model config JSON");
  train_cmd->add_option("--epochs", train_options.epochs, "Max epochs");
  train_cmd->add_option("--lr", train_options.lr, "Adam learning rate");
  train_cmd->add_option("--seed", train_options.seed, "Seed for data, init, batching");
  train_cmd->add_option("--out", train_out, "Metrics CSV path");
  train_cmd->add_option("--bags", task.num_bags, "Dataset size");
  train_cmd->add_option("--instance-dim", task.instance_dim, "Instance dimension");
  train_cmd->add_option("--epsilon", task.epsilon, "Witness detection radius");
  train_cmd->add_option("--witness-scale", task.witness_scale, "Witness vector norm");
  train_cmd->add_option("--image-offset", task.image_offset_scale,
                        "Per-image background offset scale");
  train_cmd->add_option("--label-noise", task.label_noise, "Label flip probability");
  train_cmd->add_option("--batch-size", train_options.batch_size, "Adam batch size");
  train_cmd->add_option("--pooling", train_pooling, "Image pooling: ab_mil|mean|max|cls");
  train_cmd->add_flag("--baseline", train_baseline,
                      "Mean-pool everything into one instance (control model)");
  train_cmd->add_option("--save-params", train_save_params, "Write trained parameters");

  // ---- export-attn ----
  auto* export_cmd = app.add_subcommand("export-attn", "Export attention maps as CSV");
  std::string export_config_path, export_params_path, export_bag_path, export_out_dir;
  export_cmd->add_option("--config", export_config_path, "Model config JSON")->required();
  export_cmd->add_option("--params", export_params_path, "Trained parameter file")
      ->required();
  export_cmd->add_option("--bag", export_bag_path, "Bag file")->required();
  export_cmd->add_option("--out-dir", export_out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (check->parsed()) {
      if (check_grid == "small") suite_options.seeds_per_cell = 1;
      else if (check_grid != "default") {
        throw mivpg::ConfigError("check: unknown grid preset '" + check_grid + "'");
      }
      return run_check(suite_options, check_out);
    }

    if (bench->parsed()) {
      auto result = mivpg::bench_complexity(mivpg::mechanism_from_name(bench_mechanism),
                                            parse_m_list(bench_m_list), bench_r,
                                            bench_repeats, bench_dim, bench_seed);
      std::ostringstream csv;
      mivpg::write_bench_csv(result, csv, bench_mac_only);
      if (!bench_out.empty()) write_text_file(bench_out, csv.str());
      std::cout << csv.str();
      return kExitOk;
    }

    if (train_cmd->parsed()) {
      mivpg::MivpgConfig config = train_config_path.empty()
                                      ? mivpg::MivpgConfig::desk_scale()
                                      : mivpg::load_config(train_config_path);
      if (config.instance_dim == 0) config.instance_dim = task.instance_dim;
      task.instance_dim = config.instance_dim;
      task.seed = train_options.seed;
      train_options.mean_pool_baseline = train_baseline;
      if (train_pooling == "ab_mil") train_options.image_pool_kind = mivpg::PoolKind::ab_mil;
      else if (train_pooling == "mean") train_options.image_pool_kind = mivpg::PoolKind::mean;
      else if (train_pooling == "max") train_options.image_pool_kind = mivpg::PoolKind::max;
      else if (train_pooling == "cls") train_options.image_pool_kind = mivpg::PoolKind::cls_select;
      else throw mivpg::ConfigError("train: unknown pooling '" + train_pooling + "'");

      auto dataset = mivpg::generate_task(task);
      mivpg::Model model;
      auto metrics = mivpg::train(dataset, config, train_options, &model);

      std::ostringstream csv;
      mivpg::write_metrics_csv(metrics, csv);
      if (!train_out.empty()) write_text_file(train_out, csv.str());
      if (!train_save_params.empty()) mivpg::save_params(model.trainable, train_save_params);
      std::cout << "trained " << metrics.train_loss.size() << " epochs, final loss "
                << metrics.train_loss.back() << ", test accuracy "
                << metrics.test_accuracy << "\n";
      return kExitOk;
    }

    if (export_cmd->parsed()) {
      auto config = mivpg::load_config(export_config_path);
      mivpg::Rng rng(1);
      auto params = mivpg::init_params(config, rng);
      // Export runs the trunk only; accept snapshots that also carry a head.
      mivpg::ParamSet with_head = params.registry;
      with_head.add("head.W", mivpg::Tensor::zeros({config.model_dim, 1}, true));
      with_head.add("head.b", mivpg::Tensor::zeros({1, 1}, true));
      try {
        mivpg::load_params(with_head, export_params_path);
      } catch (const mivpg::ConfigError&) {
        mivpg::load_params(params.registry, export_params_path);
      }
      auto bag = mivpg::load_bag(export_bag_path);
      auto written = mivpg::export_attention(bag, config, params, export_out_dir);
      for (const auto& path : written) std::cout << path << "\n";
      return kExitOk;
    }
  } catch (const mivpg::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const mivpg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
