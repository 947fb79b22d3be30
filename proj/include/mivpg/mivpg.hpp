#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mivpg/attention.hpp"
#include "mivpg/mil.hpp"
#include "mivpg/params.hpp"
#include "mivpg/tensor.hpp"

namespace mivpg {

// Full architecture hyperparameters. Field names double as the accepted keys
// of the JSON config format; unknown keys are rejected.
struct MivpgConfig {
  std::size_t num_blocks = 12;
  std::size_t num_queries = 32;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t cross_attn_every = 2;     // cross-attention in blocks with index % this == 0
  bool use_csa = true;
  bool use_ppeg = false;
  std::size_t ffn_hidden = 0;           // 0 -> 4 * model_dim
  std::vector<std::size_t> ppeg_kernels = {3, 5, 7};
  std::size_t low_rank_probe_size = 16;
  bool csa_use_current_queries = false; // feed CSA the post-self-attention queries instead
  std::size_t instance_dim = 0;         // 0 -> model_dim
  std::size_t abmil_width = 64;

  std::size_t ffn_dim() const { return ffn_hidden ? ffn_hidden : 4 * model_dim; }
  std::size_t input_dim() const { return instance_dim ? instance_dim : model_dim; }
  bool block_has_cross(std::size_t block_index) const {
    return block_index % cross_attn_every == 0;
  }
  void validate() const;
  std::string digest() const;   // stable FNV-1a hex over the canonical form

  // Small configuration used throughout the test suites.
  static MivpgConfig desk_scale();
};

MivpgConfig config_from_json(const std::string& json_text);
MivpgConfig load_config(const std::string& path);
std::string config_to_json(const MivpgConfig& config);

// A sample's instances: one flat instance matrix, or one matrix per image.
struct Bag {
  std::vector<TensorPtr> groups;   // each {P_i, instance_dim}
  bool flat = true;

  static Bag flat_bag(TensorPtr instances);
  static Bag hierarchical(std::vector<TensorPtr> images);

  std::size_t group_count() const { return groups.size(); }
  std::size_t instance_dim() const;
  std::size_t total_instances() const;
  bool all_single_patch() const;
  int scenario() const;   // 1 flat, 2 hierarchical with P_i = 1, 3 otherwise
  void validate() const;
};

// One depthwise convolution kernel per pyramid level.
struct PpegParams {
  std::vector<std::size_t> kernel_sizes;
  std::vector<TensorPtr> kernels;   // each {dim, k, k}

  static PpegParams init(const std::vector<std::size_t>& sizes, std::size_t dim,
                         Rng& rng, double stddev = 0.02);
  void register_into(ParamSet& set, const std::string& prefix) const;
};

struct FfnParams {
  TensorPtr W1, b1, W2, b2;
  static FfnParams init(std::size_t dim, std::size_t hidden, Rng& rng,
                        double stddev = 0.02);
  void register_into(ParamSet& set, const std::string& prefix) const;
};

struct BlockParams {
  AttentionParams self_attn;
  std::optional<AttentionParams> cross_attn;   // blocks with cross-attention only
  std::optional<AttentionParams> csa;          // when instance correlation is on
  FfnParams ffn;
};

// Per-block query embeddings and the (possibly updated) bag embeddings.
struct BlockState {
  TensorPtr q;     // {R, D}
  TensorPtr bag;   // {M, D}
};

struct MivpgParams {
  TensorPtr queries;        // {R, D}
  TensorPtr in_proj_W;      // {instance_dim, D}
  TensorPtr in_proj_b;      // {1, D}
  PoolingSpec image_pool;   // patch -> image aggregation for hierarchical bags
  std::optional<PpegParams> ppeg;
  std::vector<BlockParams> blocks;
  ParamSet registry;
};

MivpgParams init_params(const MivpgConfig& config, Rng& rng,
                        PoolKind image_pool_kind = PoolKind::ab_mil);

// Gaussian query initialization, mean 0, std 0.02.
TensorPtr init_queries(const MivpgConfig& config, Rng& rng);

// Pads to the next perfect square by repeating leading tokens, convolves the
// square grid at every pyramid level, adds the identity path, and truncates
// back to the original length.
TensorPtr ppeg(Tape& tape, const TensorPtr& tokens, const PpegParams& params);

// bag + MHA(Q=bag, K=queries, V=queries), then layer normalization.
TensorPtr csa_update(Tape& tape, const TensorPtr& bag, const TensorPtr& queries,
                     const AttentionParams& params, AttentionMap* map_out = nullptr);

// Two-stage low-rank self-attention: probe attends to the bag, the bag
// attends to the probe summary.
TensorPtr low_rank_self_attention(Tape& tape, const TensorPtr& bag, const TensorPtr& probe,
                                  const AttentionParams& stage1,
                                  const AttentionParams& stage2);

// Diagnostics captured during a forward pass.
struct ForwardDiagnostics {
  std::vector<std::size_t> cross_blocks;          // indices of blocks with cross-attention
  std::vector<AttentionMap> cross_maps;           // one per cross block, {h, R, M}
  std::vector<std::vector<double>> image_alphas;  // hierarchical bags: per-image patch weights
  std::size_t bag_rows = 0;
};

BlockState mivpg_block(Tape& tape, const BlockState& state, std::size_t block_index,
                       const MivpgConfig& config, const BlockParams& params,
                       ForwardDiagnostics* diag = nullptr);

// Runs the whole stack. Flat bags feed instance rows directly; hierarchical
// bags are pooled per image first, then images become the trunk instances.
std::pair<TensorPtr, ForwardDiagnostics> mivpg_forward(Tape& tape, const Bag& bag,
                                                       const MivpgConfig& config,
                                                       const MivpgParams& params);

// Concatenates every patch row of a hierarchical bag into one flat sequence
// and runs the stack; the contrast case for weight misallocation studies.
TensorPtr flatten_baseline_forward(Tape& tape, const Bag& bag, const MivpgConfig& config,
                                   const MivpgParams& params,
                                   ForwardDiagnostics* diag = nullptr);

// Plain text parameter snapshots (exact decimal round-trip).
void save_params(const ParamSet& params, const std::string& path);
void load_params(ParamSet& params, const std::string& path);

}  // namespace mivpg
