#include "mivpg/mivpg.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace mivpg {

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

void MivpgConfig::validate() const {
  if (num_blocks == 0) throw ConfigError("config: num_blocks must be >= 1");
  if (num_queries == 0) throw ConfigError("config: num_queries must be >= 1");
  if (model_dim == 0) throw ConfigError("config: model_dim must be >= 1");
  if (heads == 0 || model_dim % heads != 0) {
    throw ConfigError("config: model_dim " + std::to_string(model_dim) +
                      " not divisible by heads " + std::to_string(heads));
  }
  if (cross_attn_every == 0) throw ConfigError("config: cross_attn_every must be >= 1");
  if (ppeg_kernels.empty()) throw ConfigError("config: ppeg_kernels must not be empty");
  for (std::size_t k : ppeg_kernels) {
    if (k == 0 || k % 2 == 0) {
      throw ConfigError("config: ppeg kernel sizes must be odd, got " + std::to_string(k));
    }
  }
  if (low_rank_probe_size == 0) throw ConfigError("config: low_rank_probe_size must be >= 1");
  if (abmil_width == 0) throw ConfigError("config: abmil_width must be >= 1");
}

std::string config_to_json(const MivpgConfig& c) {
  std::ostringstream out;
  out << "{\"num_blocks\":" << c.num_blocks
      << ",\"num_queries\":" << c.num_queries
      << ",\"model_dim\":" << c.model_dim
      << ",\"heads\":" << c.heads
      << ",\"cross_attn_every\":" << c.cross_attn_every
      << ",\"use_csa\":" << (c.use_csa ? "true" : "false")
      << ",\"use_ppeg\":" << (c.use_ppeg ? "true" : "false")
      << ",\"ffn_hidden\":" << c.ffn_hidden
      << ",\"ppeg_kernels\":[";
  for (std::size_t i = 0; i < c.ppeg_kernels.size(); ++i) {
    if (i) out << ",";
    out << c.ppeg_kernels[i];
  }
  out << "],\"low_rank_probe_size\":" << c.low_rank_probe_size
      << ",\"csa_use_current_queries\":" << (c.csa_use_current_queries ? "true" : "false")
      << ",\"instance_dim\":" << c.instance_dim
      << ",\"abmil_width\":" << c.abmil_width << "}";
  return out.str();
}

std::string MivpgConfig::digest() const {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(config_to_json(*this))));
  return buf;
}

MivpgConfig MivpgConfig::desk_scale() {
  MivpgConfig c;
  c.num_blocks = 4;
  c.num_queries = 8;
  c.model_dim = 64;
  c.heads = 4;
  c.cross_attn_every = 2;
  return c;
}

MivpgConfig config_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");

  MivpgConfig c;
  const auto get_size = [](const nlohmann::json& v, const std::string& key) -> std::size_t {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      throw ConfigError("config: key '" + key + "' must be a non-negative integer");
    }
    return v.get<std::size_t>();
  };
  const auto get_bool = [](const nlohmann::json& v, const std::string& key) -> bool {
    if (!v.is_boolean()) throw ConfigError("config: key '" + key + "' must be a boolean");
    return v.get<bool>();
  };

  for (const auto& [key, value] : j.items()) {
    if (key == "num_blocks") c.num_blocks = get_size(value, key);
    else if (key == "num_queries") c.num_queries = get_size(value, key);
    else if (key == "model_dim") c.model_dim = get_size(value, key);
    else if (key == "heads") c.heads = get_size(value, key);
    else if (key == "cross_attn_every") c.cross_attn_every = get_size(value, key);
    else if (key == "use_csa") c.use_csa = get_bool(value, key);
    else if (key == "use_ppeg") c.use_ppeg = get_bool(value, key);
    else if (key == "ffn_hidden") c.ffn_hidden = get_size(value, key);
    else if (key == "ppeg_kernels") {
      if (!value.is_array()) throw ConfigError("config: 'ppeg_kernels' must be an array");
      c.ppeg_kernels.clear();
      for (const auto& e : value) c.ppeg_kernels.push_back(get_size(e, key));
    } else if (key == "low_rank_probe_size") c.low_rank_probe_size = get_size(value, key);
    else if (key == "csa_use_current_queries") c.csa_use_current_queries = get_bool(value, key);
    else if (key == "instance_dim") c.instance_dim = get_size(value, key);
    else if (key == "abmil_width") c.abmil_width = get_size(value, key);
    else throw ConfigError("config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

MivpgConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return config_from_json(buf.str());
}

// ---- Bag -------------------------------------------------------------------

Bag Bag::flat_bag(TensorPtr instances) {
  Bag b;
  b.flat = true;
  b.groups = {std::move(instances)};
  b.validate();
  return b;
}

Bag Bag::hierarchical(std::vector<TensorPtr> images) {
  Bag b;
  b.flat = false;
  b.groups = std::move(images);
  b.validate();
  return b;
}

std::size_t Bag::instance_dim() const { return groups.at(0)->cols(); }

std::size_t Bag::total_instances() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g->rows();
  return n;
}

bool Bag::all_single_patch() const {
  for (const auto& g : groups)
    if (g->rows() != 1) return false;
  return true;
}

int Bag::scenario() const {
  if (flat) return 1;
  return all_single_patch() ? 2 : 3;
}

void Bag::validate() const {
  if (groups.empty()) throw EmptyBagError("bag: no instances");
  if (flat && groups.size() != 1) throw ContractError("bag: flat bags hold one group");
  const std::size_t d = groups[0]->cols();
  for (const auto& g : groups) {
    if (g->shape().size() != 2) {
      throw ShapeError("bag: groups must be 2-D, got " + shape_str(g->shape()));
    }
    if (g->rows() == 0) throw EmptyBagError("bag: empty image group");
    if (g->cols() != d) {
      throw ShapeError("bag: instance dims differ: " + shape_str(groups[0]->shape()) +
                       " vs " + shape_str(g->shape()));
    }
  }
}

// ---- parameters ------------------------------------------------------------

PpegParams PpegParams::init(const std::vector<std::size_t>& sizes, std::size_t dim,
                            Rng& rng, double stddev) {
  PpegParams p;
  p.kernel_sizes = sizes;
  for (std::size_t k : sizes) {
    if (k % 2 == 0) throw ConfigError("ppeg: kernel sizes must be odd");
    p.kernels.push_back(Tensor::randn({dim, k, k}, rng, stddev, 0.0, true));
  }
  return p;
}

void PpegParams::register_into(ParamSet& set, const std::string& prefix) const {
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    set.add(prefix + ".k" + std::to_string(kernel_sizes[i]), kernels[i]);
  }
}

FfnParams FfnParams::init(std::size_t dim, std::size_t hidden, Rng& rng, double stddev) {
  FfnParams f;
  f.W1 = Tensor::randn({dim, hidden}, rng, stddev, 0.0, true);
  f.b1 = Tensor::zeros({1, hidden}, true);
  f.W2 = Tensor::randn({hidden, dim}, rng, stddev, 0.0, true);
  f.b2 = Tensor::zeros({1, dim}, true);
  return f;
}

void FfnParams::register_into(ParamSet& set, const std::string& prefix) const {
  set.add(prefix + ".W1", W1);
  set.add(prefix + ".b1", b1);
  set.add(prefix + ".W2", W2);
  set.add(prefix + ".b2", b2);
}

TensorPtr init_queries(const MivpgConfig& config, Rng& rng) {
  return Tensor::randn({config.num_queries, config.model_dim}, rng, 0.02, 0.0, true);
}

MivpgParams init_params(const MivpgConfig& config, Rng& rng, PoolKind image_pool_kind) {
  config.validate();
  MivpgParams p;
  p.queries = init_queries(config, rng);
  p.registry.add("queries", p.queries);

  const std::size_t d_in = config.input_dim();
  p.in_proj_W = Tensor::randn({d_in, config.model_dim}, rng, 0.02, 0.0, true);
  p.in_proj_b = Tensor::zeros({1, config.model_dim}, true);
  p.registry.add("in_proj.W", p.in_proj_W);
  p.registry.add("in_proj.b", p.in_proj_b);

  // Pooling parameters are always allocated so that switching the pooling
  // kind preserves both the parameter count and the init stream.
  p.image_pool = PoolingSpec::attention_pool(config.abmil_width, d_in, rng);
  p.image_pool.kind = image_pool_kind;
  p.image_pool.register_into(p.registry, "image_pool");

  if (config.use_ppeg) {
    p.ppeg = PpegParams::init(config.ppeg_kernels, config.model_dim, rng);
    p.ppeg->register_into(p.registry, "ppeg");
  }

  for (std::size_t l = 0; l < config.num_blocks; ++l) {
    BlockParams blk;
    const std::string prefix = "block" + std::to_string(l);
    blk.self_attn = AttentionParams::init(config.model_dim, config.heads, rng);
    blk.self_attn.register_into(p.registry, prefix + ".self");
    if (config.use_csa) {
      blk.csa = AttentionParams::init(config.model_dim, config.heads, rng);
      blk.csa->register_into(p.registry, prefix + ".csa");
    }
    if (config.block_has_cross(l)) {
      blk.cross_attn = AttentionParams::init(config.model_dim, config.heads, rng);
      blk.cross_attn->register_into(p.registry, prefix + ".cross");
    }
    blk.ffn = FfnParams::init(config.model_dim, config.ffn_dim(), rng);
    blk.ffn.register_into(p.registry, prefix + ".ffn");
    p.blocks.push_back(std::move(blk));
  }
  return p;
}

// ---- forward operations ----------------------------------------------------

TensorPtr ppeg(Tape& tape, const TensorPtr& tokens, const PpegParams& params) {
  const std::size_t m = tokens->rows();
  if (m == 0) throw EmptyBagError("ppeg: empty token sequence");
  std::size_t s = 1;
  while (s * s < m) ++s;
  const std::size_t total = s * s;

  TensorPtr grid = tokens;
  if (total != m) {
    std::vector<std::size_t> index(total);
    for (std::size_t i = 0; i < m; ++i) index[i] = i;
    for (std::size_t i = m; i < total; ++i) index[i] = i - m;   // repeat leading tokens
    grid = gather_rows(tape, tokens, index);
  }

  auto acc = grid;
  for (const auto& kernel : params.kernels) {
    acc = add(tape, acc, depthwise_conv2d(tape, grid, kernel, s));
  }
  return total == m ? acc : slice_rows(tape, acc, 0, m);
}

TensorPtr csa_update(Tape& tape, const TensorPtr& bag, const TensorPtr& queries,
                     const AttentionParams& params, AttentionMap* map_out) {
  if (bag->rows() == 0) throw EmptyBagError("csa_update: empty bag");
  auto [attended, map] = multi_head_attention(tape, params, bag, queries, queries);
  if (map_out) *map_out = map;
  return layer_norm(tape, add(tape, bag, attended));
}

TensorPtr low_rank_self_attention(Tape& tape, const TensorPtr& bag, const TensorPtr& probe,
                                  const AttentionParams& stage1,
                                  const AttentionParams& stage2) {
  if (probe->rows() == 0) throw EmptyBagError("low_rank_self_attention: empty probe");
  auto summary = multi_head_attention(tape, stage1, probe, bag, bag).first;
  return multi_head_attention(tape, stage2, bag, summary, summary).first;
}

BlockState mivpg_block(Tape& tape, const BlockState& state, std::size_t block_index,
                       const MivpgConfig& config, const BlockParams& params,
                       ForwardDiagnostics* diag) {
  auto self_out = multi_head_attention(tape, params.self_attn, state.q, state.q, state.q).first;
  auto q1 = layer_norm(tape, add(tape, state.q, self_out));

  TensorPtr bag = state.bag;
  if (config.use_csa && params.csa) {
    const TensorPtr& kv = config.csa_use_current_queries ? q1 : state.q;
    bag = csa_update(tape, state.bag, kv, *params.csa);
  }

  TensorPtr q2 = q1;
  if (config.block_has_cross(block_index) && params.cross_attn) {
    AttentionMap map;
    q2 = layer_norm(tape,
                    query_residual_cross_attention(tape, q1, bag, *params.cross_attn, &map));
    if (diag) {
      diag->cross_blocks.push_back(block_index);
      diag->cross_maps.push_back(map);
    }
  }

  auto hidden = gelu(tape, add_row_broadcast(tape, matmul(tape, q2, params.ffn.W1),
                                             params.ffn.b1));
  auto ffn_out = add_row_broadcast(tape, matmul(tape, hidden, params.ffn.W2), params.ffn.b2);
  auto q3 = layer_norm(tape, add(tape, q2, ffn_out));
  return {q3, bag};
}

namespace {

TensorPtr run_blocks(Tape& tape, TensorPtr trunk_rows, const MivpgConfig& config,
                     const MivpgParams& params, ForwardDiagnostics* diag) {
  auto x = add_row_broadcast(tape, matmul(tape, trunk_rows, params.in_proj_W),
                             params.in_proj_b);
  if (config.use_ppeg && params.ppeg) x = ppeg(tape, x, *params.ppeg);
  if (diag) diag->bag_rows = x->rows();
  BlockState state{params.queries, x};
  for (std::size_t l = 0; l < config.num_blocks; ++l) {
    state = mivpg_block(tape, state, l, config, params.blocks[l], diag);
  }
  return state.q;
}

}  // namespace

std::pair<TensorPtr, ForwardDiagnostics> mivpg_forward(Tape& tape, const Bag& bag,
                                                       const MivpgConfig& config,
                                                       const MivpgParams& params) {
  bag.validate();
  ForwardDiagnostics diag;
  TensorPtr rows;
  if (bag.flat) {
    rows = bag.groups[0];
  } else {
    std::vector<TensorPtr> pooled(bag.groups.size());
    for (std::size_t i = 0; i < bag.groups.size(); ++i) {
      auto emb = pool_bag(tape, params.image_pool, bag.groups[i]);
      pooled[i] = emb.vector;
      diag.image_alphas.push_back(emb.weights ? emb.weights->data
                                              : std::vector<double>{});
    }
    rows = concat_rows(tape, pooled);
  }
  auto q = run_blocks(tape, rows, config, params, &diag);
  return {q, diag};
}

TensorPtr flatten_baseline_forward(Tape& tape, const Bag& bag, const MivpgConfig& config,
                                   const MivpgParams& params, ForwardDiagnostics* diag) {
  bag.validate();
  if (bag.flat) throw ContractError("flatten_baseline_forward: bag is already flat");
  auto rows = concat_rows(tape, bag.groups);
  MivpgConfig flat_config = config;
  flat_config.use_ppeg = false;   // the concatenated sequence carries no grid structure
  return run_blocks(tape, rows, flat_config, params, diag);
}

// ---- parameter snapshots ----------------------------------------------------

void save_params(const ParamSet& params, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "MIVPG-PARAMS v1\n" << params.items.size() << "\n";
  for (const auto& [name, t] : params.items) {
    out << name << " " << t->shape().size();
    for (std::size_t d : t->shape()) out << " " << d;
    out << "\n";
    for (std::size_t i = 0; i < t->data.size(); ++i) {
      if (i) out << " ";
      out << format_double(t->data[i]);
    }
    out << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

void load_params(ParamSet& params, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open params file: " + path);
  std::string magic, version;
  in >> magic >> version;
  if (magic != "MIVPG-PARAMS" || version != "v1") {
    throw IoError("params file has unknown header: " + path);
  }
  std::size_t count = 0;
  if (!(in >> count)) throw IoError("params file truncated: " + path);
  std::vector<std::pair<std::string, std::vector<double>>> loaded;
  for (std::size_t e = 0; e < count; ++e) {
    std::string name;
    std::size_t ndim = 0;
    if (!(in >> name >> ndim)) throw IoError("params file truncated: " + path);
    std::size_t total = 1;
    for (std::size_t i = 0; i < ndim; ++i) {
      std::size_t d = 0;
      if (!(in >> d)) throw IoError("params file truncated: " + path);
      total *= d;
    }
    std::vector<double> values(total);
    for (std::size_t i = 0; i < total; ++i) {
      if (!(in >> values[i])) throw IoError("params file truncated: " + path);
    }
    loaded.emplace_back(std::move(name), std::move(values));
  }

  if (loaded.size() != params.items.size()) {
    throw ConfigError("params file holds " + std::to_string(loaded.size()) +
                      " tensors, model expects " + std::to_string(params.items.size()));
  }
  for (auto& [name, values] : loaded) {
    auto t = params.find(name);
    if (!t) throw ConfigError("params file names unknown tensor '" + name + "'");
    if (t->size() != values.size()) {
      throw ConfigError("params tensor '" + name + "' has " +
                        std::to_string(values.size()) + " values, model expects " +
                        std::to_string(t->size()));
    }
    t->data = std::move(values);
  }
}

}  // namespace mivpg
