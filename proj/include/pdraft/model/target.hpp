#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "pdraft/model/transformer.hpp"

namespace pdraft {

struct TargetConfig {
  int vocab = 512;
  int dim = 128;
  int layers = 4;
  int heads = 4;
  int mlp_hidden = 512;
  double rope_base = 10000.0;

  LayerShape shape() const { return LayerShape{dim, heads, mlp_hidden, rope_base, layers}; }
  // Distinct 0-indexed tap layers among {2, layers/2, layers-1}, ascending.
  std::vector<int> fusion_taps() const;
  int fused_width() const { return static_cast<int>(fusion_taps().size()) * dim; }
  void validate() const;
};

void to_json(nlohmann::json& j, const TargetConfig& c);
void from_json(const nlohmann::json& j, TargetConfig& c);

struct TargetModel {
  TargetConfig config;
  ParamStore params;
  std::size_t embedding = 0;
  std::vector<LayerParams> layers;
  std::size_t norm_gain = 0;
  std::size_t norm_bias = 0;
  std::size_t head = 0;

  static TargetModel init(const TargetConfig& config, std::uint64_t seed);
  // Rebinds parameter indices after loading a store from a checkpoint.
  static TargetModel from_params(const TargetConfig& config, ParamStore params);

  KVCache make_cache() const {
    return KVCache(config.layers, config.heads, config.dim / config.heads);
  }
};

struct TargetOutput {
  Tensor2D logits;  // one row per processed token
  Tensor2D fused;   // concatenated tap-layer outputs, fused_width() wide
};

// Differentiable forward used for target training. Positions start at 0.
struct TargetGraph {
  Var logits;
  Tensor2D fused;
};
TargetGraph target_graph(Binding& bind, const TargetModel& model, std::span<const int> tokens);

// Full causal recompute over `tokens`.
TargetOutput target_forward(const TargetModel& model, std::span<const int> tokens);

// Processes `tokens` at positions cache.length.. and appends them to the cache.
TargetOutput target_forward_cached(const TargetModel& model, KVCache& cache, std::span<const int> tokens);

}  // namespace pdraft
