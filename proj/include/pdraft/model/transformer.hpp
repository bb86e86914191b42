#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pdraft/numerics/params.hpp"

namespace pdraft {

// Per-layer, per-head rotated keys and values of already-processed rows.
struct KVCache {
  struct Layer {
    std::vector<Tensor2D> keys;
    std::vector<Tensor2D> values;
  };
  std::vector<Layer> layers;
  int length = 0;

  KVCache() = default;
  KVCache(int n_layers, int heads, int head_dim);

  void truncate(int n);
};

struct LayerParams {
  std::size_t ln1_gain = 0;
  std::size_t ln1_bias = 0;
  std::vector<std::size_t> wq;
  std::vector<std::size_t> wk;
  std::vector<std::size_t> wv;
  std::vector<std::size_t> wo;
  std::size_t ln2_gain = 0;
  std::size_t ln2_bias = 0;
  std::size_t w1 = 0;
  std::size_t b1 = 0;
  std::size_t w2 = 0;
  std::size_t b2 = 0;
};

struct LayerShape {
  int dim = 0;
  int heads = 0;
  int mlp_hidden = 0;
  double rope_base = 10000.0;
  int n_layers = 1;

  int head_dim() const { return dim / heads; }
};

Tensor2D gaussian(int rows, int cols, double stddev, std::mt19937_64& rng);

LayerParams add_layer_params(ParamStore& store, const std::string& prefix, const LayerShape& shape,
                             std::mt19937_64& rng);

struct CacheWrite {
  KVCache* cache = nullptr;
  int layer = 0;
  // Rows of this call whose keys/values are appended after the call.
  std::span<const int> rows;
};

// Pre-norm decoder layer: x + attn(ln(x)), then + mlp(ln(x)), SiLU MLP.
// `mask` is rows x (cached + rows); cached keys come first.
Var decoder_layer(Binding& bind, const LayerParams& lp, const LayerShape& shape, Var x,
                  std::span<const int> positions, const BitMatrix& mask, const CacheWrite& cache);

}  // namespace pdraft
