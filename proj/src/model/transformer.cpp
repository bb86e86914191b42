#include "pdraft/model/transformer.hpp"

#include <cmath>

namespace pdraft {

KVCache::KVCache(int n_layers, int heads, int head_dim) {
  layers.resize(static_cast<std::size_t>(n_layers));
  for (auto& l : layers) {
    l.keys.assign(static_cast<std::size_t>(heads), Tensor2D(0, head_dim));
    l.values.assign(static_cast<std::size_t>(heads), Tensor2D(0, head_dim));
  }
}

void KVCache::truncate(int n) {
  if (n > length) throw RangeError("KVCache::truncate beyond current length");
  for (auto& l : layers) {
    for (auto& k : l.keys) k.conservativeResize(n, Eigen::NoChange);
    for (auto& v : l.values) v.conservativeResize(n, Eigen::NoChange);
  }
  length = n;
}

Tensor2D gaussian(int rows, int cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor2D m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

LayerParams add_layer_params(ParamStore& store, const std::string& prefix, const LayerShape& shape,
                             std::mt19937_64& rng) {
  const int d = shape.dim;
  const int dh = shape.head_dim();
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std = 1.0 / std::sqrt(static_cast<double>(d) * 2.0 * shape.n_layers);
  LayerParams lp;
  lp.ln1_gain = store.add(prefix + ".ln1.gain", Tensor2D::Ones(1, d));
  lp.ln1_bias = store.add(prefix + ".ln1.bias", Tensor2D::Zero(1, d));
  for (int h = 0; h < shape.heads; ++h) {
    const std::string hp = prefix + ".attn.h" + std::to_string(h);
    lp.wq.push_back(store.add(hp + ".wq", gaussian(d, dh, in_std, rng)));
    lp.wk.push_back(store.add(hp + ".wk", gaussian(d, dh, in_std, rng)));
    lp.wv.push_back(store.add(hp + ".wv", gaussian(d, dh, in_std, rng)));
    lp.wo.push_back(store.add(hp + ".wo", gaussian(dh, d, out_std, rng)));
  }
  lp.ln2_gain = store.add(prefix + ".ln2.gain", Tensor2D::Ones(1, d));
  lp.ln2_bias = store.add(prefix + ".ln2.bias", Tensor2D::Zero(1, d));
  lp.w1 = store.add(prefix + ".mlp.w1", gaussian(d, shape.mlp_hidden, in_std, rng));
  lp.b1 = store.add(prefix + ".mlp.b1", Tensor2D::Zero(1, shape.mlp_hidden));
  lp.w2 = store.add(prefix + ".mlp.w2",
                    gaussian(shape.mlp_hidden, d,
                             1.0 / std::sqrt(static_cast<double>(shape.mlp_hidden) * 2.0 * shape.n_layers), rng));
  lp.b2 = store.add(prefix + ".mlp.b2", Tensor2D::Zero(1, d));
  return lp;
}

Var decoder_layer(Binding& bind, const LayerParams& lp, const LayerShape& shape, Var x,
                  std::span<const int> positions, const BitMatrix& mask, const CacheWrite& cache) {
  Tape& tape = bind.tape();
  const int cached = cache.cache ? cache.cache->length : 0;
  if (mask.rows() != static_cast<std::size_t>(x.rows()) ||
      mask.cols() != static_cast<std::size_t>(cached + x.rows())) {
    throw IntegrityError("decoder_layer: mask is " + shape_string(mask.rows(), mask.cols()) + " for " +
                         std::to_string(x.rows()) + " rows over " + std::to_string(cached) + " cached keys");
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(shape.head_dim()));
  Var h = layer_norm(x, bind(lp.ln1_gain), bind(lp.ln1_bias));
  Var attn_out{};
  bool have_out = false;
  for (int head = 0; head < shape.heads; ++head) {
    const auto hi = static_cast<std::size_t>(head);
    Var q = rope(matmul(h, bind(lp.wq[hi])), positions, shape.rope_base);
    Var k = rope(matmul(h, bind(lp.wk[hi])), positions, shape.rope_base);
    Var v = matmul(h, bind(lp.wv[hi]));
    Var k_all = k;
    Var v_all = v;
    if (cached > 0) {
      const auto& layer_cache = cache.cache->layers[static_cast<std::size_t>(cache.layer)];
      k_all = vstack(tape.constant(layer_cache.keys[hi]), k);
      v_all = vstack(tape.constant(layer_cache.values[hi]), v);
    }
    Var probs = softmax_masked(scale(matmul_nt(q, k_all), inv_sqrt), mask);
    Var out = matmul(matmul(probs, v_all), bind(lp.wo[hi]));
    attn_out = have_out ? add(attn_out, out) : out;
    have_out = true;
    if (cache.cache && !cache.rows.empty()) {
      auto& layer_cache = cache.cache->layers[static_cast<std::size_t>(cache.layer)];
      Tensor2D& kc = layer_cache.keys[hi];
      Tensor2D& vc = layer_cache.values[hi];
      const Eigen::Index base = kc.rows();
      kc.conservativeResize(base + static_cast<Eigen::Index>(cache.rows.size()), Eigen::NoChange);
      vc.conservativeResize(base + static_cast<Eigen::Index>(cache.rows.size()), Eigen::NoChange);
      for (std::size_t r = 0; r < cache.rows.size(); ++r) {
        kc.row(base + static_cast<Eigen::Index>(r)) = k.value().row(cache.rows[r]);
        vc.row(base + static_cast<Eigen::Index>(r)) = v.value().row(cache.rows[r]);
      }
    }
  }
  x = add(x, attn_out);
  Var m = layer_norm(x, bind(lp.ln2_gain), bind(lp.ln2_bias));
  m = add_row(matmul(m, bind(lp.w1)), bind(lp.b1));
  m = add_row(matmul(silu(m), bind(lp.w2)), bind(lp.b2));
  return add(x, m);
}

}  // namespace pdraft
