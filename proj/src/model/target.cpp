#include "pdraft/model/target.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pdraft {

std::vector<int> TargetConfig::fusion_taps() const {
  std::vector<int> taps = {2, layers / 2, layers - 1};
  std::sort(taps.begin(), taps.end());
  taps.erase(std::unique(taps.begin(), taps.end()), taps.end());
  return taps;
}

void TargetConfig::validate() const {
  if (vocab < 2) throw ConfigError("target: vocab must be >= 2");
  if (layers < 3) throw ConfigError("target: at least 3 layers are needed for the fusion taps");
  if (heads < 1 || dim % heads != 0) throw ConfigError("target: dim must be divisible by heads");
  if ((dim / heads) % 2 != 0) throw ConfigError("target: head dim must be even for rotary embedding");
  if (mlp_hidden < 1) throw ConfigError("target: mlp_hidden must be positive");
}

void to_json(nlohmann::json& j, const TargetConfig& c) {
  j = nlohmann::json{{"vocab", c.vocab},   {"dim", c.dim},
                     {"layers", c.layers}, {"heads", c.heads},
                     {"mlp_hidden", c.mlp_hidden}, {"rope_base", c.rope_base}};
}

void from_json(const nlohmann::json& j, TargetConfig& c) {
  c.vocab = j.value("vocab", c.vocab);
  c.dim = j.value("dim", c.dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.rope_base = j.value("rope_base", c.rope_base);
}

namespace {

void bind_indices(TargetModel& m) {
  const auto& p = m.params;
  m.embedding = p.index_of("target.embedding");
  m.layers.clear();
  for (int l = 0; l < m.config.layers; ++l) {
    const std::string pre = "target.layer" + std::to_string(l);
    LayerParams lp;
    lp.ln1_gain = p.index_of(pre + ".ln1.gain");
    lp.ln1_bias = p.index_of(pre + ".ln1.bias");
    for (int h = 0; h < m.config.heads; ++h) {
      const std::string hp = pre + ".attn.h" + std::to_string(h);
      lp.wq.push_back(p.index_of(hp + ".wq"));
      lp.wk.push_back(p.index_of(hp + ".wk"));
      lp.wv.push_back(p.index_of(hp + ".wv"));
      lp.wo.push_back(p.index_of(hp + ".wo"));
    }
    lp.ln2_gain = p.index_of(pre + ".ln2.gain");
    lp.ln2_bias = p.index_of(pre + ".ln2.bias");
    lp.w1 = p.index_of(pre + ".mlp.w1");
    lp.b1 = p.index_of(pre + ".mlp.b1");
    lp.w2 = p.index_of(pre + ".mlp.w2");
    lp.b2 = p.index_of(pre + ".mlp.b2");
    m.layers.push_back(std::move(lp));
  }
  m.norm_gain = p.index_of("target.norm.gain");
  m.norm_bias = p.index_of("target.norm.bias");
  m.head = p.index_of("target.head");
}

BitMatrix causal_mask(int cached, int rows) {
  BitMatrix m(static_cast<std::size_t>(rows), static_cast<std::size_t>(cached + rows));
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j <= cached + i; ++j) m.set(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
  }
  return m;
}

struct Forward {
  Var logits;
  Tensor2D fused;
};

Forward run(Binding& bind, const TargetModel& model, std::span<const int> tokens, KVCache* cache) {
  const TargetConfig& c = model.config;
  for (int t : tokens) {
    if (t < 0 || t >= c.vocab) throw VocabError("target: token id " + std::to_string(t) + " outside vocabulary");
  }
  const int start = cache ? cache->length : 0;
  const int n = static_cast<int>(tokens.size());
  std::vector<int> positions(static_cast<std::size_t>(n));
  std::iota(positions.begin(), positions.end(), start);
  std::vector<int> all_rows(static_cast<std::size_t>(n));
  std::iota(all_rows.begin(), all_rows.end(), 0);
  const BitMatrix mask = causal_mask(start, n);
  const LayerShape shape = c.shape();
  const std::vector<int> taps = c.fusion_taps();

  Forward out;
  out.fused.resize(n, static_cast<Eigen::Index>(taps.size()) * c.dim);
  Var x = gather_rows(bind(model.embedding), tokens);
  for (int l = 0; l < c.layers; ++l) {
    CacheWrite cw;
    if (cache) cw = CacheWrite{cache, l, all_rows};
    x = decoder_layer(bind, model.layers[static_cast<std::size_t>(l)], shape, x, positions, mask, cw);
    for (std::size_t t = 0; t < taps.size(); ++t) {
      if (taps[t] == l) out.fused.middleCols(static_cast<Eigen::Index>(t) * c.dim, c.dim) = x.value();
    }
  }
  if (cache) cache->length += n;
  Var h = layer_norm(x, bind(model.norm_gain), bind(model.norm_bias));
  out.logits = matmul(h, bind(model.head));
  return out;
}

}  // namespace

TargetModel TargetModel::init(const TargetConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  TargetModel m;
  m.config = config;
  m.params.add("target.embedding", gaussian(config.vocab, config.dim, 1.0, rng));
  const LayerShape shape = config.shape();
  for (int l = 0; l < config.layers; ++l) {
    add_layer_params(m.params, "target.layer" + std::to_string(l), shape, rng);
  }
  m.params.add("target.norm.gain", Tensor2D::Ones(1, config.dim));
  m.params.add("target.norm.bias", Tensor2D::Zero(1, config.dim));
  m.params.add("target.head", gaussian(config.dim, config.vocab, 1.0 / std::sqrt(static_cast<double>(config.dim)), rng));
  bind_indices(m);
  return m;
}

TargetModel TargetModel::from_params(const TargetConfig& config, ParamStore params) {
  config.validate();
  TargetModel m;
  m.config = config;
  m.params = std::move(params);
  bind_indices(m);
  return m;
}

TargetGraph target_graph(Binding& bind, const TargetModel& model, std::span<const int> tokens) {
  Forward f = run(bind, model, tokens, nullptr);
  return TargetGraph{f.logits, std::move(f.fused)};
}

TargetOutput target_forward(const TargetModel& model, std::span<const int> tokens) {
  Tape tape(false);
  Binding bind(tape, model.params);
  Forward f = run(bind, model, tokens, nullptr);
  return TargetOutput{f.logits.value(), std::move(f.fused)};
}

TargetOutput target_forward_cached(const TargetModel& model, KVCache& cache, std::span<const int> tokens) {
  Tape tape(false);
  Binding bind(tape, model.params);
  Forward f = run(bind, model, tokens, &cache);
  return TargetOutput{f.logits.value(), std::move(f.fused)};
}

}  // namespace pdraft
