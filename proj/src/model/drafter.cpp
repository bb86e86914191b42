#include "pdraft/model/drafter.hpp"

#include <cmath>
#include <numeric>

namespace pdraft {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::shared: return "shared";
    case Variant::depth_embed: return "depth_embed";
    case Variant::ntp_proj_depth: return "ntp_proj_depth";
    case Variant::ntp_proj: return "ntp_proj";
    case Variant::regularized: return "regularized";
  }
  return "shared";
}

Variant variant_from_string(const std::string& s) {
  if (s == "shared") return Variant::shared;
  if (s == "depth_embed") return Variant::depth_embed;
  if (s == "ntp_proj_depth") return Variant::ntp_proj_depth;
  if (s == "ntp_proj") return Variant::ntp_proj;
  if (s == "regularized") return Variant::regularized;
  throw ConfigError("unknown drafter variant: " + s);
}

bool uses_depth_embedding(Variant v) { return v == Variant::depth_embed || v == Variant::ntp_proj_depth; }

bool uses_ntp_projection(Variant v) {
  return v == Variant::ntp_proj || v == Variant::ntp_proj_depth || v == Variant::regularized;
}

void DrafterConfig::validate() const {
  if (vocab < 2) throw ConfigError("drafter: vocab must be >= 2");
  if (layers < 1) throw ConfigError("drafter: at least one layer");
  if (heads < 1 || dim % heads != 0) throw ConfigError("drafter: dim must be divisible by heads");
  if ((dim / heads) % 2 != 0) throw ConfigError("drafter: head dim must be even for rotary embedding");
  if (fused_width < 1) throw ConfigError("drafter: fused_width must be positive");
  if (depth_slots < 1) throw ConfigError("drafter: depth_slots (K_train) must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("drafter: dropout must lie in [0,1)");
}

void to_json(nlohmann::json& j, const DrafterConfig& c) {
  j = nlohmann::json{{"vocab", c.vocab},
                     {"dim", c.dim},
                     {"layers", c.layers},
                     {"heads", c.heads},
                     {"mlp_hidden", c.mlp_hidden},
                     {"rope_base", c.rope_base},
                     {"fused_width", c.fused_width},
                     {"depth_slots", c.depth_slots},
                     {"variant", to_string(c.variant)},
                     {"alpha_init", c.alpha_init},
                     {"dropout", c.dropout},
                     {"unfreeze_embeddings", c.unfreeze_embeddings},
                     {"shared_combiner", c.shared_combiner}};
}

void from_json(const nlohmann::json& j, DrafterConfig& c) {
  c.vocab = j.value("vocab", c.vocab);
  c.dim = j.value("dim", c.dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.fused_width = j.value("fused_width", c.fused_width);
  c.depth_slots = j.value("depth_slots", c.depth_slots);
  if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
  c.alpha_init = j.value("alpha_init", c.alpha_init);
  c.dropout = j.value("dropout", c.dropout);
  c.unfreeze_embeddings = j.value("unfreeze_embeddings", c.unfreeze_embeddings);
  c.shared_combiner = j.value("shared_combiner", c.shared_combiner);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

namespace {

void bind_indices(DrafterModel& m) {
  const ParamStore& p = m.params;
  const DrafterConfig& c = m.config;
  m.embedding = p.index_of("drafter.embedding");
  m.mask_embedding = p.index_of("drafter.mask_embedding");
  m.h_shared = p.index_of("drafter.h_shared");
  m.fusion_w = p.index_of("drafter.fusion.w");
  m.fusion_b = p.index_of("drafter.fusion.b");
  m.combine_we = p.index_of("drafter.combine.we");
  m.combine_wh = p.index_of("drafter.combine.wh");
  m.combine_b = p.index_of("drafter.combine.b");
  if (!c.shared_combiner) {
    m.mtp_combine_we = p.index_of("drafter.combine_mtp.we");
    m.mtp_combine_wh = p.index_of("drafter.combine_mtp.wh");
    m.mtp_combine_b = p.index_of("drafter.combine_mtp.b");
  }
  if (uses_depth_embedding(c.variant)) m.depth_embed = p.index_of("drafter.depth_embed");
  if (uses_ntp_projection(c.variant)) {
    m.ntp_proj_w = p.index_of("drafter.ntp_proj.w");
    m.ntp_proj_b = p.index_of("drafter.ntp_proj.b");
  }
  if (c.variant == Variant::regularized) m.alpha = p.index_of("drafter.alpha");
  m.layers.clear();
  for (int l = 0; l < c.layers; ++l) {
    const std::string pre = "drafter.layer" + std::to_string(l);
    LayerParams lp;
    lp.ln1_gain = p.index_of(pre + ".ln1.gain");
    lp.ln1_bias = p.index_of(pre + ".ln1.bias");
    for (int h = 0; h < c.heads; ++h) {
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
  m.norm_gain = p.index_of("drafter.norm.gain");
  m.norm_bias = p.index_of("drafter.norm.bias");
  m.head = p.index_of("drafter.head");
}

}  // namespace

DrafterModel DrafterModel::init(const DrafterConfig& config, std::uint64_t seed, const TargetModel* target) {
  config.validate();
  std::mt19937_64 rng(seed);
  const int d = config.dim;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  DrafterModel m;
  m.config = config;
  ParamStore& p = m.params;

  Tensor2D table = gaussian(config.vocab, d, 1.0, rng);
  if (target != nullptr && target->config.dim == d && target->config.vocab == config.vocab) {
    table = target->params[target->embedding].value;
  }
  p.add("drafter.embedding", std::move(table), config.unfreeze_embeddings);
  p.add("drafter.mask_embedding", gaussian(1, d, 1.0, rng));
  p.add("drafter.h_shared", gaussian(1, d, 1.0, rng));
  p.add("drafter.fusion.w", gaussian(config.fused_width, d, 1.0 / std::sqrt(static_cast<double>(config.fused_width)), rng));
  p.add("drafter.fusion.b", Tensor2D::Zero(1, d));
  p.add("drafter.combine.we", gaussian(d, d, in_std / std::sqrt(2.0), rng));
  p.add("drafter.combine.wh", gaussian(d, d, in_std / std::sqrt(2.0), rng));
  p.add("drafter.combine.b", Tensor2D::Zero(1, d));
  if (!config.shared_combiner) {
    p.add("drafter.combine_mtp.we", gaussian(d, d, in_std / std::sqrt(2.0), rng));
    p.add("drafter.combine_mtp.wh", gaussian(d, d, in_std / std::sqrt(2.0), rng));
    p.add("drafter.combine_mtp.b", Tensor2D::Zero(1, d));
  }
  if (uses_depth_embedding(config.variant)) {
    p.add("drafter.depth_embed", gaussian(config.depth_slots, d, 0.1, rng));
  }
  if (uses_ntp_projection(config.variant)) {
    p.add("drafter.ntp_proj.w", gaussian(d, d, in_std, rng));
    p.add("drafter.ntp_proj.b", Tensor2D::Zero(1, d));
  }
  if (config.variant == Variant::regularized) p.add("drafter.alpha", Tensor2D::Constant(1, 1, config.alpha_init));

  const LayerShape shape = config.shape();
  for (int l = 0; l < config.layers; ++l) add_layer_params(p, "drafter.layer" + std::to_string(l), shape, rng);
  p.add("drafter.norm.gain", Tensor2D::Ones(1, d));
  p.add("drafter.norm.bias", Tensor2D::Zero(1, d));
  p.add("drafter.head", gaussian(d, config.vocab, in_std, rng));
  bind_indices(m);
  return m;
}

DrafterModel DrafterModel::from_params(const DrafterConfig& config, ParamStore params) {
  config.validate();
  DrafterModel m;
  m.config = config;
  m.params = std::move(params);
  bind_indices(m);
  return m;
}

double DrafterModel::alpha_value() const {
  if (!alpha) return 0.0;
  return params[*alpha].value(0, 0);
}

std::size_t DraftBatch::loss_count() const {
  std::size_t n = 0;
  for (double w : loss_weight) n += w != 0.0 ? 1 : 0;
  return n;
}

Var build_variant_hidden(Binding& bind, const DrafterModel& model, Var h_ntp, std::span<const Slot> slots,
                         bool dropout_active, std::uint64_t dropout_seed) {
  const DrafterConfig& c = model.config;
  const std::vector<int> zeros(slots.size(), 0);
  Var h = gather_rows(bind(model.h_shared), zeros);
  if (uses_ntp_projection(c.variant)) {
    if (h_ntp.rows() != static_cast<Eigen::Index>(slots.size())) {
      throw DimensionError("build_variant_hidden: h_ntp has " + std::to_string(h_ntp.rows()) + " rows for " +
                           std::to_string(slots.size()) + " slots");
    }
    Var proj = add_row(matmul(h_ntp, bind(*model.ntp_proj_w)), bind(*model.ntp_proj_b));
    if (c.variant == Variant::regularized) {
      if (dropout_active && c.dropout > 0.0) {
        Tensor2D keep(proj.rows(), proj.cols());
        const double inv_keep = 1.0 / (1.0 - c.dropout);
        for (Eigen::Index i = 0; i < keep.rows(); ++i) {
          const Slot s = slots[static_cast<std::size_t>(i)];
          const std::uint64_t row_key =
              splitmix64(dropout_seed ^ splitmix64(static_cast<std::uint64_t>(s.pos) * 1315423911ull +
                                                   static_cast<std::uint64_t>(s.depth)));
          for (Eigen::Index j = 0; j < keep.cols(); ++j) {
            const double u = static_cast<double>(splitmix64(row_key + static_cast<std::uint64_t>(j)) >> 11) * 0x1.0p-53;
            keep(i, j) = u >= c.dropout ? inv_keep : 0.0;
          }
        }
        proj = hadamard_const(proj, keep);
      }
      proj = mul_scalar(proj, bind(*model.alpha));
    }
    h = add(h, proj);
  }
  if (uses_depth_embedding(c.variant)) {
    std::vector<int> depths;
    depths.reserve(slots.size());
    for (const Slot& s : slots) {
      if (s.depth >= c.depth_slots) {
        throw RangeError("build_variant_hidden: depth " + std::to_string(s.depth) + " >= K_train " +
                         std::to_string(c.depth_slots));
      }
      depths.push_back(s.depth);
    }
    h = add(h, gather_rows(bind(*model.depth_embed), depths));
  }
  return h;
}

namespace {

void validate_batch(const DrafterModel& model, const DraftBatch& b) {
  const std::size_t n = b.slots.size();
  if (b.mask.order != b.slots) throw IntegrityError("drafter_forward: mask slot order differs from batch slots");
  if (b.mask.bits.rows() != n || b.mask.bits.cols() != n) {
    throw IntegrityError("drafter_forward: mask is not square over the batch slots");
  }
  if (b.tokens.size() != n || b.positions.size() != n || b.fused.rows() != static_cast<Eigen::Index>(n)) {
    throw DimensionError("drafter_forward: per-slot inputs do not match the slot count");
  }
  if (b.fused.cols() != model.config.fused_width) {
    throw DimensionError("drafter_forward: fused width " + std::to_string(b.fused.cols()) + " != " +
                         std::to_string(model.config.fused_width));
  }
  if (!b.direct.empty() && (b.direct.size() != n || b.direct_hidden.rows() != static_cast<Eigen::Index>(n) ||
                            b.direct_hidden.cols() != model.config.dim)) {
    throw DimensionError("drafter_forward: direct hidden inputs do not match the slot count");
  }
  for (int t : b.tokens) {
    if (t < 0 || t >= model.config.vocab) throw VocabError("drafter: token id " + std::to_string(t) + " outside vocabulary");
  }
}

}  // namespace

DrafterGraph drafter_forward(Binding& bind, const DrafterModel& model, const DraftBatch& batch, KVCache* cache,
                             std::span<const int> cache_rows) {
  validate_batch(model, batch);
  const DrafterConfig& c = model.config;
  Tape& tape = bind.tape();
  const int n = static_cast<int>(batch.size());
  const int cached = cache ? cache->length : 0;
  for (std::size_t r = 0; r < cache_rows.size(); ++r) {
    const int row = cache_rows[r];
    if (!cache || row < 0 || row >= n || batch.positions[static_cast<std::size_t>(row)] != cached + static_cast<int>(r)) {
      throw IntegrityError("drafter_forward: cache rows must be consecutive positions from the cache length");
    }
  }

  std::vector<int> ids(batch.tokens);
  for (int& t : ids) {
    if (t == c.mask_token()) t = c.vocab;
  }
  Var table = vstack(bind(model.embedding), bind(model.mask_embedding));
  Var emb = gather_rows(table, ids);

  Var hf = add_row(matmul(tape.constant(batch.fused), bind(model.fusion_w)), bind(model.fusion_b));

  std::vector<int> mtp_rows;
  std::vector<Slot> mtp_slots;
  std::vector<int> direct_rows;
  for (int i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    if (!batch.direct.empty() && batch.direct[ui]) {
      direct_rows.push_back(i);
    } else if (batch.slots[ui].depth > 0) {
      mtp_rows.push_back(i);
      mtp_slots.push_back(batch.slots[ui]);
    }
  }

  Var hidden_in = hf;
  if (!mtp_rows.empty() || !direct_rows.empty()) {
    std::vector<int> pick(static_cast<std::size_t>(n));
    std::iota(pick.begin(), pick.end(), 0);
    Var source = hf;
    if (!mtp_rows.empty()) {
      Var hm = build_variant_hidden(bind, model, gather_rows(hf, mtp_rows), mtp_slots, batch.dropout_active,
                                    batch.dropout_seed);
      for (std::size_t k = 0; k < mtp_rows.size(); ++k) pick[static_cast<std::size_t>(mtp_rows[k])] = n + static_cast<int>(k);
      source = vstack(source, hm);
    }
    if (!direct_rows.empty()) {
      const int base = static_cast<int>(source.rows());
      Tensor2D dh(static_cast<Eigen::Index>(direct_rows.size()), c.dim);
      for (std::size_t k = 0; k < direct_rows.size(); ++k) {
        dh.row(static_cast<Eigen::Index>(k)) = batch.direct_hidden.row(direct_rows[k]);
        pick[static_cast<std::size_t>(direct_rows[k])] = base + static_cast<int>(k);
      }
      source = vstack(source, tape.constant(std::move(dh)));
    }
    hidden_in = gather_rows(source, pick);
  }

  Var x = add_row(add(matmul(emb, bind(model.combine_we)), matmul(hidden_in, bind(model.combine_wh))),
                  bind(model.combine_b));
  if (!c.shared_combiner && !mtp_rows.empty()) {
    Var xm = add_row(add(matmul(gather_rows(emb, mtp_rows), bind(*model.mtp_combine_we)),
                         matmul(gather_rows(hidden_in, mtp_rows), bind(*model.mtp_combine_wh))),
                     bind(*model.mtp_combine_b));
    std::vector<int> pick(static_cast<std::size_t>(n));
    std::iota(pick.begin(), pick.end(), 0);
    for (std::size_t k = 0; k < mtp_rows.size(); ++k) pick[static_cast<std::size_t>(mtp_rows[k])] = n + static_cast<int>(k);
    x = gather_rows(vstack(x, xm), pick);
  }

  BitMatrix mask = batch.mask.bits;
  if (cached > 0) {
    BitMatrix full(static_cast<std::size_t>(n), static_cast<std::size_t>(cached + n));
    for (int i = 0; i < n; ++i) {
      const Slot q = batch.slots[static_cast<std::size_t>(i)];
      for (int p = 0; p < cached; ++p) {
        if (mask_allowed(q, Slot{p, 0})) full.set(static_cast<std::size_t>(i), static_cast<std::size_t>(p));
      }
      for (int j = 0; j < n; ++j) {
        if (batch.mask.bits.test(static_cast<std::size_t>(i), static_cast<std::size_t>(j))) {
          full.set(static_cast<std::size_t>(i), static_cast<std::size_t>(cached + j));
        }
      }
    }
    mask = std::move(full);
  }

  const LayerShape shape = c.shape();
  for (int l = 0; l < c.layers; ++l) {
    CacheWrite cw;
    if (cache) cw = CacheWrite{cache, l, cache_rows};
    x = decoder_layer(bind, model.layers[static_cast<std::size_t>(l)], shape, x, batch.positions, mask, cw);
  }
  if (cache) cache->length += static_cast<int>(cache_rows.size());
  Var normed = layer_norm(x, bind(model.norm_gain), bind(model.norm_bias));
  return DrafterGraph{matmul(normed, bind(model.head)), x};
}

DrafterOutput drafter_eval(const DrafterModel& model, const DraftBatch& batch, KVCache* cache,
                           std::span<const int> cache_rows) {
  Tape tape(false);
  Binding bind(tape, model.params);
  DrafterGraph g = drafter_forward(bind, model, batch, cache, cache_rows);
  return DrafterOutput{g.logits.value(), g.hidden.value()};
}

}  // namespace pdraft
