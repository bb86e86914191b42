#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdraft/maskgen.hpp"
#include "pdraft/model/target.hpp"

namespace pdraft {

// How MTP slots build their hidden input from h_shared.
enum class Variant {
  shared,          // h_shared
  depth_embed,     // h_shared + e_depth[g]
  ntp_proj_depth,  // h_shared + proj(h_ntp) + e_depth[g]
  ntp_proj,        // h_shared + proj(h_ntp)
  regularized,     // h_shared + alpha * dropout(proj(h_ntp))
};

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);
bool uses_depth_embedding(Variant v);
bool uses_ntp_projection(Variant v);

struct DrafterConfig {
  int vocab = 512;
  int dim = 128;
  int layers = 4;
  int heads = 4;
  int mlp_hidden = 512;
  double rope_base = 10000.0;
  int fused_width = 256;
  // K_train: number of prediction depths the drafter is trained with.
  int depth_slots = 4;
  Variant variant = Variant::shared;
  double alpha_init = 0.1;
  double dropout = 0.1;
  bool unfreeze_embeddings = true;
  // MTP slots reuse the NTP input combiner when true.
  bool shared_combiner = true;

  int mask_token() const { return vocab - 1; }
  LayerShape shape() const { return LayerShape{dim, heads, mlp_hidden, rope_base, layers}; }
  void validate() const;
};

void to_json(nlohmann::json& j, const DrafterConfig& c);
void from_json(const nlohmann::json& j, DrafterConfig& c);

struct DrafterModel {
  DrafterConfig config;
  ParamStore params;

  std::size_t embedding = 0;
  std::size_t mask_embedding = 0;
  std::size_t h_shared = 0;
  std::size_t fusion_w = 0;
  std::size_t fusion_b = 0;
  std::size_t combine_we = 0;
  std::size_t combine_wh = 0;
  std::size_t combine_b = 0;
  std::optional<std::size_t> mtp_combine_we;
  std::optional<std::size_t> mtp_combine_wh;
  std::optional<std::size_t> mtp_combine_b;
  std::optional<std::size_t> depth_embed;
  std::optional<std::size_t> ntp_proj_w;
  std::optional<std::size_t> ntp_proj_b;
  std::optional<std::size_t> alpha;
  std::vector<LayerParams> layers;
  std::size_t norm_gain = 0;
  std::size_t norm_bias = 0;
  std::size_t head = 0;

  // When `target` is given and widths agree, the token table starts as a copy
  // of the target's embedding.
  static DrafterModel init(const DrafterConfig& config, std::uint64_t seed, const TargetModel* target = nullptr);
  static DrafterModel from_params(const DrafterConfig& config, ParamStore params);

  KVCache make_cache() const { return KVCache(config.layers, config.heads, config.dim / config.heads); }
  double alpha_value() const;
};

// One forward micro-batch of drafter slots.
//
// Depth-0 slots take their token embedding plus the projected fused target
// hidden from `fused`; deeper slots take the mask-token embedding plus the
// variant hidden, where `fused` holds the fused input of the slot's NTP root
// (used by the projection variants). Rows flagged in `direct` take
// `direct_hidden` as-is instead, which is how autoregressive drafting feeds
// back its own hidden vector.
struct DraftBatch {
  std::vector<Slot> slots;
  std::vector<int> tokens;
  std::vector<int> positions;
  Tensor2D fused;
  AssembledMask mask;
  std::vector<int> labels;
  std::vector<double> loss_weight;
  std::vector<char> direct;
  Tensor2D direct_hidden;
  bool dropout_active = false;
  std::uint64_t dropout_seed = 0;

  std::size_t size() const { return slots.size(); }
  std::size_t loss_count() const;
};

struct DrafterGraph {
  Var logits;
  Var hidden;  // residual stream after the last layer, before the final norm
};

// MTP hidden inputs, one row per slot in `slots` (all depth >= 1). Row i of
// h_ntp is the projected fused input of that slot's NTP root; it is ignored
// by the variants that do not project it.
Var build_variant_hidden(Binding& bind, const DrafterModel& model, Var h_ntp, std::span<const Slot> slots,
                         bool dropout_active, std::uint64_t dropout_seed);

// Cached keys, when a cache is given, are depth-0 slots at positions
// 0..cache.length-1 and precede the batch's own keys. Rows listed in
// `cache_rows` are appended to the cache and must sit at consecutive
// positions starting at cache.length.
DrafterGraph drafter_forward(Binding& bind, const DrafterModel& model, const DraftBatch& batch,
                             KVCache* cache = nullptr, std::span<const int> cache_rows = {});

struct DrafterOutput {
  Tensor2D logits;
  Tensor2D hidden;
};
DrafterOutput drafter_eval(const DrafterModel& model, const DraftBatch& batch, KVCache* cache = nullptr,
                           std::span<const int> cache_rows = {});

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace pdraft
