#pragma once

// Tiny models and examples shared by the unit tests.

#include <random>
#include <vector>

#include "pdraft/model/drafter.hpp"
#include "pdraft/model/target.hpp"
#include "pdraft/trainer.hpp"

namespace fixture {

inline pdraft::TargetConfig tiny_target_config(int vocab = 13) {
  pdraft::TargetConfig c;
  c.vocab = vocab;
  c.dim = 8;
  c.layers = 4;
  c.heads = 2;
  c.mlp_hidden = 16;
  return c;
}

inline pdraft::DrafterConfig tiny_drafter_config(const pdraft::TargetConfig& t, pdraft::Variant v, int depths = 3,
                                                 int layers = 2) {
  pdraft::DrafterConfig c;
  c.vocab = t.vocab;
  c.dim = 8;
  c.layers = layers;
  c.heads = 2;
  c.mlp_hidden = 12;
  c.fused_width = t.fused_width();
  c.depth_slots = depths;
  c.variant = v;
  c.dropout = 0.25;
  return c;
}

inline std::vector<int> random_tokens(int n, int vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, vocab - 2);
  std::vector<int> t(static_cast<std::size_t>(n));
  for (int& x : t) x = pick(rng);
  return t;
}

inline const std::vector<pdraft::Variant>& all_variants() {
  static const std::vector<pdraft::Variant> v = {pdraft::Variant::shared, pdraft::Variant::depth_embed,
                                                 pdraft::Variant::ntp_proj_depth, pdraft::Variant::ntp_proj,
                                                 pdraft::Variant::regularized};
  return v;
}

}  // namespace fixture
