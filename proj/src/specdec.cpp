#include "pdraft/specdec.hpp"

#include <algorithm>
#include <ostream>

namespace pdraft {

std::string to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::parallel: return "parallel";
    case DecodeMode::ar: return "ar";
    case DecodeMode::target_only: return "target_only";
  }
  return "?";
}

DecodeMode decode_mode_from_string(const std::string& s) {
  if (s == "parallel") return DecodeMode::parallel;
  if (s == "ar") return DecodeMode::ar;
  if (s == "target_only" || s == "target-only") return DecodeMode::target_only;
  throw ConfigError("unknown decode mode '" + s + "'");
}

double SpecStats::acceptance_length() const {
  return iterations > 0 ? static_cast<double>(generated) / iterations : 0.0;
}

nlohmann::json SpecStats::to_json() const {
  return nlohmann::json{{"iterations", iterations},
                        {"generated", generated},
                        {"acceptance_length", acceptance_length()},
                        {"drafter_passes", drafter_passes},
                        {"target_passes", target_passes},
                        {"accepted", accepted}};
}

void CostModel::validate() const {
  if (!(t_target > 0.0) || !(draft_fixed >= 0.0) || !(draft_per_layer >= 0.0) || !(per_token_overhead >= 0.0)) {
    throw ConfigError("cost model: t_target must be positive and the other costs non-negative");
  }
}

void to_json(nlohmann::json& j, const CostModel& c) {
  j = nlohmann::json{{"t_target", c.t_target},
                     {"draft_fixed", c.draft_fixed},
                     {"draft_per_layer", c.draft_per_layer},
                     {"per_token_overhead", c.per_token_overhead}};
}

void from_json(const nlohmann::json& j, CostModel& c) {
  c.t_target = j.value("t_target", c.t_target);
  c.draft_fixed = j.value("draft_fixed", c.draft_fixed);
  c.draft_per_layer = j.value("draft_per_layer", c.draft_per_layer);
  c.per_token_overhead = j.value("per_token_overhead", c.per_token_overhead);
}

double simulate_cost(const SpecStats& stats, const CostModel& cm, int drafter_layers) {
  cm.validate();
  const double time = static_cast<double>(stats.target_passes) * cm.t_target +
                      static_cast<double>(stats.drafter_passes) * cm.t_draft(drafter_layers) +
                      static_cast<double>(stats.generated) * cm.per_token_overhead;
  return time > 0.0 ? static_cast<double>(stats.generated) / time : 0.0;
}

DecodeState start_decode(const TargetModel& target, const DrafterModel* drafter, std::span<const int> prompt) {
  if (prompt.empty()) throw DomainError("decode: prompt must contain at least one token");
  DecodeState s;
  s.tokens.assign(prompt.begin(), prompt.end());
  s.target_cache = target.make_cache();
  if (drafter) s.drafter_cache = drafter->make_cache();
  if (prompt.size() > 1) {
    s.fused = target_forward_cached(target, s.target_cache, prompt.first(prompt.size() - 1)).fused;
  } else {
    s.fused = Tensor2D::Zero(0, target.config.fused_width());
  }
  return s;
}

std::vector<Slot> proposal_slots(int cached, int last, int k) {
  if (cached < 0 || cached > last) throw IntegrityError("proposal: drafter cache runs past the committed tokens");
  if (k < 1) throw DomainError("proposal: at least one draft token is required");
  std::vector<Slot> slots;
  for (int p = cached; p <= last; ++p) slots.push_back(Slot{p, 0});
  for (int j = 1; j < k; ++j) slots.push_back(Slot{last + j, j});
  return slots;
}

namespace {

void check_draft_depth(const DrafterModel& drafter, int k) {
  if (k < 1) throw DomainError("proposal: k_infer must be >= 1");
  if (k > drafter.config.depth_slots) {
    throw ConfigError("proposal: k_infer " + std::to_string(k) + " exceeds the drafter's trained depth " +
                      std::to_string(drafter.config.depth_slots));
  }
}

// Slots in `slots` whose depth is 0 take committed tokens; deeper ones the
// mask token. All take the fused hidden preceding their root position.
DraftBatch proposal_batch(const DecodeState& state, const DrafterModel& drafter, std::vector<Slot> slots) {
  DraftBatch b;
  const std::size_t n = slots.size();
  b.tokens.resize(n);
  b.positions.resize(n);
  b.labels.assign(n, 0);
  b.loss_weight.assign(n, 0.0);
  b.fused = Tensor2D::Zero(static_cast<Eigen::Index>(n), state.fused.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const Slot s = slots[i];
    b.tokens[i] = s.depth == 0 ? state.tokens[static_cast<std::size_t>(s.pos)] : drafter.config.mask_token();
    b.positions[i] = s.pos;
    const int root = s.pos - s.depth;
    if (root >= 1) {
      if (root - 1 >= state.fused.rows()) throw IntegrityError("proposal: fused hidden missing for a committed token");
      b.fused.row(static_cast<Eigen::Index>(i)) = state.fused.row(root - 1);
    }
  }
  b.mask = build_direct(slots);
  b.slots = std::move(slots);
  return b;
}

std::vector<int> iota_rows(int n) {
  std::vector<int> rows(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = i;
  return rows;
}

}  // namespace

std::vector<int> propose_parallel(DecodeState& state, const DrafterModel& drafter, int k, SpecStats* stats) {
  if (state.tokens.empty()) throw DomainError("proposal: no committed tokens");
  check_draft_depth(drafter, k);
  const int c = state.last();
  const int cached = state.drafter_cache.length;
  const DraftBatch batch = proposal_batch(state, drafter, proposal_slots(cached, c, k));
  const int ntp_row = c - cached;
  const DrafterOutput out = drafter_eval(drafter, batch, &state.drafter_cache, iota_rows(ntp_row + 1));
  if (stats) ++stats->drafter_passes;
  std::vector<int> drafts;
  for (int j = 0; j < k; ++j) drafts.push_back(argmax_row(out.logits.row(ntp_row + j)));
  return drafts;
}

std::vector<int> propose_ar(DecodeState& state, const DrafterModel& drafter, int k, SpecStats* stats) {
  if (state.tokens.empty()) throw DomainError("proposal: no committed tokens");
  check_draft_depth(drafter, k);
  const int c = state.last();
  const int cached = state.drafter_cache.length;
  const DraftBatch first = proposal_batch(state, drafter, proposal_slots(cached, c, 1));
  const int ntp_row = c - cached;
  DrafterOutput out = drafter_eval(drafter, first, &state.drafter_cache, iota_rows(ntp_row + 1));
  if (stats) ++stats->drafter_passes;
  std::vector<int> drafts{argmax_row(out.logits.row(ntp_row))};
  Tensor2D hidden = out.hidden.row(ntp_row);
  for (int j = 1; j < k; ++j) {
    DraftBatch step;
    step.slots = {Slot{c + j, 0}};
    step.tokens = {drafts.back()};
    step.positions = {c + j};
    step.labels = {0};
    step.loss_weight = {0.0};
    step.fused = Tensor2D::Zero(1, state.fused.cols());
    step.direct = {1};
    step.direct_hidden = hidden;
    step.mask = build_direct(step.slots);
    const std::vector<int> rows{0};
    out = drafter_eval(drafter, step, &state.drafter_cache, rows);
    if (stats) ++stats->drafter_passes;
    drafts.push_back(argmax_row(out.logits.row(0)));
    hidden = out.hidden.row(0);
  }
  // Speculative positions never stay in the cache.
  state.drafter_cache.truncate(c + 1);
  return drafts;
}

Verification verify_greedy(DecodeState& state, const TargetModel& target, std::span<const int> drafts,
                           SpecStats* stats) {
  if (drafts.empty()) throw DomainError("verify: no drafts to verify");
  const int c = state.last();
  if (state.target_cache.length != c) throw IntegrityError("verify: target cache is out of step with the tokens");
  std::vector<int> input{state.tokens.back()};
  input.insert(input.end(), drafts.begin(), drafts.end());
  const TargetOutput out = target_forward_cached(target, state.target_cache, input);
  if (stats) ++stats->target_passes;

  Verification v;
  const int k = static_cast<int>(drafts.size());
  while (v.accepted < k && argmax_row(out.logits.row(v.accepted)) == drafts[static_cast<std::size_t>(v.accepted)]) {
    ++v.accepted;
  }
  v.bonus = argmax_row(out.logits.row(v.accepted));
  state.tokens.insert(state.tokens.end(), drafts.begin(), drafts.begin() + v.accepted);
  state.tokens.push_back(v.bonus);
  state.target_cache.truncate(c + v.accepted + 1);
  const Eigen::Index old_rows = state.fused.rows();
  state.fused.conservativeResize(old_rows + v.accepted + 1, Eigen::NoChange);
  state.fused.bottomRows(v.accepted + 1) = out.fused.topRows(v.accepted + 1);
  if (stats) {
    ++stats->iterations;
    stats->accepted.push_back(v.accepted);
    stats->generated += v.accepted + 1;
  }
  return v;
}

namespace {

// Index of the first end token at or after `from`, or -1.
int find_end(const std::vector<int>& tokens, std::size_t from, int end_token) {
  if (end_token < 0) return -1;
  for (std::size_t i = from; i < tokens.size(); ++i) {
    if (tokens[i] == end_token) return static_cast<int>(i);
  }
  return -1;
}

}  // namespace

DecodeResult decode(std::span<const int> prompt, const TargetModel& target, const DrafterModel* drafter,
                    const DecodeOptions& opts, std::ostream* trace) {
  if (opts.max_new < 0) throw DomainError("decode: max_new must be non-negative");
  if (opts.mode != DecodeMode::target_only) {
    if (!drafter) throw ConfigError("decode: a drafter is required for speculative modes");
    check_draft_depth(*drafter, opts.k_infer);
  }
  DecodeState state = start_decode(target, drafter, prompt);
  DecodeResult result;
  SpecStats& stats = result.stats;
  const std::size_t prompt_len = prompt.size();
  const std::size_t limit = prompt_len + static_cast<std::size_t>(opts.max_new);
  bool ended = false;
  while (state.tokens.size() < limit && !ended) {
    const std::size_t before = state.tokens.size();
    std::vector<int> drafts;
    Verification v;
    if (opts.mode == DecodeMode::target_only) {
      const int c = state.last();
      const std::vector<int> input{state.tokens.back()};
      const TargetOutput out = target_forward_cached(target, state.target_cache, input);
      ++stats.target_passes;
      ++stats.iterations;
      stats.accepted.push_back(0);
      ++stats.generated;
      v.bonus = argmax_row(out.logits.row(0));
      state.tokens.push_back(v.bonus);
      state.fused.conservativeResize(c + 1, Eigen::NoChange);
      state.fused.row(c) = out.fused.row(0);
    } else {
      drafts = opts.mode == DecodeMode::parallel ? propose_parallel(state, *drafter, opts.k_infer, &stats)
                                                 : propose_ar(state, *drafter, opts.k_infer, &stats);
      v = verify_greedy(state, target, drafts, &stats);
    }
    const int end_at = find_end(state.tokens, std::max(before, prompt_len), opts.end_token);
    if (end_at >= 0) {
      state.tokens.resize(static_cast<std::size_t>(end_at) + 1);
      ended = true;
    }
    if (trace) {
      *trace << nlohmann::json{{"iteration", stats.iterations - 1},
                               {"drafts", drafts},
                               {"accepted", v.accepted},
                               {"bonus", v.bonus},
                               {"tokens", std::min(state.tokens.size(), limit) - prompt_len}}
                    .dump()
             << '\n';
    }
  }
  if (state.tokens.size() > limit) state.tokens.resize(limit);
  result.tokens = std::move(state.tokens);
  if (trace) {
    const int layers = drafter != nullptr && opts.mode != DecodeMode::target_only ? drafter->config.layers : 0;
    *trace << nlohmann::json{{"summary", stats.to_json()},
                             {"mode", to_string(opts.mode)},
                             {"simulated_throughput", simulate_cost(stats, opts.cost, layers)}}
                  .dump()
           << '\n';
  }
  return result;
}

std::vector<int> greedy_reference(std::span<const int> prompt, const TargetModel& target, int max_new,
                                  int end_token) {
  if (prompt.empty()) throw DomainError("decode: prompt must contain at least one token");
  std::vector<int> tokens(prompt.begin(), prompt.end());
  for (int i = 0; i < max_new; ++i) {
    const TargetOutput out = target_forward(target, tokens);
    const int next = argmax_row(out.logits.row(out.logits.rows() - 1));
    tokens.push_back(next);
    if (next == end_token) break;
  }
  return tokens;
}

}  // namespace pdraft
