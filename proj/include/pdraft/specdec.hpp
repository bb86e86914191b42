#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdraft/model/drafter.hpp"
#include "pdraft/model/target.hpp"

namespace pdraft {

enum class DecodeMode { parallel, ar, target_only };

std::string to_string(DecodeMode m);
DecodeMode decode_mode_from_string(const std::string& s);

// Committed tokens t_0..t_c plus both caches.
//   target cache: t_0..t_{c-1} (the newest token is fed with the next pass)
//   fused rows:   one per target-processed position
//   drafter cache: depth-0 slots for a prefix of the committed positions
struct DecodeState {
  std::vector<int> tokens;
  KVCache target_cache;
  Tensor2D fused;
  KVCache drafter_cache;
  std::uint64_t seed = 0;  // reserved; greedy decoding draws nothing

  int last() const { return static_cast<int>(tokens.size()) - 1; }
};

// Runs the target over the prompt (all but its last token) and sets up empty
// drafter state.
DecodeState start_decode(const TargetModel& target, const DrafterModel* drafter, std::span<const int> prompt);

struct SpecStats {
  int iterations = 0;
  std::vector<int> accepted;
  long generated = 0;
  long drafter_passes = 0;
  long target_passes = 0;

  double acceptance_length() const;
  nlohmann::json to_json() const;
};

// Slot order of one parallel proposal: depth-0 catch-up slots for committed
// positions not yet in the drafter cache (ending with the NTP slot at the
// last committed position c), then MTP slots (c + j, j) for j = 1..k-1.
std::vector<Slot> proposal_slots(int cached, int last, int k);

std::vector<int> propose_parallel(DecodeState& state, const DrafterModel& drafter, int k, SpecStats* stats = nullptr);
std::vector<int> propose_ar(DecodeState& state, const DrafterModel& drafter, int k, SpecStats* stats = nullptr);

struct Verification {
  int accepted = 0;
  int bonus = 0;
};

// One target pass over [t_c, drafts...]; commits the accepted prefix and the
// bonus token.
Verification verify_greedy(DecodeState& state, const TargetModel& target, std::span<const int> drafts,
                           SpecStats* stats = nullptr);

// Analytic time per pass. t_draft(N) = draft_fixed + draft_per_layer * N.
struct CostModel {
  double t_target = 1.0;
  double draft_fixed = 0.02;
  double draft_per_layer = 0.05;
  double per_token_overhead = 0.0;

  double t_draft(int layers) const { return draft_fixed + draft_per_layer * layers; }
  void validate() const;
};

void to_json(nlohmann::json& j, const CostModel& c);
void from_json(const nlohmann::json& j, CostModel& c);

// Generated tokens per unit of simulated time.
double simulate_cost(const SpecStats& stats, const CostModel& cm, int drafter_layers);

struct DecodeOptions {
  DecodeMode mode = DecodeMode::parallel;
  int k_infer = 4;
  int max_new = 64;
  int end_token = -1;  // < 0 disables
  // Prices the summary record of a trace.
  CostModel cost;
};

struct DecodeResult {
  std::vector<int> tokens;  // prompt followed by exactly the new tokens
  SpecStats stats;
};

// `drafter` may be null for target_only. When `trace` is given, one JSON line
// per iteration and a closing summary line are written to it.
DecodeResult decode(std::span<const int> prompt, const TargetModel& target, const DrafterModel* drafter,
                    const DecodeOptions& opts, std::ostream* trace = nullptr);

// Plain greedy continuation, recomputing the full sequence each step. Used as
// the reference the speculative paths must reproduce.
std::vector<int> greedy_reference(std::span<const int> prompt, const TargetModel& target, int max_new,
                                  int end_token = -1);


}  // namespace pdraft
