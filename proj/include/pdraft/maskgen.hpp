#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pdraft/numerics/bit_matrix.hpp"

namespace pdraft {

// One cell of the parallel-prediction layout: the slot sitting at sequence
// position `pos` whose real context ends at pos - depth. It predicts the token
// at pos + 1.
struct Slot {
  int pos = 0;
  int depth = 0;

  bool valid() const { return pos >= 0 && depth >= 0 && depth <= pos; }
  friend auto operator<=>(const Slot&, const Slot&) = default;
};

std::string to_string(const Slot& s);

// Attention predicate between a query slot and a key slot.
//   depth 0 queries: causal over depth-0 keys.
//   depth d >= 1 queries: depth-0 keys up to pos - d, plus their own
//   dependency chain (pos - (d - d'), d') for 0 < d' <= d, self included.
bool mask_allowed(Slot q, Slot k);

// Per-depth retained positions. positions[0] is always 0..n-1 and every
// position kept at depth d >= 1 has its predecessor kept at depth d - 1.
struct LayoutSample {
  int n = 0;
  int depths = 0;
  std::vector<std::vector<int>> positions;

  std::size_t total() const;
  // Sorted by (pos, depth).
  std::vector<Slot> slots() const;
  bool chain_consistent() const;
};

// Full retention: every valid slot (p, d) with p < n, d < depths.
LayoutSample full_layout(int n, int depths);

// Builds a sample from explicit depth >= 1 sets (depth 0 is filled in);
// throws IntegrityError when the sets are not chain-consistent.
LayoutSample layout_from_sets(int n, const std::vector<std::vector<int>>& deeper_depths);

// Geometric COD sampling: |P_d| = max(1, floor(r * |P_{d-1}|)) drawn uniformly
// without replacement among positions whose predecessor survived at d - 1.
LayoutSample cod_sample(int n, int depths, double retention, std::uint64_t seed);

double expected_cod_total(int n, int depths, double retention);

// Square mask over an ordered slot list.
struct AssembledMask {
  std::vector<Slot> order;
  BitMatrix bits;

  friend bool operator==(const AssembledMask&, const AssembledMask&) = default;
};

// Predicate evaluated for every (query, key) pair. This is the reference
// construction and the "per-example" path the benchmark compares against.
AssembledMask build_direct(std::vector<Slot> order);

constexpr std::uint64_t kDefaultMaskBudgetBytes = 512ull << 20;

// Honors PDRAFT_BUDGET_BYTES when set.
std::uint64_t mask_budget_from_env();

// K x K grid of position-invariant blocks computed once at the maximum length.
// Block (d, d') is an max_len x max_len bit matrix packed flat in row-major
// bit order; rows and columns for invalid slots (p < d) are zero.
class BlockMaskSet {
 public:
  BlockMaskSet() = default;

  int max_len() const { return max_len_; }
  int depths() const { return depths_; }

  bool bit(int qd, int kd, int qp, int kp) const;
  bool block_empty(int qd, int kd) const { return empty_[block_index(qd, kd)] != 0; }

  // Logical packed size, K^2 * ceil(N^2 / 8) bytes.
  std::uint64_t storage_bytes() const { return storage_bytes_for(max_len_, depths_); }
  static std::uint64_t storage_bytes_for(int max_len, int depths);

  // 64 bits of block (qd, kd) starting at flat bit offset `offset`.
  std::uint64_t read64(int qd, int kd, std::uint64_t offset) const;

  void save(const std::string& path) const;
  static BlockMaskSet load(const std::string& path);

  friend BlockMaskSet precompute(int max_len, int depths, std::uint64_t budget_bytes);
  friend bool operator==(const BlockMaskSet&, const BlockMaskSet&) = default;

 private:
  std::size_t block_index(int qd, int kd) const {
    return static_cast<std::size_t>(qd) * static_cast<std::size_t>(depths_) +
           static_cast<std::size_t>(kd);
  }
  std::size_t words_per_block() const;
  void set_range(int qd, int kd, int qp, int kp_begin, int kp_end);

  int max_len_ = 0;
  int depths_ = 0;
  std::vector<std::uint64_t> words_;
  std::vector<std::uint8_t> empty_;
};

BlockMaskSet precompute(int max_len, int depths,
                        std::uint64_t budget_bytes = kDefaultMaskBudgetBytes);

// Mask for the full layout at length n, read out of the top-left corners.
AssembledMask slice_full(const BlockMaskSet& bm, int n);

// Mask for an arbitrary sorted slot subset (COD samples, partition segments).
AssembledMask gather(const BlockMaskSet& bm, const std::vector<Slot>& order);
AssembledMask gather(const BlockMaskSet& bm, const LayoutSample& sample);

// Loads the mask set from `path` when it exists and matches, otherwise
// computes it and writes it there. An empty path means in-memory only.
BlockMaskSet precompute_cached(int max_len, int depths, const std::string& path,
                               std::uint64_t budget_bytes);

}  // namespace pdraft
