#include "pdraft/maskgen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "pdraft/errors.hpp"

#if defined(__BMI2__)
#include <immintrin.h>
#endif

namespace pdraft {

std::string to_string(const Slot& s) {
  return "(" + std::to_string(s.pos) + "," + std::to_string(s.depth) + ")";
}

bool mask_allowed(Slot q, Slot k) {
  if (!q.valid() || !k.valid()) {
    throw DomainError("mask_allowed: invalid slot " + to_string(q.valid() ? k : q));
  }
  if (q.depth == 0) return k.depth == 0 && k.pos <= q.pos;
  if (k.depth == 0) return k.pos <= q.pos - q.depth;
  return k.depth <= q.depth && k.pos == q.pos - (q.depth - k.depth);
}

// ---- layouts ----------------------------------------------------------------

std::size_t LayoutSample::total() const {
  std::size_t t = 0;
  for (const auto& p : positions) t += p.size();
  return t;
}

std::vector<Slot> LayoutSample::slots() const {
  std::vector<Slot> out;
  out.reserve(total());
  for (int d = 0; d < static_cast<int>(positions.size()); ++d) {
    for (int p : positions[static_cast<std::size_t>(d)]) out.push_back(Slot{p, d});
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool LayoutSample::chain_consistent() const {
  if (depths < 1 || static_cast<int>(positions.size()) != depths) return false;
  const auto& p0 = positions[0];
  if (static_cast<int>(p0.size()) != n) return false;
  for (int i = 0; i < n; ++i) {
    if (p0[static_cast<std::size_t>(i)] != i) return false;
  }
  for (int d = 1; d < depths; ++d) {
    const auto& prev = positions[static_cast<std::size_t>(d - 1)];
    const auto& cur = positions[static_cast<std::size_t>(d)];
    if (cur.size() > prev.size()) return false;
    for (std::size_t i = 0; i < cur.size(); ++i) {
      if (cur[i] < 0 || cur[i] >= n) return false;
      if (i > 0 && cur[i] <= cur[i - 1]) return false;
      if (!std::binary_search(prev.begin(), prev.end(), cur[i] - 1)) return false;
    }
  }
  return true;
}

LayoutSample full_layout(int n, int depths) {
  if (n < 1 || depths < 1) throw DomainError("full_layout: n and depths must be positive");
  LayoutSample s;
  s.n = n;
  s.depths = depths;
  s.positions.resize(static_cast<std::size_t>(depths));
  for (int d = 0; d < depths; ++d) {
    for (int p = d; p < n; ++p) s.positions[static_cast<std::size_t>(d)].push_back(p);
  }
  return s;
}

LayoutSample layout_from_sets(int n, const std::vector<std::vector<int>>& deeper_depths) {
  LayoutSample s;
  s.n = n;
  s.depths = static_cast<int>(deeper_depths.size()) + 1;
  s.positions.emplace_back();
  for (int p = 0; p < n; ++p) s.positions[0].push_back(p);
  for (const auto& set : deeper_depths) {
    std::vector<int> sorted = set;
    std::sort(sorted.begin(), sorted.end());
    s.positions.push_back(std::move(sorted));
  }
  if (!s.chain_consistent()) throw IntegrityError("layout_from_sets: depth sets are not chain-consistent");
  return s;
}

LayoutSample cod_sample(int n, int depths, double retention, std::uint64_t seed) {
  if (depths < 1 || n < depths) {
    throw DomainError("cod_sample: need n >= K >= 1 (n=" + std::to_string(n) +
                      ", K=" + std::to_string(depths) + ")");
  }
  if (!(retention > 0.0 && retention < 1.0)) throw DomainError("cod_sample: retention must lie in (0,1)");
  std::mt19937_64 rng(seed);
  LayoutSample s;
  s.n = n;
  s.depths = depths;
  s.positions.resize(static_cast<std::size_t>(depths));
  for (int p = 0; p < n; ++p) s.positions[0].push_back(p);
  for (int d = 1; d < depths; ++d) {
    const auto& prev = s.positions[static_cast<std::size_t>(d - 1)];
    std::vector<int> pool;
    pool.reserve(prev.size());
    for (int p : prev) {
      if (p + 1 <= n - 1) pool.push_back(p + 1);
    }
    // The epsilon keeps products such as 0.7 * 10 from flooring to 6.
    const auto wanted = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(retention * static_cast<double>(prev.size()) + 1e-9)));
    const std::size_t take = std::min(wanted, pool.size());
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(take);
    std::sort(pool.begin(), pool.end());
    s.positions[static_cast<std::size_t>(d)] = std::move(pool);
  }
  return s;
}

double expected_cod_total(int n, int depths, double retention) {
  return n * (1.0 - std::pow(retention, depths)) / (1.0 - retention);
}

AssembledMask build_direct(std::vector<Slot> order) {
  AssembledMask m;
  m.bits = BitMatrix(order.size(), order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (std::size_t j = 0; j < order.size(); ++j) {
      if (mask_allowed(order[i], order[j])) m.bits.set(i, j);
    }
  }
  m.order = std::move(order);
  return m;
}

std::uint64_t mask_budget_from_env() {
  if (const char* env = std::getenv("PDRAFT_BUDGET_BYTES")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end != env && *end == '\0') return v;
    throw ConfigError(std::string("PDRAFT_BUDGET_BYTES is not an integer: ") + env);
  }
  return kDefaultMaskBudgetBytes;
}

// ---- block mask set ---------------------------------------------------------

std::uint64_t BlockMaskSet::storage_bytes_for(int max_len, int depths) {
  const auto n = static_cast<std::uint64_t>(max_len);
  const auto k = static_cast<std::uint64_t>(depths);
  return k * k * ((n * n + 7) / 8);
}

std::size_t BlockMaskSet::words_per_block() const {
  const auto n = static_cast<std::size_t>(max_len_);
  return (n * n + 63) / 64;
}

bool BlockMaskSet::bit(int qd, int kd, int qp, int kp) const {
  const std::uint64_t off =
      static_cast<std::uint64_t>(qp) * static_cast<std::uint64_t>(max_len_) + static_cast<std::uint64_t>(kp);
  const std::uint64_t* base = words_.data() + block_index(qd, kd) * words_per_block();
  return (base[off / 64] >> (off % 64)) & 1u;
}

std::uint64_t BlockMaskSet::read64(int qd, int kd, std::uint64_t offset) const {
  const std::size_t nw = words_per_block();
  const std::uint64_t* base = words_.data() + block_index(qd, kd) * nw;
  const std::size_t wi = offset / 64;
  const unsigned shift = offset % 64;
  if (wi >= nw) return 0;
  std::uint64_t v = base[wi] >> shift;
  if (shift != 0 && wi + 1 < nw) v |= base[wi + 1] << (64 - shift);
  return v;
}

void BlockMaskSet::set_range(int qd, int kd, int qp, int kp_begin, int kp_end) {
  std::uint64_t* base = words_.data() + block_index(qd, kd) * words_per_block();
  std::uint64_t b = static_cast<std::uint64_t>(qp) * static_cast<std::uint64_t>(max_len_) +
                    static_cast<std::uint64_t>(kp_begin);
  const std::uint64_t e = b + static_cast<std::uint64_t>(kp_end - kp_begin);
  while (b < e) {
    const unsigned lo = b % 64;
    const std::uint64_t span = std::min<std::uint64_t>(64 - lo, e - b);
    const std::uint64_t bits = span == 64 ? ~std::uint64_t{0} : ((std::uint64_t{1} << span) - 1) << lo;
    base[b / 64] |= bits;
    b += span;
  }
}

BlockMaskSet precompute(int max_len, int depths, std::uint64_t budget_bytes) {
  if (max_len < 1 || depths < 1) throw DomainError("precompute: N_max and K must be positive");
  const std::uint64_t need = BlockMaskSet::storage_bytes_for(max_len, depths);
  if (need > budget_bytes) {
    throw BudgetError("precompute: mask set needs " + std::to_string(need) + " bytes, budget is " +
                      std::to_string(budget_bytes));
  }
  BlockMaskSet bm;
  bm.max_len_ = max_len;
  bm.depths_ = depths;
  const std::size_t blocks = static_cast<std::size_t>(depths) * static_cast<std::size_t>(depths);
  bm.words_.assign(blocks * bm.words_per_block(), 0);
  for (int qd = 0; qd < depths; ++qd) {
    for (int qp = qd; qp < max_len; ++qp) {
      if (qd == 0) {
        bm.set_range(0, 0, qp, 0, qp + 1);
        continue;
      }
      bm.set_range(qd, 0, qp, 0, qp - qd + 1);
      for (int kd = 1; kd <= qd; ++kd) {
        const int kp = qp - (qd - kd);
        bm.set_range(qd, kd, qp, kp, kp + 1);
      }
    }
  }
  bm.empty_.assign(blocks, 1);
  const std::size_t nw = bm.words_per_block();
  for (std::size_t b = 0; b < blocks; ++b) {
    const auto* w = bm.words_.data() + b * nw;
    bm.empty_[b] = std::all_of(w, w + nw, [](std::uint64_t x) { return x == 0; }) ? 1 : 0;
  }
  return bm;
}

namespace {

constexpr char kMaskMagic[4] = {'P', 'D', 'M', 'K'};
constexpr std::uint32_t kMaskVersion = 1;

inline std::uint64_t extract_bits(std::uint64_t v, std::uint64_t m) {
#if defined(__BMI2__)
  return _pext_u64(v, m);
#else
  std::uint64_t out = 0;
  for (unsigned k = 0; m != 0; m &= m - 1, ++k) {
    if (v & m & -m) out |= std::uint64_t{1} << k;
  }
  return out;
#endif
}

inline std::uint64_t deposit_bits(std::uint64_t v, std::uint64_t m) {
#if defined(__BMI2__)
  return _pdep_u64(v, m);
#else
  std::uint64_t out = 0;
  for (unsigned k = 0; m != 0; m &= m - 1, ++k) {
    if ((v >> k) & 1u) out |= m & -m;
  }
  return out;
#endif
}

// Append-only bit stream.
class BitWriter {
 public:
  explicit BitWriter(std::vector<std::uint64_t>& buf) : buf_(buf) {}
  void append(std::uint64_t v, unsigned k) {
    if (k == 0) return;
    const unsigned lo = used_ % 64;
    if (lo == 0) buf_[used_ / 64] = 0;
    buf_[used_ / 64] |= v << lo;
    if (lo + k > 64) buf_[used_ / 64 + 1] = v >> (64 - lo);
    used_ += k;
  }

 private:
  std::vector<std::uint64_t>& buf_;
  std::size_t used_ = 0;
};

class BitReader {
 public:
  explicit BitReader(const std::vector<std::uint64_t>& buf) : buf_(buf) {}
  std::uint64_t take(unsigned k) {
    const unsigned lo = pos_ % 64;
    std::uint64_t v = buf_[pos_ / 64] >> lo;
    if (lo != 0 && lo + k > 64) v |= buf_[pos_ / 64 + 1] << (64 - lo);
    pos_ += k;
    return k == 64 ? v : v & ((std::uint64_t{1} << k) - 1);
  }

 private:
  const std::vector<std::uint64_t>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

void BlockMaskSet::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kMaskMagic, 4);
  const std::uint32_t version = kMaskVersion;
  const std::uint64_t n = static_cast<std::uint64_t>(max_len_);
  const std::uint32_t k = static_cast<std::uint32_t>(depths_);
  os.write(reinterpret_cast<const char*>(&version), sizeof version);
  os.write(reinterpret_cast<const char*>(&n), sizeof n);
  os.write(reinterpret_cast<const char*>(&k), sizeof k);
  const std::size_t block_bytes = (n * n + 7) / 8;
  const std::size_t blocks = static_cast<std::size_t>(k) * k;
  for (std::size_t b = 0; b < blocks; ++b) {
    os.write(reinterpret_cast<const char*>(words_.data() + b * words_per_block()),
             static_cast<std::streamsize>(block_bytes));
  }
  if (!os) throw IoError("write failed: " + path);
}

BlockMaskSet BlockMaskSet::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open mask file: " + path);
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t n = 0;
  std::uint32_t k = 0;
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  is.read(reinterpret_cast<char*>(&n), sizeof n);
  is.read(reinterpret_cast<char*>(&k), sizeof k);
  if (!is || std::memcmp(magic, kMaskMagic, 4) != 0) throw IoError("not a mask file: " + path);
  if (version != kMaskVersion) throw IoError("unsupported mask file version " + std::to_string(version));
  BlockMaskSet bm;
  bm.max_len_ = static_cast<int>(n);
  bm.depths_ = static_cast<int>(k);
  const std::size_t blocks = static_cast<std::size_t>(k) * k;
  const std::size_t block_bytes = (n * n + 7) / 8;
  bm.words_.assign(blocks * bm.words_per_block(), 0);
  bm.empty_.assign(blocks, 1);
  for (std::size_t b = 0; b < blocks; ++b) {
    auto* w = bm.words_.data() + b * bm.words_per_block();
    is.read(reinterpret_cast<char*>(w), static_cast<std::streamsize>(block_bytes));
    bm.empty_[b] = std::all_of(w, w + bm.words_per_block(), [](std::uint64_t x) { return x == 0; }) ? 1 : 0;
  }
  if (!is) throw IoError("mask file truncated: " + path);
  return bm;
}

BlockMaskSet precompute_cached(int max_len, int depths, const std::string& path,
                               std::uint64_t budget_bytes) {
  if (!path.empty() && std::filesystem::exists(path)) {
    BlockMaskSet bm = BlockMaskSet::load(path);
    if (bm.max_len() == max_len && bm.depths() == depths) return bm;
  }
  BlockMaskSet bm = precompute(max_len, depths, budget_bytes);
  if (!path.empty()) bm.save(path);
  return bm;
}

// ---- assembly ---------------------------------------------------------------

AssembledMask gather(const BlockMaskSet& bm, const std::vector<Slot>& order) {
  const int K = bm.depths();
  const int N = bm.max_len();
  int n_pos = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Slot& s = order[i];
    if (!s.valid()) throw DomainError("gather: invalid slot " + to_string(s));
    if (s.pos >= N) throw RangeError("gather: position " + std::to_string(s.pos) + " >= N_max " + std::to_string(N));
    if (s.depth >= K) throw RangeError("gather: depth " + std::to_string(s.depth) + " >= K " + std::to_string(K));
    if (i > 0 && !(order[i - 1] < s)) throw IntegrityError("gather: slot order must be strictly (pos, depth) sorted");
    n_pos = std::max(n_pos, s.pos + 1);
  }
  const std::size_t L = order.size();
  const std::size_t pos_words = (static_cast<std::size_t>(n_pos) + 63) / 64;
  const std::size_t col_words = (L + 63) / 64;

  // Retained positions per depth and the output columns they land on.
  std::vector<std::vector<std::uint64_t>> retained(static_cast<std::size_t>(K),
                                                   std::vector<std::uint64_t>(pos_words, 0));
  std::vector<std::vector<std::uint64_t>> columns(static_cast<std::size_t>(K),
                                                  std::vector<std::uint64_t>(col_words, 0));
  std::vector<std::size_t> per_depth(static_cast<std::size_t>(K), 0);
  for (std::size_t j = 0; j < L; ++j) {
    const auto d = static_cast<std::size_t>(order[j].depth);
    const auto p = static_cast<std::size_t>(order[j].pos);
    retained[d][p / 64] |= std::uint64_t{1} << (p % 64);
    columns[d][j / 64] |= std::uint64_t{1} << (j % 64);
    ++per_depth[d];
  }

  AssembledMask out;
  out.bits = BitMatrix(L, L);
  std::vector<std::uint64_t> stream(col_words + 2, 0);
  for (std::size_t i = 0; i < L; ++i) {
    const Slot q = order[i];
    std::uint64_t* row = out.bits.row_words(i);
    const std::uint64_t row_base = static_cast<std::uint64_t>(q.pos) * static_cast<std::uint64_t>(N);
    for (int kd = 0; kd < K; ++kd) {
      const auto kdi = static_cast<std::size_t>(kd);
      if (per_depth[kdi] == 0 || bm.block_empty(q.depth, kd)) continue;
      BitWriter writer(stream);
      for (std::size_t w = 0; w < pos_words; ++w) {
        const std::uint64_t m = retained[kdi][w];
        if (m == 0) continue;
        const std::uint64_t bits = bm.read64(q.depth, kd, row_base + 64 * w);
        writer.append(extract_bits(bits, m), static_cast<unsigned>(std::popcount(m)));
      }
      BitReader reader(stream);
      for (std::size_t w = 0; w < col_words; ++w) {
        const std::uint64_t m = columns[kdi][w];
        if (m == 0) continue;
        row[w] |= deposit_bits(reader.take(static_cast<unsigned>(std::popcount(m))), m);
      }
    }
  }
  out.order = order;
  return out;
}

AssembledMask gather(const BlockMaskSet& bm, const LayoutSample& sample) {
  if (sample.depths != bm.depths()) {
    throw IntegrityError("gather: sample has K=" + std::to_string(sample.depths) +
                         " but mask set has K=" + std::to_string(bm.depths()));
  }
  if (sample.n > bm.max_len()) {
    throw RangeError("gather: sample length " + std::to_string(sample.n) + " exceeds N_max " +
                     std::to_string(bm.max_len()));
  }
  return gather(bm, sample.slots());
}

AssembledMask slice_full(const BlockMaskSet& bm, int n) {
  if (n < 1 || n > bm.max_len()) {
    throw RangeError("slice_full: n=" + std::to_string(n) + " outside [1, " + std::to_string(bm.max_len()) + "]");
  }
  return gather(bm, full_layout(n, bm.depths()).slots());
}

}  // namespace pdraft
