#include "pdraft/theory.hpp"

#include <algorithm>
#include <chrono>
#include <numbers>

namespace pdraft::theory {

double RopeConfig::slowest_period() const { return 2.0 * std::numbers::pi / theta(dim / 2 - 1); }

nlohmann::json ProbeReport::to_json() const {
  nlohmann::json j{{"config", {{"dim", cfg.dim}, {"base", cfg.base}}},
                   {"delta_range", {range.begin, range.end}},
                   {"trials", trials},
                   {"tol", tol},
                   {"collisions", collisions},
                   {"colliding_trials", colliding_trials},
                   {"min_gap", std::isfinite(min_gap) ? nlohmann::json(min_gap) : nlohmann::json(nullptr)},
                   {"runtime_seconds", seconds}};
  if (!witness_q.empty()) j["witness"] = {{"q", witness_q}, {"k", witness_k}};
  return j;
}

std::vector<double> score_curve(const Vec<double>& q, const Vec<double>& k, const RopeConfig& cfg, DeltaRange range) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(std::max(0L, range.size())));
  for (long d = range.begin; d < range.end; ++d) out.push_back(attn_score<double>(q, k, cfg, d));
  return out;
}

GapStats score_gaps(std::vector<double> scores, double tol) {
  GapStats g;
  std::sort(scores.begin(), scores.end());
  std::size_t hi = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i + 1 < scores.size()) g.min_gap = std::min(g.min_gap, scores[i + 1] - scores[i]);
    hi = std::max(hi, i + 1);
    while (hi < scores.size() && scores[hi] - scores[i] < tol) ++hi;
    g.collisions += static_cast<long>(hi - i - 1);
  }
  return g;
}

void check_range(const RopeConfig& cfg, DeltaRange range) {
  cfg.validate();
  if (range.size() < 1) throw DomainError("probe: empty offset range");
  // Two offsets give the same rotation only if they differ by a full turn.
  if (static_cast<double>(range.size() - 1) >= cfg.slowest_period()) {
    throw DomainError("probe: offset range reaches the period of the slowest rotation (" +
                      std::to_string(cfg.slowest_period()) + ")");
  }
}

namespace {

void record(ProbeReport& r, const Vec<double>& q, const Vec<double>& k) {
  const GapStats g = score_gaps(score_curve(q, k, r.cfg, r.range), r.tol);
  r.collisions += g.collisions;
  r.min_gap = std::min(r.min_gap, g.min_gap);
  if (g.collisions > 0) {
    ++r.colliding_trials;
    if (r.witness_q.empty()) {
      r.witness_q.assign(q.data(), q.data() + q.size());
      r.witness_k.assign(k.data(), k.data() + k.size());
    }
  }
}

}  // namespace

ProbeReport injectivity_probe(const RopeConfig& cfg, DeltaRange range, int trials, double tol, std::uint64_t seed) {
  check_range(cfg, range);
  if (trials < 1) throw DomainError("probe: at least one trial is required");
  const auto t0 = std::chrono::steady_clock::now();
  ProbeReport r;
  r.cfg = cfg;
  r.range = range;
  r.trials = trials;
  r.tol = tol;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec<double> q(cfg.dim);
  Vec<double> k(cfg.dim);
  for (int t = 0; t < trials; ++t) {
    for (int i = 0; i < cfg.dim; ++i) q(i) = normal(rng);
    for (int i = 0; i < cfg.dim; ++i) k(i) = normal(rng);
    record(r, q, k);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

ProbeReport injectivity_probe_pair(const RopeConfig& cfg, DeltaRange range, const Vec<double>& q,
                                   const Vec<double>& k, double tol) {
  check_range(cfg, range);
  ProbeReport r;
  r.cfg = cfg;
  r.range = range;
  r.trials = 1;
  r.tol = tol;
  record(r, q, k);
  return r;
}

Recovery position_recovery(const RopeConfig& cfg, const Vec<double>& k_ref, const Vec<double>& q, double observed,
                           DeltaRange range, double tol) {
  check_range(cfg, range);
  const std::vector<double> scores = score_curve(q, k_ref, cfg, range);
  Recovery r;
  r.residual = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double res = std::abs(scores[i] - observed);
    if (res < r.residual) {
      r.residual = res;
      r.delta = range.begin + static_cast<long>(i);
    }
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::abs(scores[i] - observed) <= r.residual + tol) r.candidates.push_back(range.begin + static_cast<long>(i));
  }
  r.ambiguous = r.candidates.size() > 1;
  return r;
}

}  // namespace pdraft::theory
