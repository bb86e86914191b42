#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "pdraft/errors.hpp"

namespace pdraft::theory {

struct RopeConfig {
  int dim = 64;
  double base = 10000.0;

  void validate() const {
    if (dim < 2 || dim % 2 != 0) throw ConfigError("rope: dimension must be even and >= 2");
    if (!(base > 1.0)) throw ConfigError("rope: base must exceed 1");
  }
  double theta(int j) const { return std::pow(base, -2.0 * j / dim); }
  // Integer offsets below this stay within one turn of every frequency.
  double slowest_period() const;
};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Block-diagonal rotation by delta * theta_j on each coordinate pair
// (2j, 2j+1).
template <typename T>
Mat<T> rope_matrix(const RopeConfig& cfg, long delta) {
  cfg.validate();
  Mat<T> r = Mat<T>::Zero(cfg.dim, cfg.dim);
  for (int j = 0; j < cfg.dim / 2; ++j) {
    const T angle = static_cast<T>(delta) * static_cast<T>(cfg.theta(j));
    const T c = std::cos(angle);
    const T s = std::sin(angle);
    r(2 * j, 2 * j) = c;
    r(2 * j, 2 * j + 1) = -s;
    r(2 * j + 1, 2 * j) = s;
    r(2 * j + 1, 2 * j + 1) = c;
  }
  return r;
}

// q^T R_delta k without forming the matrix.
template <typename T>
T attn_score(const Vec<T>& q, const Vec<T>& k, const RopeConfig& cfg, long delta) {
  if (q.size() != cfg.dim || k.size() != cfg.dim) throw DimensionError("attn_score: vectors must have rope dimension");
  T acc = T(0);
  for (int j = 0; j < cfg.dim / 2; ++j) {
    const T angle = static_cast<T>(delta) * static_cast<T>(cfg.theta(j));
    const T c = std::cos(angle);
    const T s = std::sin(angle);
    const T k0 = k(2 * j);
    const T k1 = k(2 * j + 1);
    acc += q(2 * j) * (c * k0 - s * k1) + q(2 * j + 1) * (s * k0 + c * k1);
  }
  return acc;
}

template <typename T>
T attn_score_matrix(const Vec<T>& q, const Vec<T>& k, const RopeConfig& cfg, long delta) {
  return q.dot(rope_matrix<T>(cfg, delta) * k);
}

struct DeltaRange {
  long begin = 0;
  long end = 0;  // exclusive

  long size() const { return end - begin; }
};

struct ProbeReport {
  RopeConfig cfg;
  DeltaRange range;
  int trials = 0;
  double tol = 0.0;
  long collisions = 0;
  // Trials with at least one colliding pair.
  int colliding_trials = 0;
  double min_gap = std::numeric_limits<double>::infinity();
  // First colliding trial, for reporting.
  std::vector<double> witness_q;
  std::vector<double> witness_k;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

// Scores f(delta) for every delta in range.
std::vector<double> score_curve(const Vec<double>& q, const Vec<double>& k, const RopeConfig& cfg, DeltaRange range);

struct GapStats {
  long collisions = 0;  // pairs closer than tol
  double min_gap = std::numeric_limits<double>::infinity();
};

// Pairs are counted exactly: after sorting, each run of values whose adjacent
// gaps are all < tol is expanded pairwise.
GapStats score_gaps(std::vector<double> scores, double tol);

// Rejects ranges that reach a full period of the slowest rotation.
void check_range(const RopeConfig& cfg, DeltaRange range);

ProbeReport injectivity_probe(const RopeConfig& cfg, DeltaRange range, int trials, double tol, std::uint64_t seed);

// Scores for one explicit (q, k) pair, e.g. the degenerate q = 0.
ProbeReport injectivity_probe_pair(const RopeConfig& cfg, DeltaRange range, const Vec<double>& q,
                                   const Vec<double>& k, double tol);

struct Recovery {
  long delta = 0;
  bool ambiguous = false;
  // Every offset whose score is within tol of the best match.
  std::vector<long> candidates;
  double residual = 0.0;
};

Recovery position_recovery(const RopeConfig& cfg, const Vec<double>& k_ref, const Vec<double>& q, double observed,
                           DeltaRange range, double tol = 1e-9);

}  // namespace pdraft::theory
