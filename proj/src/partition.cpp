#include "pdraft/partition.hpp"

#include <algorithm>

#include <json.hpp>

#include "pdraft/errors.hpp"

namespace pdraft {

namespace {

std::vector<int> make_boundaries(int length, int segments) {
  if (segments < 1) throw ConfigError("partition: S must be >= 1");
  if (segments > length) {
    throw ConfigError("partition: S=" + std::to_string(segments) + " exceeds length " + std::to_string(length));
  }
  const int step = length / segments;
  std::vector<int> b;
  for (int s = 0; s < segments; ++s) b.push_back(s * step);
  b.push_back(length);
  return b;
}

int bucket(const std::vector<int>& boundaries, int p) {
  // max{s : B_s <= p} over the S lower boundaries.
  auto it = std::upper_bound(boundaries.begin(), boundaries.end() - 1, p);
  return static_cast<int>(it - boundaries.begin()) - 1;
}

void fill_context(SegmentPlan& plan, const LayoutSample& sample) {
  plan.context.assign(static_cast<std::size_t>(plan.segments), {});
  for (int s = 0; s < plan.segments; ++s) {
    const int limit = plan.boundaries[static_cast<std::size_t>(s) + 1];
    for (int p : sample.positions[0]) {
      if (p < limit) plan.context[static_cast<std::size_t>(s)].push_back(p);
    }
  }
}

}  // namespace

int SegmentPlan::segment_of(Slot s) const {
  if (s.depth < 0 || s.depth >= static_cast<int>(assignment.size()) || s.pos < 0 || s.pos >= length) {
    return -1;
  }
  return assignment[static_cast<std::size_t>(s.depth)][static_cast<std::size_t>(s.pos)];
}

SegmentPlan partition(const LayoutSample& sample, int segments) {
  if (!sample.chain_consistent()) throw IntegrityError("partition: sample is not chain-consistent");
  SegmentPlan plan;
  plan.segments = segments;
  plan.length = sample.n;
  plan.boundaries = make_boundaries(sample.n, segments);
  plan.assignment.assign(static_cast<std::size_t>(sample.depths),
                         std::vector<int>(static_cast<std::size_t>(sample.n), -1));

  // Phase 1: depths 0 and 1 by boundary bucket.
  for (int g = 0; g < std::min(2, sample.depths); ++g) {
    for (int p : sample.positions[static_cast<std::size_t>(g)]) {
      plan.assignment[static_cast<std::size_t>(g)][static_cast<std::size_t>(p)] = bucket(plan.boundaries, p);
    }
  }
  // Phase 2: deeper slots inherit from their dependency one depth up.
  for (int g = 2; g < sample.depths; ++g) {
    const auto& prev = plan.assignment[static_cast<std::size_t>(g) - 1];
    for (int p : sample.positions[static_cast<std::size_t>(g)]) {
      plan.assignment[static_cast<std::size_t>(g)][static_cast<std::size_t>(p)] =
          prev[static_cast<std::size_t>(p) - 1];
    }
  }
  // Phase 3: cumulative depth-0 context.
  fill_context(plan, sample);
  return plan;
}

SegmentPlan partition_by_position(const LayoutSample& sample, int segments) {
  SegmentPlan plan;
  plan.segments = segments;
  plan.length = sample.n;
  plan.boundaries = make_boundaries(sample.n, segments);
  plan.assignment.assign(static_cast<std::size_t>(sample.depths),
                         std::vector<int>(static_cast<std::size_t>(sample.n), -1));
  for (int g = 0; g < sample.depths; ++g) {
    for (int p : sample.positions[static_cast<std::size_t>(g)]) {
      plan.assignment[static_cast<std::size_t>(g)][static_cast<std::size_t>(p)] = bucket(plan.boundaries, p);
    }
  }
  fill_context(plan, sample);
  return plan;
}

SegmentSlots segment_slots(const SegmentPlan& plan, const LayoutSample& sample, int segment) {
  if (segment < 0 || segment >= plan.segments) {
    throw RangeError("segment_slots: segment " + std::to_string(segment) + " outside [0, " +
                     std::to_string(plan.segments) + ")");
  }
  if (plan.length != sample.n || plan.assignment.size() != static_cast<std::size_t>(sample.depths)) {
    throw IntegrityError("segment_slots: plan was built for a different sample");
  }
  std::vector<std::pair<Slot, bool>> cells;
  const int lower = plan.boundaries[static_cast<std::size_t>(segment)];
  for (int p : plan.context[static_cast<std::size_t>(segment)]) {
    if (p < lower) cells.push_back({Slot{p, 0}, false});
  }
  for (int d = 0; d < sample.depths; ++d) {
    for (int p : sample.positions[static_cast<std::size_t>(d)]) {
      if (plan.assignment[static_cast<std::size_t>(d)][static_cast<std::size_t>(p)] == segment) {
        cells.push_back({Slot{p, d}, true});
      }
    }
  }
  std::sort(cells.begin(), cells.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  SegmentSlots out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i > 0 && cells[i - 1].first == cells[i].first) {
      throw IntegrityError("segment_slots: slot " + to_string(cells[i].first) + " listed twice");
    }
    out.slots.push_back(cells[i].first);
    out.loss_bearing.push_back(cells[i].second);
  }
  return out;
}

std::string SegmentPlan::to_json() const {
  nlohmann::json j;
  j["segments"] = segments;
  j["length"] = length;
  j["boundaries"] = boundaries;
  j["assignment"] = assignment;
  j["context"] = context;
  return j.dump();
}

}  // namespace pdraft
