#pragma once

#include <string>
#include <vector>

#include "pdraft/maskgen.hpp"

namespace pdraft {

// Segment assignment for within-sequence gradient accumulation.
//
// assignment[d][p] is the segment owning slot (p, d), or -1 when the slot is
// not retained. context[s] holds the cumulative depth-0 positions segment s
// needs as keys: every p with p < boundaries[s + 1].
struct SegmentPlan {
  int segments = 0;
  int length = 0;
  std::vector<int> boundaries;
  std::vector<std::vector<int>> assignment;
  std::vector<std::vector<int>> context;

  int segment_of(Slot s) const;
  std::string to_json() const;
};

SegmentPlan partition(const LayoutSample& sample, int segments);

// Position-bucket baseline: every slot goes to the bucket of its own position.
// Kept for comparison; it breaks cross-depth dependencies.
SegmentPlan partition_by_position(const LayoutSample& sample, int segments);

struct SegmentSlots {
  std::vector<Slot> slots;
  // False for depth-0 context slots owned by an earlier segment.
  std::vector<bool> loss_bearing;
};

SegmentSlots segment_slots(const SegmentPlan& plan, const LayoutSample& sample, int segment);

}  // namespace pdraft
