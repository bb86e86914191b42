#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdraft/maskgen.hpp"
#include "pdraft/model/drafter.hpp"
#include "pdraft/model/target.hpp"
#include "pdraft/partition.hpp"

namespace pdraft {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; <= 0 disables.
  double clip_norm = 1.0;
};

class Adam {
 public:
  Adam(const ParamStore& params, AdamConfig config);
  void step(ParamStore& params, const Gradients& grads, double lr);
  int steps() const { return t_; }

 private:
  AdamConfig config_;
  std::vector<Tensor2D> m_;
  std::vector<Tensor2D> v_;
  int t_ = 0;
};

// Linear warmup to `peak`, then linear decay to zero at `total_steps`.
double linear_schedule(int step, int total_steps, double peak, double warmup_ratio);

struct TrainConfig {
  int k_train = 4;
  double cod_ratio = 0.8;
  int max_seq_len = 64;
  int segments = 1;
  int epochs = 1;
  double peak_lr = 3e-3;
  double warmup_ratio = 0.0025;
  // Sequences whose gradients are accumulated into one optimizer step.
  int batch_size = 8;
  // Forward passes above this many slots are refused by step_full; 0 = no limit.
  std::size_t max_slots_per_forward = 0;
  std::uint64_t seed = 0;
  AdamConfig adam;
  std::string checkpoint_dir;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// ---- examples ---------------------------------------------------------------

// `fused` row i is the fused target hidden after processing tokens[i].
DraftBatch build_example(std::span<const int> tokens, const Tensor2D& fused, const LayoutSample& sample,
                         const BlockMaskSet& masks, int mask_token);

struct BuiltExample {
  DraftBatch batch;
  LayoutSample sample;
  // Depths actually used; below K_train when the sequence is shorter.
  int depths_used = 0;
};

BuiltExample build_example(std::span<const int> tokens, const Tensor2D& fused, const TrainConfig& cfg,
                           std::uint64_t example_seed, const BlockMaskSet& masks, int mask_token);

// Sub-batch over `slots` (a subset of batch.slots); rows flagged false in
// loss_bearing keep their inputs but carry no loss.
DraftBatch select_slots(const DraftBatch& batch, const SegmentSlots& seg, const BlockMaskSet& masks);

// Mean cross-entropy over loss-bearing slots.
Var loss(const DraftBatch& batch, Var logits);

// ---- steps ------------------------------------------------------------------

struct DepthTally {
  std::vector<long> correct;
  std::vector<long> total;

  void resize(int depths);
  void add(const DraftBatch& batch, const Tensor2D& logits);
  void merge(const DepthTally& other);
  std::vector<double> accuracy() const;
};

struct StepResult {
  double loss = 0.0;
  Gradients grads;
  DepthTally tally;
  std::size_t peak_slots = 0;
};

StepResult step_full(const DrafterModel& model, const DraftBatch& batch, std::size_t max_slots = 0);

StepResult step_segmented(const DrafterModel& model, const DraftBatch& batch, const LayoutSample& sample,
                          const SegmentPlan& plan, const BlockMaskSet& masks);

// ---- training loops ---------------------------------------------------------

struct StepRecord {
  int step = 0;
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::vector<double> depth_accuracy;
  double alpha = 0.0;
  std::size_t peak_slots = 0;
  double timestamp = 0.0;

  nlohmann::json to_json() const;
};

struct TrainMetrics {
  std::vector<StepRecord> steps;
  double wall_seconds = 0.0;

  // Mean alpha over the steps of each epoch.
  std::vector<double> epoch_alpha() const;
  std::vector<double> epoch_loss() const;
};

struct TrainResult {
  DrafterModel drafter;
  TrainMetrics metrics;
};

TrainResult train(const std::vector<std::vector<int>>& corpus, const TargetModel& target,
                  const DrafterConfig& drafter_config, const TrainConfig& cfg, std::ostream* metrics_out = nullptr);

struct TargetTrainConfig {
  int epochs = 4;
  double peak_lr = 3e-3;
  double warmup_ratio = 0.02;
  int batch_size = 8;
  int max_seq_len = 64;
  std::uint64_t seed = 0;
  AdamConfig adam;
};

void to_json(nlohmann::json& j, const TargetTrainConfig& c);
void from_json(const nlohmann::json& j, TargetTrainConfig& c);

TargetModel train_target(const std::vector<std::vector<int>>& corpus, const TargetConfig& config,
                         const TargetTrainConfig& cfg, std::ostream* metrics_out = nullptr);

// Per-depth drafter accuracy against corpus labels on the full layout.
std::vector<double> evaluate_depth_accuracy(const DrafterModel& drafter, const TargetModel& target,
                                            const std::vector<std::vector<int>>& sequences, int depths);

}  // namespace pdraft
