#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdraft/corpus.hpp"
#include "pdraft/specdec.hpp"
#include "pdraft/trainer.hpp"

namespace pdraft {

// Everything one train-and-evaluate run needs, loadable from one JSON file.
struct ExperimentConfig {
  CorpusSpec corpus;
  TargetConfig target;
  TargetTrainConfig target_train;
  DrafterConfig drafter;
  TrainConfig train;
  int k_infer = 4;
  int eval_prompts = 64;
  int prompt_len = 8;
  int max_new = 48;
  CostModel cost;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_experiment(const std::string& path);

struct EvalSummary {
  DecodeMode mode = DecodeMode::parallel;
  int k_infer = 0;
  SpecStats stats;
  double simulated_throughput = 0.0;
  int mismatches = 0;  // prompts whose output differs from target-only decoding

  nlohmann::json to_json() const;
};

// Decodes `prompts` (each a prompt of corpus tokens) and pools the stats.
EvalSummary evaluate_decoding(const TargetModel& target, const DrafterModel* drafter, const Corpus& prompts,
                              DecodeMode mode, int k_infer, int max_new, const CostModel& cost,
                              std::ostream* trace = nullptr);

// First `prompt_len` tokens of each held-out sequence.
Corpus make_prompts(const Corpus& heldout, int prompt_len, int count);

struct MaskBenchResult {
  int n = 0;
  int depths = 0;
  double retention = 0.0;
  int repeats = 0;
  double predicate_seconds = 0.0;
  double precompute_seconds = 0.0;
  double gather_seconds = 0.0;
  double ratio = 0.0;  // predicate / (precompute + gather)
  bool identical = true;

  nlohmann::json to_json() const;
};

MaskBenchResult bench_mask(int n, int depths, double retention, int repeats, std::uint64_t seed);

struct AblationCell {
  int layers = 4;
  bool unfreeze = true;
  int k_train = 4;
  Variant variant = Variant::shared;
};

struct AblationRow {
  AblationCell cell;
  int k_infer = 0;
  double acceptance_length = 0.0;
  double simulated_throughput = 0.0;
  double train_seconds = 0.0;
  std::string status = "ok";
};

std::vector<AblationCell> ablation_grid(const std::vector<int>& layers, const std::vector<bool>& unfreeze,
                                        const std::vector<int>& k_train, const std::vector<Variant>& variants);

// Each cell trains a drafter on `train_set` and decodes prompts from
// `heldout`; failures are recorded in the row and the grid continues.
std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const TargetModel& target, const Corpus& train_set,
                                      const Corpus& heldout, const std::vector<AblationCell>& cells);

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

// Checkpoint round trips with the model config in the metadata header.
void save_target(const std::string& path, const TargetModel& model);
TargetModel load_target(const std::string& path);
void save_drafter(const std::string& path, const DrafterModel& model);
DrafterModel load_drafter(const std::string& path);

// Exit codes: 0 success, 2 usage error, 3 runtime failure.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace pdraft
