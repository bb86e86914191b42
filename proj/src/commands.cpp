#include "pdraft/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "pdraft/partition.hpp"
#include "pdraft/theory.hpp"

namespace pdraft {

// ---- configuration ----------------------------------------------------------

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"corpus", c.corpus},
                     {"target", c.target},
                     {"target_train", c.target_train},
                     {"drafter", c.drafter},
                     {"train", c.train},
                     {"eval",
                      {{"k_infer", c.k_infer},
                       {"prompts", c.eval_prompts},
                       {"prompt_len", c.prompt_len},
                       {"max_new", c.max_new}}},
                     {"cost", c.cost}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (j.contains("corpus")) j.at("corpus").get_to(c.corpus);
  if (j.contains("target")) j.at("target").get_to(c.target);
  if (j.contains("target_train")) j.at("target_train").get_to(c.target_train);
  if (j.contains("drafter")) j.at("drafter").get_to(c.drafter);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    c.k_infer = e.value("k_infer", c.k_infer);
    c.eval_prompts = e.value("prompts", c.eval_prompts);
    c.prompt_len = e.value("prompt_len", c.prompt_len);
    c.max_new = e.value("max_new", c.max_new);
  }
  if (j.contains("cost")) j.at("cost").get_to(c.cost);
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path + "'");
  try {
    return nlohmann::json::parse(f).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
}

// ---- checkpoints ------------------------------------------------------------

void save_target(const std::string& path, const TargetModel& model) {
  save_checkpoint(path, model.params, nlohmann::json{{"kind", "target"}, {"config", model.config}}.dump());
}

namespace {

nlohmann::json checkpoint_meta(const Checkpoint& ck, const std::string& kind, const std::string& path) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ck.metadata);
  } catch (const nlohmann::json::exception&) {
    throw IntegrityError("checkpoint '" + path + "' has an unreadable metadata header");
  }
  if (meta.value("kind", std::string()) != kind) {
    throw IntegrityError("checkpoint '" + path + "' does not hold a " + kind + " model");
  }
  return meta;
}

}  // namespace

TargetModel load_target(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  const auto meta = checkpoint_meta(ck, "target", path);
  return TargetModel::from_params(meta.at("config").get<TargetConfig>(), std::move(ck.params));
}

void save_drafter(const std::string& path, const DrafterModel& model) {
  save_checkpoint(path, model.params, nlohmann::json{{"kind", "drafter"}, {"config", model.config}}.dump());
}

DrafterModel load_drafter(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  const auto meta = checkpoint_meta(ck, "drafter", path);
  return DrafterModel::from_params(meta.at("config").get<DrafterConfig>(), std::move(ck.params));
}

// ---- evaluation -------------------------------------------------------------

nlohmann::json EvalSummary::to_json() const {
  return nlohmann::json{{"mode", to_string(mode)},
                        {"k_infer", k_infer},
                        {"stats", stats.to_json()},
                        {"simulated_throughput", simulated_throughput},
                        {"mismatches", mismatches}};
}

Corpus make_prompts(const Corpus& heldout, int prompt_len, int count) {
  if (prompt_len < 1) throw ConfigError("prompt length must be >= 1");
  Corpus prompts;
  for (const auto& seq : heldout) {
    if (static_cast<int>(prompts.size()) >= count) break;
    if (static_cast<int>(seq.size()) < prompt_len) continue;
    prompts.emplace_back(seq.begin(), seq.begin() + prompt_len);
  }
  if (prompts.empty()) throw EmptyBatchError("no held-out sequence is long enough for the prompt length");
  return prompts;
}

EvalSummary evaluate_decoding(const TargetModel& target, const DrafterModel* drafter, const Corpus& prompts,
                              DecodeMode mode, int k_infer, int max_new, const CostModel& cost, std::ostream* trace) {
  EvalSummary s;
  s.mode = mode;
  s.k_infer = k_infer;
  DecodeOptions opts;
  opts.mode = mode;
  opts.k_infer = k_infer;
  opts.max_new = max_new;
  opts.cost = cost;
  DecodeOptions ref_opts = opts;
  ref_opts.mode = DecodeMode::target_only;
  for (const auto& prompt : prompts) {
    const DecodeResult r = decode(prompt, target, drafter, opts, trace);
    if (mode != DecodeMode::target_only) {
      const DecodeResult ref = decode(prompt, target, nullptr, ref_opts);
      if (ref.tokens != r.tokens) ++s.mismatches;
    }
    s.stats.iterations += r.stats.iterations;
    s.stats.generated += r.stats.generated;
    s.stats.drafter_passes += r.stats.drafter_passes;
    s.stats.target_passes += r.stats.target_passes;
    s.stats.accepted.insert(s.stats.accepted.end(), r.stats.accepted.begin(), r.stats.accepted.end());
  }
  s.simulated_throughput = simulate_cost(s.stats, cost, drafter ? drafter->config.layers : 0);
  return s;
}

// ---- mask benchmark ---------------------------------------------------------

nlohmann::json MaskBenchResult::to_json() const {
  return nlohmann::json{{"n", n},
                        {"k", depths},
                        {"cod_ratio", retention},
                        {"repeats", repeats},
                        {"predicate_seconds", predicate_seconds},
                        {"precompute_seconds", precompute_seconds},
                        {"gather_seconds", gather_seconds},
                        {"ratio", ratio},
                        {"identical", identical}};
}

MaskBenchResult bench_mask(int n, int depths, double retention, int repeats, std::uint64_t seed) {
  using clock = std::chrono::steady_clock;
  MaskBenchResult r;
  r.n = n;
  r.depths = depths;
  r.retention = retention;
  r.repeats = repeats;
  if (repeats < 1) throw ConfigError("bench-mask: repeats must be >= 1");
  std::vector<LayoutSample> samples;
  for (int i = 0; i < repeats; ++i) {
    samples.push_back(cod_sample(n, depths, retention, splitmix64(seed + static_cast<std::uint64_t>(i))));
  }
  // Masks are compared and dropped one example at a time; at n = 2048 a
  // whole run's worth would not fit in memory.
  auto t0 = clock::now();
  const BlockMaskSet masks = precompute(n, depths, mask_budget_from_env());
  r.precompute_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  for (const auto& s : samples) {
    t0 = clock::now();
    const AssembledMask direct = build_direct(s.slots());
    const auto t1 = clock::now();
    const AssembledMask gathered = gather(masks, s);
    const auto t2 = clock::now();
    r.predicate_seconds += std::chrono::duration<double>(t1 - t0).count();
    r.gather_seconds += std::chrono::duration<double>(t2 - t1).count();
    r.identical = r.identical && direct == gathered;
  }
  const double amortized = r.precompute_seconds + r.gather_seconds;
  r.ratio = amortized > 0.0 ? r.predicate_seconds / amortized : 0.0;
  return r;
}

// ---- ablation ---------------------------------------------------------------

std::vector<AblationCell> ablation_grid(const std::vector<int>& layers, const std::vector<bool>& unfreeze,
                                        const std::vector<int>& k_train, const std::vector<Variant>& variants) {
  std::vector<AblationCell> cells;
  for (int l : layers) {
    for (bool u : unfreeze) {
      for (int k : k_train) {
        for (Variant v : variants) cells.push_back(AblationCell{l, u, k, v});
      }
    }
  }
  return cells;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const TargetModel& target, const Corpus& train_set,
                                      const Corpus& heldout, const std::vector<AblationCell>& cells) {
  std::vector<AblationRow> rows;
  const Corpus prompts = make_prompts(heldout, base.prompt_len, base.eval_prompts);
  for (const auto& cell : cells) {
    AblationRow row;
    row.cell = cell;
    row.k_infer = std::min(base.k_infer, cell.k_train);
    try {
      DrafterConfig dc = base.drafter;
      dc.layers = cell.layers;
      dc.unfreeze_embeddings = cell.unfreeze;
      dc.variant = cell.variant;
      TrainConfig tc = base.train;
      tc.k_train = cell.k_train;
      tc.checkpoint_dir.clear();
      const auto t0 = std::chrono::steady_clock::now();
      const TrainResult tr = train(train_set, target, dc, tc);
      row.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const EvalSummary ev = evaluate_decoding(target, &tr.drafter, prompts, DecodeMode::parallel, row.k_infer,
                                               base.max_new, base.cost);
      row.acceptance_length = ev.stats.acceptance_length();
      row.simulated_throughput = ev.simulated_throughput;
      if (ev.mismatches > 0) row.status = "lossless-violation";
    } catch (const std::exception& e) {
      row.status = std::string("error: ") + e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "layers,unfreeze,k_train,k_infer,variant,acceptance_length,simulated_throughput,train_seconds,status\n";
  for (const auto& r : rows) {
    std::string status = r.status;
    for (char& ch : status) {
      if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
    }
    out << r.cell.layers << ',' << (r.cell.unfreeze ? 1 : 0) << ',' << r.cell.k_train << ',' << r.k_infer << ','
        << to_string(r.cell.variant) << ',' << r.acceptance_length << ',' << r.simulated_throughput << ','
        << r.train_seconds << ',' << status << '\n';
  }
}

// ---- command line -----------------------------------------------------------

namespace {

struct Common {
  std::string config;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  std::optional<int> k_train;
  std::optional<int> k_infer;
  std::optional<int> layers;
  std::optional<std::string> variant;
  std::optional<int> segments;
  std::optional<double> cod_ratio;
  std::optional<int> max_seq_len;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON experiment config");
  app->add_option("--seed", c.seed, "Base seed");
  app->add_option("--out", c.out_dir, "Output directory");
  app->add_option("--k-train", c.k_train, "Prediction depths used in training");
  app->add_option("--k-infer", c.k_infer, "Draft tokens per proposal");
  app->add_option("--layers", c.layers, "Drafter decoder layers");
  app->add_option("--variant", c.variant, "shared|depth_embed|ntp_proj_depth|ntp_proj|regularized");
  app->add_option("--segments", c.segments, "Segments per sequence");
  app->add_option("--cod-ratio", c.cod_ratio, "COD retention ratio");
  app->add_option("--max-seq-len", c.max_seq_len, "Maximum training sequence length");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig e = c.config.empty() ? ExperimentConfig{} : load_experiment(c.config);
  if (c.seed) {
    e.corpus.seed = *c.seed;
    e.target_train.seed = *c.seed + 1;
    e.train.seed = *c.seed + 2;
  }
  if (c.k_train) e.train.k_train = *c.k_train;
  if (c.k_infer) e.k_infer = *c.k_infer;
  if (c.layers) e.drafter.layers = *c.layers;
  if (c.variant) e.drafter.variant = variant_from_string(*c.variant);
  if (c.segments) e.train.segments = *c.segments;
  if (c.cod_ratio) e.train.cod_ratio = *c.cod_ratio;
  if (c.max_seq_len) {
    e.train.max_seq_len = *c.max_seq_len;
    e.target_train.max_seq_len = *c.max_seq_len;
  }
  e.drafter.depth_slots = e.train.k_train;
  e.train.validate();
  return e;
}

std::string out_path(const Common& c, const std::string& name) {
  std::filesystem::create_directories(c.out_dir);
  return (std::filesystem::path(c.out_dir) / name).string();
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  return f;
}

template <typename T>
std::vector<T> parse_list(const std::string& s, T (*conv)(const std::string&)) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(conv(item));
  }
  if (out.empty()) throw ConfigError("empty list '" + s + "'");
  return out;
}

int to_int(const std::string& s) {
  try {
    return std::stoi(s);
  } catch (const std::exception&) {
    throw ConfigError("not an integer: '" + s + "'");
  }
}

bool to_bool(const std::string& s) {
  if (s == "1" || s == "y" || s == "yes" || s == "true") return true;
  if (s == "0" || s == "n" || s == "no" || s == "false") return false;
  throw ConfigError("not a boolean: '" + s + "'");
}

Variant to_variant(const std::string& s) { return variant_from_string(s); }

// Last tenth of the corpus is held out unless a separate file is given.
void split_corpus(const Corpus& all, Corpus& train_set, Corpus& heldout) {
  const std::size_t cut = all.size() - all.size() / 10;
  train_set.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cut));
  heldout.assign(all.begin() + static_cast<std::ptrdiff_t>(cut), all.end());
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Parallel-drafting speculative decoding toolkit"};
  app.require_subcommand(1);

  Common gen_c, tt_c, td_c, ev_c, bm_c, pt_c, ab_c, dp_c;

  auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic corpus as JSON lines");
  add_common(gen, gen_c);
  std::string gen_kind;
  std::optional<int> gen_count, gen_vocab, gen_min, gen_max;
  std::optional<std::uint64_t> gen_table;
  gen->add_option("--kind", gen_kind, "markov|modular");
  gen->add_option("--count", gen_count, "Number of sequences");
  gen->add_option("--vocab", gen_vocab, "Vocabulary size (last id reserved)");
  gen->add_option("--min-len", gen_min, "Minimum sequence length");
  gen->add_option("--max-len", gen_max, "Maximum sequence length");
  gen->add_option("--table-seed", gen_table, "Seed of the Markov transition table");

  auto* tt = app.add_subcommand("train-target", "Train the target model on a corpus");
  add_common(tt, tt_c);
  std::string tt_corpus;
  tt->add_option("--corpus", tt_corpus, "Corpus JSON lines")->required();

  auto* td = app.add_subcommand("train-drafter", "Train a parallel drafter against a frozen target");
  add_common(td, td_c);
  std::string td_corpus, td_target;
  td->add_option("--corpus", td_corpus, "Corpus JSON lines")->required();
  td->add_option("--target", td_target, "Target checkpoint")->required();

  auto* ev = app.add_subcommand("eval", "Speculative decoding on held-out prompts");
  add_common(ev, ev_c);
  std::string ev_corpus, ev_target, ev_drafter, ev_mode = "parallel";
  std::optional<int> ev_max_new, ev_prompts, ev_prompt_len;
  ev->add_option("--corpus", ev_corpus, "Held-out corpus JSON lines")->required();
  ev->add_option("--target", ev_target, "Target checkpoint")->required();
  ev->add_option("--drafter", ev_drafter, "Drafter checkpoint");
  ev->add_option("--mode", ev_mode, "parallel|ar|target_only");
  ev->add_option("--max-new", ev_max_new, "New tokens per prompt");
  ev->add_option("--prompts", ev_prompts, "Number of prompts");
  ev->add_option("--prompt-len", ev_prompt_len, "Prompt length");

  auto* bm = app.add_subcommand("bench-mask", "Per-example vs precomputed mask construction");
  add_common(bm, bm_c);
  std::string bm_n = "256,2048";
  int bm_k = 8;
  int bm_repeats = 128;
  bm->add_option("--n", bm_n, "Comma-separated sequence lengths");
  bm->add_option("--k", bm_k, "Depths");
  bm->add_option("--repeats", bm_repeats, "Examples per length");

  auto* pt = app.add_subcommand("probe-theory", "RoPE score injectivity and position recovery");
  add_common(pt, pt_c);
  int pt_dim = 64, pt_trials = 1000, pt_range = 1024;
  double pt_base = 10000.0, pt_tol = 1e-9;
  pt->add_option("--dim", pt_dim, "Head dimension");
  pt->add_option("--base", pt_base, "Rotary base");
  pt->add_option("--range", pt_range, "Offsets 0..range-1");
  pt->add_option("--trials", pt_trials, "Random (q, k) pairs");
  pt->add_option("--tol", pt_tol, "Collision tolerance");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate a grid of drafter settings");
  add_common(ab, ab_c);
  std::string ab_corpus, ab_heldout, ab_target;
  std::string ab_layers = "1,2,4", ab_unfreeze = "1,0", ab_ktrain, ab_variants = "shared";
  ab->add_option("--corpus", ab_corpus, "Corpus JSON lines")->required();
  ab->add_option("--heldout", ab_heldout, "Held-out corpus (default: last tenth of --corpus)");
  ab->add_option("--target", ab_target, "Target checkpoint")->required();
  ab->add_option("--grid-layers", ab_layers, "Comma-separated layer counts");
  ab->add_option("--grid-unfreeze", ab_unfreeze, "Comma-separated 1/0");
  ab->add_option("--grid-k-train", ab_ktrain, "Comma-separated K_train (default: K_infer, K_infer+3)");
  ab->add_option("--grid-variants", ab_variants, "Comma-separated variants");

  auto* dp = app.add_subcommand("dump-plan", "Print the segment plan of one COD sample");
  add_common(dp, dp_c);
  int dp_n = 16;
  bool dp_fixture = false;
  dp->add_option("--n", dp_n, "Sequence length");
  dp->add_flag("--fixture", dp_fixture, "Use the 16-token worked example instead of sampling");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      ExperimentConfig e = resolve(gen_c);
      if (!gen_kind.empty()) {
        if (gen_kind == "markov") {
          e.corpus.kind = CorpusKind::markov;
        } else if (gen_kind == "modular") {
          e.corpus.kind = CorpusKind::modular;
        } else {
          throw ConfigError("unknown --kind '" + gen_kind + "'");
        }
      }
      if (gen_count) e.corpus.count = *gen_count;
      if (gen_vocab) e.corpus.vocab = *gen_vocab;
      if (gen_min) e.corpus.min_len = *gen_min;
      if (gen_max) e.corpus.max_len = *gen_max;
      if (gen_table) e.corpus.table_seed = *gen_table;
      const Corpus corpus = generate_corpus(e.corpus);
      const std::string path = out_path(gen_c, "corpus.jsonl");
      write_jsonl(path, corpus);
      out << nlohmann::json{{"corpus", path}, {"spec", e.corpus}, {"sequences", corpus.size()}}.dump() << '\n';
    } else if (*tt) {
      const ExperimentConfig e = resolve(tt_c);
      const Corpus corpus = read_jsonl(tt_corpus, e.target.vocab);
      auto metrics = open_out(out_path(tt_c, "target_metrics.jsonl"));
      const TargetModel model = train_target(corpus, e.target, e.target_train, &metrics);
      const std::string path = out_path(tt_c, "target.ckpt");
      save_target(path, model);
      out << nlohmann::json{{"target", path}, {"checksum", model.params.checksum()}}.dump() << '\n';
    } else if (*td) {
      ExperimentConfig e = resolve(td_c);
      const TargetModel target = load_target(td_target);
      const Corpus corpus = read_jsonl(td_corpus, target.config.vocab);
      e.train.checkpoint_dir = out_path(td_c, "checkpoints");
      auto metrics = open_out(out_path(td_c, "metrics.jsonl"));
      const TrainResult r = train(corpus, target, e.drafter, e.train, &metrics);
      const std::string path = out_path(td_c, "drafter.ckpt");
      save_drafter(path, r.drafter);
      out << nlohmann::json{{"drafter", path},
                            {"checksum", r.drafter.params.checksum()},
                            {"epoch_loss", r.metrics.epoch_loss()},
                            {"epoch_alpha", r.metrics.epoch_alpha()},
                            {"wall_seconds", r.metrics.wall_seconds}}
                 .dump()
          << '\n';
    } else if (*ev) {
      ExperimentConfig e = resolve(ev_c);
      if (ev_max_new) e.max_new = *ev_max_new;
      if (ev_prompts) e.eval_prompts = *ev_prompts;
      if (ev_prompt_len) e.prompt_len = *ev_prompt_len;
      const DecodeMode mode = decode_mode_from_string(ev_mode);
      const TargetModel target = load_target(ev_target);
      std::optional<DrafterModel> drafter;
      if (mode != DecodeMode::target_only) {
        if (ev_drafter.empty()) throw ConfigError("--drafter is required for speculative modes");
        drafter = load_drafter(ev_drafter);
      }
      const Corpus prompts = make_prompts(read_jsonl(ev_corpus, target.config.vocab), e.prompt_len, e.eval_prompts);
      auto trace = open_out(out_path(ev_c, "trace.jsonl"));
      const EvalSummary s = evaluate_decoding(target, drafter ? &*drafter : nullptr, prompts, mode, e.k_infer,
                                              e.max_new, e.cost, &trace);
      nlohmann::json summary = s.to_json();
      summary["cost_model"] = e.cost;
      auto f = open_out(out_path(ev_c, "eval.json"));
      f << summary.dump(2) << '\n';
      // The per-iteration acceptance list stays in eval.json.
      if (summary.contains("stats")) summary["stats"].erase("accepted");
      out << summary.dump() << '\n';
    } else if (*bm) {
      const ExperimentConfig e = resolve(bm_c);
      const std::uint64_t seed = bm_c.seed.value_or(0);
      auto f = open_out(out_path(bm_c, "bench_mask.jsonl"));
      for (int n : parse_list<int>(bm_n, to_int)) {
        const MaskBenchResult r = bench_mask(n, bm_k, e.train.cod_ratio, bm_repeats, seed);
        f << r.to_json().dump() << '\n';
        out << r.to_json().dump() << '\n';
      }
    } else if (*pt) {
      resolve(pt_c);
      const theory::RopeConfig cfg{pt_dim, pt_base};
      const theory::DeltaRange range{0, pt_range};
      const std::uint64_t seed = pt_c.seed.value_or(0);
      const theory::ProbeReport rep = theory::injectivity_probe(cfg, range, pt_trials, pt_tol, seed);
      std::mt19937_64 rng(seed ^ 0x9e37ull);
      std::normal_distribution<double> normal;
      int recovered = 0;
      int ambiguous = 0;
      for (int t = 0; t < pt_trials; ++t) {
        theory::Vec<double> q(pt_dim), k(pt_dim);
        for (int i = 0; i < pt_dim; ++i) q(i) = normal(rng);
        for (int i = 0; i < pt_dim; ++i) k(i) = normal(rng);
        const long delta = static_cast<long>(rng() % static_cast<std::uint64_t>(pt_range));
        const auto rec = theory::position_recovery(cfg, k, q, theory::attn_score<double>(q, k, cfg, delta), range, pt_tol);
        recovered += rec.delta == delta ? 1 : 0;
        ambiguous += rec.ambiguous ? 1 : 0;
      }
      nlohmann::json j = rep.to_json();
      j["recovery"] = {{"trials", pt_trials}, {"exact", recovered}, {"ambiguous", ambiguous}};
      auto f = open_out(out_path(pt_c, "probe.json"));
      f << j.dump(2) << '\n';
      out << j.dump() << '\n';
    } else if (*ab) {
      const ExperimentConfig e = resolve(ab_c);
      const TargetModel target = load_target(ab_target);
      Corpus train_set, heldout;
      const Corpus all = read_jsonl(ab_corpus, target.config.vocab);
      if (ab_heldout.empty()) {
        split_corpus(all, train_set, heldout);
      } else {
        train_set = all;
        heldout = read_jsonl(ab_heldout, target.config.vocab);
      }
      const std::vector<int> kt = ab_ktrain.empty() ? std::vector<int>{e.k_infer, e.k_infer + 3}
                                                    : parse_list<int>(ab_ktrain, to_int);
      const auto cells = ablation_grid(parse_list<int>(ab_layers, to_int), parse_list<bool>(ab_unfreeze, to_bool), kt,
                                       parse_list<Variant>(ab_variants, to_variant));
      const auto rows = run_ablation(e, target, train_set, heldout, cells);
      auto f = open_out(out_path(ab_c, "ablation.csv"));
      write_ablation_csv(f, rows);
      write_ablation_csv(out, rows);
    } else if (*dp) {
      const ExperimentConfig e = resolve(dp_c);
      LayoutSample sample;
      if (dp_fixture) {
        sample = layout_from_sets(16, {{1, 3, 4, 6, 7, 9, 10, 12, 14, 15}, {2, 5, 7, 8, 11, 13, 15}, {3, 6, 9, 12, 14}});
      } else {
        sample = cod_sample(dp_n, std::min(e.train.k_train, dp_n), e.train.cod_ratio, e.train.seed);
      }
      const SegmentPlan plan = partition(sample, std::min(e.train.segments, sample.n));
      nlohmann::json j = nlohmann::json::parse(plan.to_json());
      j["total_slots"] = sample.total();
      for (int s = 0; s < plan.segments; ++s) {
        const SegmentSlots seg = segment_slots(plan, sample, s);
        std::size_t owned = 0;
        for (bool b : seg.loss_bearing) owned += b ? 1 : 0;
        j["segment_sizes"].push_back({{"owned", owned}, {"context", seg.slots.size() - owned}});
      }
      auto f = open_out(out_path(dp_c, "plan.json"));
      f << j.dump(2) << '\n';
      out << j.dump() << '\n';
    }
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}

}  // namespace pdraft
