// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "pdraft/cli.hpp"
#include "pdraft/corpus.hpp"
#include "pdraft/maskgen.hpp"
#include "pdraft/partition.hpp"
#include "pdraft/runtime.hpp"
#include "pdraft/specdec.hpp"
#include "pdraft/theory.hpp"
#include "pdraft/trainer.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace pdraft;

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

const std::vector<std::vector<int>> kWorkedSets = {
    {1, 3, 4, 6, 7, 9, 10, 12, 14, 15}, {2, 5, 7, 8, 11, 13, 15}, {3, 6, 9, 12, 14}};

// ---- 1 ----------------------------------------------------------------------

Outcome mask_oracle() {
  const auto t0 = clock_type::now();
  long checked = 0;
  std::vector<BlockMaskSet> sets;
  for (int k = 1; k <= 6; ++k) {
    const BlockMaskSet& bm = sets.emplace_back(precompute(64, k));
    for (int n = 1; n <= 64; ++n) {
      std::string why;
      if (!oracle::mask_matches(slice_full(bm, n), full_layout(n, k).slots(), &why)) {
        return {false, "slice_full n=" + std::to_string(n) + " K=" + std::to_string(k) + ": " + why};
      }
      ++checked;
    }
  }
  std::mt19937_64 rng(101);
  for (int t = 0; t < 200; ++t) {
    const int k = 1 + static_cast<int>(rng() % 6);
    const int n = k + static_cast<int>(rng() % static_cast<unsigned>(65 - k));
    const LayoutSample s = cod_sample(n, k, 0.3 + 0.6 * oracle::unit(rng), rng());
    std::string why;
    if (!oracle::mask_matches(gather(sets[static_cast<std::size_t>(k) - 1], s), s.slots(), &why)) return {false, "gather trial " + std::to_string(t) + ": " + why};
    ++checked;
  }
  const double secs = seconds_since(t0);
  return {secs < 60.0, std::to_string(checked) + " masks bit-identical to the enumeration oracle in " +
                           fmt("%.1fs", secs)};
}

// ---- 2 ----------------------------------------------------------------------

Outcome position_invariance() {
  std::mt19937_64 rng(202);
  for (int t = 0; t < 50; ++t) {
    const int k = 1 + static_cast<int>(rng() % 8);
    const int n2 = 2 + static_cast<int>(rng() % 255);
    const int n1 = 1 + static_cast<int>(rng() % static_cast<unsigned>(n2 - 1));
    // Built from independent precomputations at the two lengths.
    const AssembledMask small = slice_full(precompute(n1, k), n1);
    const AssembledMask big = slice_full(precompute(n2, k), n2);
    const std::size_t m = small.order.size();
    if (!std::equal(small.order.begin(), small.order.end(), big.order.begin())) {
      return {false, "slot order differs at trial " + std::to_string(t)};
    }
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        if (small.bits.test(i, j) != big.bits.test(i, j)) {
          return {false, "n1=" + std::to_string(n1) + " n2=" + std::to_string(n2) + " K=" + std::to_string(k) +
                             " differs at " + to_string(small.order[i]) + "," + to_string(small.order[j])};
        }
      }
    }
  }
  return {true, "50 random (n1 < n2 <= 256, K <= 8) leading blocks identical"};
}

// ---- 3 ----------------------------------------------------------------------

Outcome worked_fixture() {
  const LayoutSample s = layout_from_sets(16, kWorkedSets);
  const SegmentPlan plan = partition(s, 2);
  const SegmentPlan naive = partition_by_position(s, 2);
  const bool total = s.total() == 38;
  const bool same = plan.segment_of(Slot{8, 2}) == plan.segment_of(Slot{7, 1});
  const bool naive_breaks = naive.segment_of(Slot{8, 2}) != naive.segment_of(Slot{7, 1});
  std::ostringstream d;
  d << "total=" << s.total() << "; algorithm (8,2)->" << plan.segment_of(Slot{8, 2}) << " (7,1)->"
    << plan.segment_of(Slot{7, 1}) << "; position buckets (8,2)->" << naive.segment_of(Slot{8, 2}) << " (7,1)->"
    << naive.segment_of(Slot{7, 1});
  return {total && same && naive_breaks, d.str()};
}

// ---- 4 ----------------------------------------------------------------------

Outcome dependency_preservation() {
  const auto t0 = clock_type::now();
  std::mt19937_64 rng(404);
  long violations = 0;
  long coverage_errors = 0;
  long slots = 0;
  for (int t = 0; t < 1000; ++t) {
    const int n = 1 + static_cast<int>(rng() % 256);
    const int k = 1 + static_cast<int>(rng() % 8);
    const int segs = 1 + static_cast<int>(rng() % static_cast<unsigned>(std::min(8, n)));
    const LayoutSample s = oracle::random_chain_sample(n, k, rng, 0.3 + 0.65 * oracle::unit(rng));
    const SegmentPlan plan = partition(s, segs);
    std::vector<SegmentSlots> members;
    for (int g = 0; g < segs; ++g) members.push_back(segment_slots(plan, s, g));
    for (int d = 1; d < k; ++d) {
      for (int p : s.positions[static_cast<std::size_t>(d)]) {
        const int seg = plan.segment_of(Slot{p, d});
        // The MTP chain stays in one segment; its depth-0 root is a key the
        // segment must carry, owned or as context.
        for (int j = 1; j < d; ++j) violations += plan.segment_of(Slot{p - j, d - j}) != seg ? 1 : 0;
        const auto& m = members[static_cast<std::size_t>(seg)].slots;
        violations += std::binary_search(m.begin(), m.end(), Slot{p - d, 0}) ? 0 : 1;
      }
    }
    std::multiset<Slot> owned;
    for (const SegmentSlots& ss : members) {
      for (std::size_t i = 0; i < ss.slots.size(); ++i) {
        if (ss.loss_bearing[i]) owned.insert(ss.slots[i]);
      }
    }
    const auto all = s.slots();
    slots += static_cast<long>(all.size());
    if (owned.size() != all.size() || !std::equal(owned.begin(), owned.end(), all.begin(), all.end())) ++coverage_errors;
  }
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << violations << " chain violations, " << coverage_errors << " coverage errors over " << slots << " slots in "
    << fmt("%.1fs", secs);
  return {violations == 0 && coverage_errors == 0 && secs < 60.0, d.str()};
}

// ---- 5 ----------------------------------------------------------------------

Outcome gradient_exactness() {
  const auto t0 = clock_type::now();
  std::mt19937_64 rng(505);
  double worst = 0.0;
  double strict = 0.0;
  int compared = 0;
  for (int t = 0; t < 50; ++t) {
    const int n = 4 + static_cast<int>(rng() % 61);
    const int k = 1 + static_cast<int>(rng() % 4);
    const TargetModel target = TargetModel::init(fixture::tiny_target_config(), rng());
    const auto tokens = fixture::random_tokens(n, target.config.vocab, rng);
    const Tensor2D fused = target_forward(target, tokens).fused;
    const Variant v = fixture::all_variants()[static_cast<std::size_t>(t) % 5];
    DrafterConfig dc = fixture::tiny_drafter_config(target.config, v, k);
    dc.dim = 16;
    dc.heads = 4;
    dc.mlp_hidden = 32;
    const DrafterModel m = DrafterModel::init(dc, rng());
    const BlockMaskSet masks = precompute(n, k);
    const LayoutSample s = cod_sample(n, k, 0.8, rng());
    DraftBatch b = build_example(tokens, fused, s, masks, dc.mask_token());
    b.dropout_active = v == Variant::regularized;
    b.dropout_seed = rng();
    const StepResult full = step_full(m, b);
    for (int segs : {2, 3, 4}) {
      const StepResult seg = step_segmented(m, b, s, partition(s, segs), masks);
      worst = std::max(worst, oracle::max_rel_diff(seg.grads, full.grads));
      strict = std::max(strict, oracle::max_rel_diff(seg.grads, full.grads, 0.0));
      ++compared;
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-9 && secs < 300.0, std::to_string(compared) + " comparisons, worst relative difference " +
                                             fmt("%.2e", worst) + " (unfloored element-wise " + fmt("%.2e", strict) +
                                             ") in " + fmt("%.1fs", secs)};
}

// ---- 6 ----------------------------------------------------------------------

Outcome autodiff() {
  std::mt19937_64 rng(606);
  const TargetModel target = TargetModel::init(fixture::tiny_target_config(), 7);
  const auto tokens = fixture::random_tokens(6, target.config.vocab, rng);
  const Tensor2D fused = target_forward(target, tokens).fused;
  const BlockMaskSet masks = precompute(6, 3);
  const LayoutSample s = layout_from_sets(6, {{1, 2, 4, 5}, {2, 3, 5}});
  std::size_t checked = 0;
  std::string failures;
  double worst = 0.0;
  for (Variant v : fixture::all_variants()) {
    DrafterModel m = DrafterModel::init(fixture::tiny_drafter_config(target.config, v), 11);
    DraftBatch b = build_example(tokens, fused, s, masks, m.config.mask_token());
    b.dropout_active = v == Variant::regularized;
    b.dropout_seed = 3;
    const auto rep = oracle::fd_check(m.params, [&](Binding& bd) { return loss(b, drafter_forward(bd, m, b).logits); },
                                      1e-5, 1e-4, 1e-7);
    checked += rep.checked;
    worst = std::max(worst, rep.worst_ratio);
    if (!rep.ok()) failures += " " + to_string(v) + " (" + rep.worst + ")";
  }
  return {failures.empty(), std::to_string(checked) + " parameter entries over 5 variants, worst error/tolerance " +
                                fmt("%.3f", worst) + (failures.empty() ? "" : "; failing:" + failures)};
}

// ---- 8 ----------------------------------------------------------------------

Outcome cod_count() {
  const double expect = 8192.0 * (1.0 - std::pow(0.8, 8)) / 0.2;
  double worst = 0.0;
  std::ostringstream d;
  d << "expected " << fmt("%.1f", expect) << ", totals";
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto total = static_cast<double>(cod_sample(8192, 8, 0.8, seed).total());
    worst = std::max(worst, std::abs(total - expect) / expect);
    d << ' ' << total;
  }
  d << "; worst deviation " << fmt("%.3f%%", 100.0 * worst);
  return {worst < 0.02 && std::abs(expect - 34088.0) < 1.0, d.str()};
}

// ---- 10 ---------------------------------------------------------------------

Outcome mask_overhead() {
  const MaskBenchResult r = bench_mask(2048, 8, 0.8, 128, 1010);
  std::ostringstream d;
  d << "per-example " << fmt("%.2fs", r.predicate_seconds) << " vs precompute " << fmt("%.2fs", r.precompute_seconds)
    << " + gather " << fmt("%.2fs", r.gather_seconds) << " -> " << fmt("%.1fx", r.ratio)
    << (r.identical ? ", masks identical" : ", MASKS DIFFER");
  return {r.ratio >= 5.0 && r.identical, d.str()};
}

// ---- 11 ---------------------------------------------------------------------

Outcome theory_probe() {
  const auto t0 = clock_type::now();
  const theory::RopeConfig cfg{64, 10000.0};
  const theory::DeltaRange range{0, 1024};
  const theory::ProbeReport rep = theory::injectivity_probe(cfg, range, 1000, 1e-9, 1111);
  std::mt19937_64 rng(1112);
  std::normal_distribution<double> normal;
  int exact = 0;
  const int trials = 1000;
  for (int t = 0; t < trials; ++t) {
    theory::Vec<double> q(64), k(64);
    for (int i = 0; i < 64; ++i) q(i) = normal(rng);
    for (int i = 0; i < 64; ++i) k(i) = normal(rng);
    const long delta = static_cast<long>(rng() % 1024);
    const auto r = theory::position_recovery(cfg, k, q, theory::attn_score<double>(q, k, cfg, delta), range);
    exact += r.delta == delta && !r.ambiguous ? 1 : 0;
  }
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << rep.collisions << " collisions over 1000 trials (min gap " << fmt("%.2e", rep.min_gap) << "), " << exact
    << "/" << trials << " exact recoveries, " << fmt("%.1fs", secs);
  return {rep.collisions == 0 && exact == trials && secs < 60.0, d.str()};
}

// ---- 7, 9, 12: trained models ----------------------------------------------

struct Trained {
  ExperimentConfig cfg;
  Corpus train_set;
  Corpus heldout;
  TargetModel target;
  DrafterModel deep;
  DrafterModel shallow;
  double seconds = 0.0;
  std::vector<double> deep_depth_accuracy;
};

ExperimentConfig base_config() {
  ExperimentConfig c;
  c.corpus.kind = CorpusKind::markov;
  c.corpus.vocab = 512;
  c.corpus.count = 2000;
  c.corpus.seed = 1;
  c.corpus.table_seed = 0;
  c.target.vocab = 512;
  c.target_train.seed = 2;
  c.train.seed = 3;
  return c;
}

Trained train_models() {
  const auto t0 = clock_type::now();
  Trained t{base_config(), {}, {}, {}, {}, {}, 0.0, {}};
  t.train_set = generate_corpus(t.cfg.corpus);
  CorpusSpec held = t.cfg.corpus;
  held.count = 200;
  held.seed = 99;
  t.heldout = generate_corpus(held);
  t.target = train_target(t.train_set, t.cfg.target, t.cfg.target_train);
  // K_train = 5 so the same drafters also serve the K_infer = 1..5 sweep.
  t.cfg.train.k_train = 5;
  DrafterConfig dc = t.cfg.drafter;
  dc.layers = 4;
  t.deep = train(t.train_set, t.target, dc, t.cfg.train).drafter;
  dc.layers = 1;
  t.shallow = train(t.train_set, t.target, dc, t.cfg.train).drafter;
  t.seconds = seconds_since(t0);
  return t;
}

Outcome training_outcome(const Trained& t) {
  const auto t0 = clock_type::now();
  const Corpus prompts = make_prompts(t.heldout, t.cfg.prompt_len, t.cfg.eval_prompts);
  const EvalSummary deep =
      evaluate_decoding(t.target, &t.deep, prompts, DecodeMode::parallel, 4, t.cfg.max_new, t.cfg.cost);
  const EvalSummary shallow =
      evaluate_decoding(t.target, &t.shallow, prompts, DecodeMode::parallel, 4, t.cfg.max_new, t.cfg.cost);
  const double total = t.seconds + seconds_since(t0);
  const double a4 = deep.stats.acceptance_length();
  const double a1 = shallow.stats.acceptance_length();
  std::ostringstream d;
  d << "acceptance length 4-layer " << fmt("%.3f", a4) << ", 1-layer " << fmt("%.3f", a1) << " at K_infer=4 on "
    << prompts.size() << " held-out prompts; train+eval " << fmt("%.0fs", total);
  return {a4 >= 1.5 && a4 >= a1 && deep.mismatches == 0 && shallow.mismatches == 0 && total <= 1800.0, d.str()};
}

Outcome losslessness(const Trained& t) {
  std::mt19937_64 rng(707);
  int mismatches = 0;
  int runs = 0;
  long accepted = 0;
  long iterations = 0;
  for (int i = 0; i < 50; ++i) {
    const auto& seq = t.heldout[static_cast<std::size_t>(rng() % t.heldout.size())];
    const auto len = static_cast<std::size_t>(1 + rng() % 12);
    const std::vector<int> prompt(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(len));
    DecodeOptions ref;
    ref.mode = DecodeMode::target_only;
    ref.max_new = 32;
    const auto want = decode(prompt, t.target, nullptr, ref).tokens;
    for (int k = 1; k <= 5; ++k) {
      for (DecodeMode mode : {DecodeMode::parallel, DecodeMode::ar}) {
        DecodeOptions o = ref;
        o.mode = mode;
        o.k_infer = k;
        const DecodeResult r = decode(prompt, t.target, &t.deep, o);
        mismatches += r.tokens != want ? 1 : 0;
        ++runs;
        for (int a : r.stats.accepted) accepted += a;
        iterations += r.stats.iterations;
      }
    }
  }
  std::ostringstream d;
  d << mismatches << " mismatches over " << runs << " decodes (mean accepted drafts per iteration "
    << fmt("%.2f", static_cast<double>(accepted) / static_cast<double>(iterations)) << ")";
  return {mismatches == 0, d.str()};
}

Outcome alpha_trend(const Trained& t) {
  ExperimentConfig c = base_config();
  DrafterConfig dc = c.drafter;
  dc.layers = 1;
  dc.variant = Variant::regularized;
  TrainConfig tc = c.train;
  tc.epochs = 4;
  const TrainResult r = train(t.train_set, t.target, dc, tc);
  const auto avg = r.metrics.epoch_alpha();
  bool decreasing = avg.size() >= 2;
  for (std::size_t e = 1; e < avg.size(); ++e) decreasing = decreasing && avg[e] < avg[e - 1];
  double peak = 0.0;
  for (const auto& s : r.metrics.steps) peak = std::max(peak, s.alpha);
  std::ostringstream d;
  d << "alpha init " << dc.alpha_init << ", epoch means";
  for (double a : avg) d << ' ' << fmt("%.4f", a);
  d << ", step peak " << fmt("%.4f", peak) << ", final " << fmt("%.4f", r.drafter.alpha_value());
  return {decreasing, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  // Optional copy of the report: ctest hides the output of passing tests.
  std::ofstream copy;
  if (argc > 1) copy.open(argv[1]);
  int failed = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::ostringstream line;
    line << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << o.detail << '\n';
    std::cout << line.str() << std::flush;
    copy << line.str() << std::flush;
  };

  report(1, "mask oracle equivalence", mask_oracle);
  report(2, "position invariance", position_invariance);
  report(3, "worked 16-token fixture", worked_fixture);
  report(4, "dependency preservation", dependency_preservation);
  report(5, "segmented gradient exactness", gradient_exactness);
  report(6, "finite-difference gradients", autodiff);
  report(8, "COD slot count", cod_count);
  report(10, "mask overhead", mask_overhead);
  report(11, "RoPE injectivity probe", theory_probe);

  std::optional<Trained> trained;
  std::string train_error;
  try {
    trained = train_models();
  } catch (const std::exception& e) {
    train_error = e.what();
  }
  auto with_models = [&](Outcome (*fn)(const Trained&)) {
    return [&, fn]() -> Outcome {
      if (!trained) return {false, "training failed: " + train_error};
      return fn(*trained);
    };
  };
  report(7, "speculative losslessness", with_models(losslessness));
  report(9, "desk-scale training outcome", with_models(training_outcome));
  report(12, "regularized alpha trend", with_models(alpha_trend));

  const std::string verdict = failed == 0 ? "ALL CRITERIA PASS" : std::to_string(failed) + " CRITERIA FAIL";
  std::cout << verdict << std::endl;
  copy << verdict << '\n';
  return failed == 0 ? 0 : 1;
}
