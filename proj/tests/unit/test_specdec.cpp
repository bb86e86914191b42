#include <doctest.h>

#include <random>
#include <sstream>

#include "pdraft/errors.hpp"
#include "pdraft/specdec.hpp"
#include "support/fixtures.hpp"

using namespace pdraft;

namespace {

constexpr int kFavored = 5;

// Output layer that ignores its input: the final norm emits its bias, so the
// logits are the same for every row and `token` wins.
void make_constant(ParamStore& p, std::size_t gain, std::size_t bias, std::size_t head, int token) {
  p[gain].value.setZero();
  p[bias].value.setOnes();
  p[head].value.setZero();
  p[head].value.col(token).setOnes();
}

// Random target whose favored token wins roughly half of the time, so a
// drafter that always proposes it is accepted for a varying prefix. Feature 0
// of the final norm is pinned to 1, which turns row 0 of the head into a
// logit bias.
TargetModel half_favoring_target(std::uint64_t seed) {
  TargetModel t = TargetModel::init(fixture::tiny_target_config(), seed);
  t.params[t.norm_gain].value(0, 0) = 0.0;
  t.params[t.norm_bias].value(0, 0) = 1.0;
  Tensor2D& head = t.params[t.head].value;
  head.row(0).setZero();
  std::mt19937_64 rng(seed);
  const auto probe = fixture::random_tokens(60, t.config.vocab, rng);
  const Tensor2D logits = target_forward(t, probe).logits;
  std::vector<double> gaps;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double best = -INFINITY;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      if (j != kFavored) best = std::max(best, logits(i, j));
    }
    gaps.push_back(best - logits(i, kFavored));
  }
  std::nth_element(gaps.begin(), gaps.begin() + static_cast<long>(gaps.size() / 2), gaps.end());
  head(0, kFavored) = gaps[gaps.size() / 2];
  return t;
}

DrafterModel constant_drafter(const TargetConfig& tc, int token, int depths = 5) {
  DrafterModel d = DrafterModel::init(fixture::tiny_drafter_config(tc, Variant::shared, depths), 3);
  make_constant(d.params, d.norm_gain, d.norm_bias, d.head, token);
  return d;
}

std::vector<std::vector<int>> prompts(int count, int vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<int>> out;
  for (int i = 0; i < count; ++i) out.push_back(fixture::random_tokens(1 + static_cast<int>(rng() % 9), vocab, rng));
  return out;
}

DecodeOptions options(DecodeMode mode, int k, int max_new) {
  DecodeOptions o;
  o.mode = mode;
  o.k_infer = k;
  o.max_new = max_new;
  return o;
}

}  // namespace

TEST_SUITE("specdec") {
  TEST_CASE("speculative output equals target-only greedy output") {
    const TargetModel random_target = TargetModel::init(fixture::tiny_target_config(), 41);
    const DrafterModel random_drafter =
        DrafterModel::init(fixture::tiny_drafter_config(random_target.config, Variant::ntp_proj, 5), 42);
    const TargetModel favoring = half_favoring_target(43);
    const DrafterModel proposer = constant_drafter(favoring.config, kFavored);

    long partial = 0;
    for (const auto& [target, drafter] :
         {std::pair{&random_target, &random_drafter}, std::pair{&favoring, &proposer}}) {
      for (const auto& prompt : prompts(12, target->config.vocab, 7)) {
        const auto ref = decode(prompt, *target, nullptr, options(DecodeMode::target_only, 1, 20)).tokens;
        CHECK(ref == greedy_reference(prompt, *target, 20));
        for (int k = 1; k <= 5; ++k) {
          for (DecodeMode mode : {DecodeMode::parallel, DecodeMode::ar}) {
            const DecodeResult r = decode(prompt, *target, drafter, options(mode, k, 20));
            INFO(to_string(mode), " k=", k);
            CHECK(r.tokens == ref);
            for (int a : r.stats.accepted) partial += a > 0 && a < k ? 1 : 0;
          }
        }
      }
    }
    // The favoring pair must exercise partial acceptance, not only the extremes.
    CHECK(partial > 0);
  }

  TEST_CASE("all drafts accepted and none accepted") {
    TargetModel t = TargetModel::init(fixture::tiny_target_config(), 5);
    make_constant(t.params, t.norm_gain, t.norm_bias, t.head, 7);
    const DrafterModel agree = constant_drafter(t.config, 7);
    const DrafterModel disagree = constant_drafter(t.config, 2);
    const std::vector<int> prompt = {1, 2, 3};
    for (int k = 1; k <= 5; ++k) {
      const DecodeResult best = decode(prompt, t, &agree, options(DecodeMode::parallel, k, 30));
      for (std::size_t i = 0; i + 1 < best.stats.accepted.size(); ++i) CHECK(best.stats.accepted[i] == k);
      CHECK(best.stats.acceptance_length() == doctest::Approx(best.stats.generated / double(best.stats.iterations)));
      CHECK(best.stats.accepted.front() == k);
      const DecodeResult worst = decode(prompt, t, &disagree, options(DecodeMode::ar, k, 30));
      CHECK(worst.stats.acceptance_length() == 1.0);
      CHECK(worst.stats.iterations == 30);
      CHECK(worst.tokens == best.tokens);
    }
    DecodeState s = start_decode(t, &agree, prompt);
    const std::vector<int> drafts = {7, 7, 7};
    const Verification v = verify_greedy(s, t, drafts);
    CHECK(v.accepted == 3);
    CHECK(v.bonus == 7);
    CHECK(s.tokens.size() == 7);
    const std::vector<int> wrong = {1, 7};
    const Verification w = verify_greedy(s, t, wrong);
    CHECK(w.accepted == 0);
    CHECK(w.bonus == 7);
    CHECK(s.tokens.size() == 8);
  }

  TEST_CASE("verification agrees with a token-by-token greedy oracle") {
    const TargetModel t = half_favoring_target(9);
    std::mt19937_64 rng(10);
    std::uniform_int_distribution<int> tok(0, t.config.vocab - 1);
    for (int trial = 0; trial < 40; ++trial) {
      const auto prompt = fixture::random_tokens(1 + static_cast<int>(rng() % 6), t.config.vocab, rng);
      // Drafts mixing the true continuation with random tokens.
      const auto truth = greedy_reference(prompt, t, 6);
      std::vector<int> drafts;
      const int k = 1 + static_cast<int>(rng() % 5);
      for (int i = 0; i < k; ++i) {
        const int want = truth[prompt.size() + static_cast<std::size_t>(i)];
        drafts.push_back(rng() % 3 == 0 ? tok(rng) : want);
      }
      int expect = 0;
      std::vector<int> seq = prompt;
      while (expect < k) {
        const auto full = target_forward(t, seq).logits;
        if (argmax_row(full.row(full.rows() - 1)) != drafts[static_cast<std::size_t>(expect)]) break;
        seq.push_back(drafts[static_cast<std::size_t>(expect)]);
        ++expect;
      }
      const auto full = target_forward(t, seq).logits;
      const int bonus = argmax_row(full.row(full.rows() - 1));

      DecodeState s = start_decode(t, nullptr, prompt);
      SpecStats stats;
      const Verification v = verify_greedy(s, t, drafts, &stats);
      CHECK(v.accepted == expect);
      CHECK(v.bonus == bonus);
      seq.push_back(bonus);
      CHECK(s.tokens == seq);
      CHECK(s.target_cache.length == s.last());
      REQUIRE(s.fused.rows() == s.last());
      const Tensor2D ref = target_forward(t, seq).fused;
      CHECK((s.fused - ref.topRows(s.last())).cwiseAbs().maxCoeff() < 1e-10);
      CHECK(stats.target_passes == 1);
      CHECK(stats.generated == expect + 1);
    }
  }

  TEST_CASE("proposals: shared first draft, pass counts, cache discipline") {
    const TargetModel t = TargetModel::init(fixture::tiny_target_config(), 12);
    const DrafterModel d = DrafterModel::init(fixture::tiny_drafter_config(t.config, Variant::ntp_proj_depth, 5), 13);
    const std::vector<int> prompt = {4, 1, 8, 2, 6};
    for (int k = 1; k <= 5; ++k) {
      DecodeState a = start_decode(t, &d, prompt);
      DecodeState b = start_decode(t, &d, prompt);
      SpecStats sa;
      SpecStats sb;
      const auto par = propose_parallel(a, d, k, &sa);
      const auto ar = propose_ar(b, d, k, &sb);
      REQUIRE(par.size() == static_cast<std::size_t>(k));
      REQUIRE(ar.size() == static_cast<std::size_t>(k));
      CHECK(par.front() == ar.front());
      CHECK(sa.drafter_passes == 1);
      CHECK(sb.drafter_passes == k);
      // Only committed depth-0 positions are cached.
      CHECK(a.drafter_cache.length == a.last() + 1);
      CHECK(b.drafter_cache.length == b.last() + 1);
    }

    // Proposal mask equals the precomputed-and-gathered mask for its slots.
    const auto slots = proposal_slots(3, 5, 4);
    CHECK(slots == std::vector<Slot>{{3, 0}, {4, 0}, {5, 0}, {6, 1}, {7, 2}, {8, 3}});
    const BlockMaskSet bm = precompute(9, 4);
    CHECK(build_direct(slots) == gather(bm, slots));

    // Across a decode, the drafter cache advances exactly with the committed tokens.
    DecodeState s = start_decode(t, &d, prompt);
    for (int it = 0; it < 6; ++it) {
      const int before = s.last();
      const auto drafts = propose_parallel(s, d, 3);
      CHECK(s.drafter_cache.length == before + 1);
      const Verification v = verify_greedy(s, t, drafts);
      CHECK(s.last() == before + v.accepted + 1);
      CHECK(s.target_cache.length == s.last());
      CHECK(s.fused.rows() == s.last());
    }

    DrafterModel shallow = DrafterModel::init(fixture::tiny_drafter_config(t.config, Variant::shared, 2), 1);
    DecodeState z = start_decode(t, &shallow, prompt);
    CHECK_THROWS_AS(propose_parallel(z, shallow, 3), ConfigError);
    CHECK_THROWS_AS(start_decode(t, &d, std::vector<int>{}), DomainError);
    CHECK_THROWS_AS(decode(prompt, t, nullptr, options(DecodeMode::parallel, 2, 4)), ConfigError);
  }

  TEST_CASE("accounting, bounds, trimming and traces") {
    const TargetModel t = half_favoring_target(21);
    const DrafterModel d = constant_drafter(t.config, kFavored);
    for (int k = 1; k <= 5; ++k) {
      std::ostringstream trace;
      DecodeOptions o = options(DecodeMode::parallel, k, 17);
      const DecodeResult r = decode(std::vector<int>{3}, t, &d, o, &trace);
      long sum = 0;
      for (int a : r.stats.accepted) sum += a + 1;
      CHECK(sum == r.stats.generated);
      CHECK(r.stats.target_passes == r.stats.iterations);
      CHECK(r.stats.drafter_passes == r.stats.iterations);
      CHECK(r.stats.acceptance_length() >= 1.0);
      CHECK(r.stats.acceptance_length() <= k + 1.0);
      CHECK(r.tokens.size() == 18);
      std::istringstream in(trace.str());
      std::string line;
      std::vector<nlohmann::json> rows;
      while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
      REQUIRE(rows.size() == static_cast<std::size_t>(r.stats.iterations) + 1);
      CHECK(rows.front().at("drafts").size() == static_cast<std::size_t>(k));
      CHECK(rows[rows.size() - 2].at("tokens") == 17);
      CHECK(rows.back().at("summary").at("generated") == r.stats.generated);
      CHECK(rows.back().at("simulated_throughput").get<double>() ==
            doctest::Approx(simulate_cost(r.stats, o.cost, d.config.layers)));
    }
    DecodeOptions stop = options(DecodeMode::target_only, 1, 40);
    const auto free_run = decode(std::vector<int>{2, 9}, t, nullptr, stop).tokens;
    stop.end_token = free_run[5];
    const auto stopped = decode(std::vector<int>{2, 9}, t, nullptr, stop).tokens;
    CHECK(stopped.back() == free_run[5]);
    CHECK(stopped.size() <= 6);
    stop.mode = DecodeMode::parallel;
    stop.k_infer = 4;
    CHECK(decode(std::vector<int>{2, 9}, t, &d, stop).tokens == stopped);
    CHECK(decode_mode_from_string("ar") == DecodeMode::ar);
    CHECK_THROWS_AS(decode_mode_from_string("beam"), ConfigError);
  }

  TEST_CASE("cost model algebra") {
    SpecStats s;
    s.iterations = 10;
    s.generated = 30;
    s.target_passes = 10;
    s.drafter_passes = 10;
    CostModel free;
    free.draft_fixed = 0.0;
    free.draft_per_layer = 0.0;
    free.t_target = 2.0;
    CHECK(simulate_cost(s, free, 4) == doctest::Approx(s.acceptance_length() / 2.0));

    CostModel cm;
    cm.t_target = 1.0;
    cm.draft_fixed = 0.0;
    cm.draft_per_layer = 0.1;
    cm.per_token_overhead = 0.01;
    CHECK(simulate_cost(s, cm, 2) == doctest::Approx(30.0 / (10.0 + 10.0 * 0.2 + 0.3)));

    // Same acceptance, AR spends K drafter passes per iteration.
    const int k = 3;
    SpecStats ar = s;
    ar.drafter_passes = k * s.iterations;
    for (int layers : {1, 2}) {
      const bool cheaper = cm.t_draft(layers) < k * cm.t_draft(layers);
      CHECK(cheaper == (simulate_cost(s, cm, layers) > simulate_cost(ar, cm, layers)));
    }
    // t_draft(4) = 4 t_draft(1): one 4-layer pass costs at least three 1-layer passes.
    CHECK(cm.t_draft(4) == doctest::Approx(4 * cm.t_draft(1)));
    CHECK(simulate_cost(s, cm, 4) <= simulate_cost(ar, cm, 1));

    CostModel bad;
    bad.t_target = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    nlohmann::json j = cm;
    CHECK(j.get<CostModel>().draft_per_layer == 0.1);
  }
}
