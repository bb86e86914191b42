#include <doctest.h>

#include <random>

#include "pdraft/errors.hpp"
#include "pdraft/model/drafter.hpp"
#include "pdraft/model/target.hpp"
#include "pdraft/trainer.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace pdraft;

namespace {

double max_abs_diff(const Tensor2D& a, const Tensor2D& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  return (a - b).cwiseAbs().maxCoeff();
}

bool bit_equal(const Tensor2D& a, const Tensor2D& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::equal(a.data(), a.data() + a.size(), b.data());
}

struct Setup {
  TargetModel target;
  std::vector<int> tokens;
  Tensor2D fused;
};

Setup make_setup(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Setup s{TargetModel::init(fixture::tiny_target_config(), seed), {}, {}};
  s.tokens = fixture::random_tokens(n, s.target.config.vocab, rng);
  s.fused = target_forward(s.target, s.tokens).fused;
  return s;
}

// Copies `from` without the named parameters, so a variant model can be
// reinterpreted as the shared baseline with identical remaining weights.
ParamStore without(const ParamStore& from, const std::vector<std::string>& drop) {
  ParamStore out;
  for (const Parameter& p : from) {
    if (std::find(drop.begin(), drop.end(), p.name) == drop.end()) out.add(p.name, p.value, p.trainable);
  }
  return out;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("target: shapes, fusion taps, causality") {
    const TargetConfig cfg = fixture::tiny_target_config();
    CHECK(cfg.fusion_taps() == std::vector<int>{2, 3});
    TargetConfig eight = cfg;
    eight.layers = 8;
    CHECK(eight.fusion_taps() == std::vector<int>{2, 4, 7});
    CHECK(eight.fused_width() == 3 * eight.dim);

    const TargetModel t = TargetModel::init(eight, 3);
    const std::vector<int> one = {4};
    const TargetOutput o = target_forward(t, one);
    CHECK(o.logits.rows() == 1);
    CHECK(o.logits.cols() == eight.vocab);
    CHECK(o.fused.cols() == 3 * eight.dim);

    const std::vector<int> a = {1, 5, 2, 7, 3, 9};
    std::vector<int> b = a;
    b[4] = 0;
    b[5] = 11;
    const TargetOutput oa = target_forward(t, a);
    const TargetOutput ob = target_forward(t, b);
    for (Eigen::Index i = 0; i < 4; ++i) {
      CHECK(bit_equal(oa.logits.row(i), ob.logits.row(i)));
      CHECK(bit_equal(oa.fused.row(i), ob.fused.row(i)));
    }
    CHECK_THROWS_AS(target_forward(t, std::vector<int>{1, 13}), VocabError);
    CHECK_THROWS_AS(target_forward(t, std::vector<int>{-1}), VocabError);
  }

  TEST_CASE("target: cached incremental decode equals full recompute") {
    const TargetModel t = TargetModel::init(fixture::tiny_target_config(), 5);
    std::vector<int> seq = {3, 1, 4};
    KVCache cache = t.make_cache();
    TargetOutput step = target_forward_cached(t, cache, seq);
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
      const int next = argmax_row(step.logits.row(step.logits.rows() - 1));
      seq.push_back(next);
      const TargetOutput full = target_forward(t, seq);
      // Chunks of varying width exercise multi-row cached calls too.
      step = target_forward_cached(t, cache, std::span<const int>(seq).subspan(seq.size() - 1));
      worst = std::max(worst, max_abs_diff(step.logits.row(0), full.logits.row(full.logits.rows() - 1)));
      worst = std::max(worst, max_abs_diff(step.fused.row(0), full.fused.row(full.fused.rows() - 1)));
      CHECK(argmax_row(step.logits.row(0)) == argmax_row(full.logits.row(full.logits.rows() - 1)));
    }
    CHECK(worst < 1e-10);
    KVCache c2 = t.make_cache();
    const TargetOutput part = target_forward_cached(t, c2, std::span<const int>(seq).first(7));
    c2.truncate(5);
    const TargetOutput rest = target_forward_cached(t, c2, std::span<const int>(seq).subspan(5));
    const TargetOutput full = target_forward(t, seq);
    CHECK(max_abs_diff(rest.logits, full.logits.bottomRows(rest.logits.rows())) < 1e-10);
    CHECK(part.logits.rows() == 7);
    CHECK_THROWS_AS(c2.truncate(c2.length + 1), RangeError);
  }

  TEST_CASE("drafter gradients of every variant pass finite differences on a 6-token example") {
    const Setup s = make_setup(6, 11);
    const BlockMaskSet masks = precompute(6, 3);
    const LayoutSample sample = layout_from_sets(6, {{1, 2, 4, 5}, {2, 3, 5}});
    for (Variant v : fixture::all_variants()) {
      for (bool shared_combiner : {true, false}) {
        DrafterConfig dc = fixture::tiny_drafter_config(s.target.config, v);
        dc.shared_combiner = shared_combiner;
        DrafterModel m = DrafterModel::init(dc, 21);
        DraftBatch batch = build_example(s.tokens, s.fused, sample, masks, dc.mask_token());
        batch.dropout_active = v == Variant::regularized;
        batch.dropout_seed = 99;
        const auto rep = oracle::fd_check(m.params, [&](Binding& bd) {
          return loss(batch, drafter_forward(bd, m, batch).logits);
        });
        INFO(to_string(v), " shared_combiner=", shared_combiner, " ", rep.worst);
        CHECK(rep.ok());
      }
    }
  }

  TEST_CASE("variant hidden follows its definition") {
    const TargetConfig tc = fixture::tiny_target_config();
    std::mt19937_64 rng(4);
    const Tensor2D h_ntp = oracle::random_matrix(3, 8, rng);
    const std::vector<Slot> slots = {Slot{3, 1}, Slot{4, 2}, Slot{5, 1}};

    auto run = [&](const DrafterModel& m, bool dropout) {
      Tape tape(false);
      Binding bd(tape, m.params);
      return build_variant_hidden(bd, m, tape.constant(h_ntp), slots, dropout, 7).value();
    };

    const DrafterModel reg = DrafterModel::init(fixture::tiny_drafter_config(tc, Variant::regularized), 1);
    CHECK(reg.alpha_value() == 0.1);
    const Tensor2D proj = h_ntp * reg.params[*reg.ntp_proj_w].value +
                          reg.params[*reg.ntp_proj_b].value.replicate(3, 1);
    const Tensor2D want = reg.params[reg.h_shared].value.replicate(3, 1) + 0.1 * proj;
    CHECK(max_abs_diff(run(reg, false), want) < 1e-14);
    // Dropout zeroes some projected entries and rescales the rest by 1/(1-p).
    const Tensor2D dropped = run(reg, true);
    const Tensor2D base = reg.params[reg.h_shared].value.replicate(3, 1);
    int zeros = 0;
    for (Eigen::Index i = 0; i < dropped.size(); ++i) {
      const double inj = dropped.data()[i] - base.data()[i];
      const double full = 0.1 * proj.data()[i];
      if (std::abs(inj) < 1e-15) {
        ++zeros;
      } else {
        CHECK(inj == doctest::Approx(full / 0.75).epsilon(1e-12));
      }
    }
    CHECK(zeros > 0);

    const DrafterModel shared = DrafterModel::init(fixture::tiny_drafter_config(tc, Variant::shared), 1);
    CHECK(bit_equal(run(shared, false), shared.params[shared.h_shared].value.replicate(3, 1)));

    DrafterModel de = DrafterModel::init(fixture::tiny_drafter_config(tc, Variant::depth_embed), 1);
    const Tensor2D& e = de.params[*de.depth_embed].value;
    Tensor2D want_de = de.params[de.h_shared].value.replicate(3, 1);
    want_de.row(0) += e.row(1);
    want_de.row(1) += e.row(2);
    want_de.row(2) += e.row(1);
    CHECK(max_abs_diff(run(de, false), want_de) < 1e-15);
    const std::vector<Slot> too_deep = {Slot{5, 3}};
    Tape tape(false);
    Binding bd(tape, de.params);
    CHECK_THROWS_AS(build_variant_hidden(bd, de, tape.constant(Tensor2D::Zero(1, 8)), too_deep, false, 0),
                    RangeError);
  }

  TEST_CASE("augmented variants with zeroed extras reproduce the shared baseline bit for bit") {
    const Setup s = make_setup(12, 8);
    const BlockMaskSet masks = precompute(12, 3);
    const LayoutSample sample = cod_sample(12, 3, 0.7, 5);
    for (Variant v : fixture::all_variants()) {
      if (v == Variant::shared) continue;
      DrafterModel m = DrafterModel::init(fixture::tiny_drafter_config(s.target.config, v), 31);
      std::vector<std::string> extras;
      if (m.depth_embed) {
        m.params[*m.depth_embed].value.setZero();
        extras.push_back("drafter.depth_embed");
      }
      if (v == Variant::regularized) {
        m.params[*m.alpha].value.setZero();
        extras.push_back("drafter.alpha");
        extras.push_back("drafter.ntp_proj.w");
        extras.push_back("drafter.ntp_proj.b");
      } else if (m.ntp_proj_w) {
        m.params[*m.ntp_proj_w].value.setZero();
        m.params[*m.ntp_proj_b].value.setZero();
        extras.push_back("drafter.ntp_proj.w");
        extras.push_back("drafter.ntp_proj.b");
      }
      DrafterConfig sc = m.config;
      sc.variant = Variant::shared;
      const DrafterModel base = DrafterModel::from_params(sc, without(m.params, extras));
      const DraftBatch batch = build_example(s.tokens, s.fused, sample, masks, m.config.mask_token());
      INFO(to_string(v));
      CHECK(bit_equal(drafter_eval(m, batch).logits, drafter_eval(base, batch).logits));
    }
  }

  TEST_CASE("mask compliance: perturbing a hidden key leaves the query exactly unchanged") {
    const Setup s = make_setup(14, 12);
    const BlockMaskSet masks = precompute(14, 4);
    const LayoutSample sample = cod_sample(14, 4, 0.8, 3);
    for (Variant v : {Variant::shared, Variant::ntp_proj_depth}) {
      const DrafterModel m = DrafterModel::init(fixture::tiny_drafter_config(s.target.config, v, 4), 2);
      const DraftBatch batch = build_example(s.tokens, s.fused, sample, masks, m.config.mask_token());
      const Tensor2D ref = drafter_eval(m, batch).logits;
      int hidden_pairs = 0;
      for (std::size_t k = 0; k < batch.size(); ++k) {
        DraftBatch b = batch;
        b.fused.row(static_cast<Eigen::Index>(k)).array() += 0.5;
        if (b.slots[k].depth == 0) b.tokens[k] = (b.tokens[k] + 1) % (m.config.vocab - 1);
        const Tensor2D out = drafter_eval(m, b).logits;
        bool self_changed = false;
        for (std::size_t q = 0; q < batch.size(); ++q) {
          const auto qi = static_cast<Eigen::Index>(q);
          if (q == k) self_changed = !bit_equal(out.row(qi), ref.row(qi));
          if (mask_allowed(batch.slots[q], batch.slots[k])) continue;
          ++hidden_pairs;
          INFO("q=", to_string(batch.slots[q]), " k=", to_string(batch.slots[k]));
          CHECK(bit_equal(out.row(qi), ref.row(qi)));
        }
        // Deeper slots of the shared variant ignore their fused row by design.
        if (b.slots[k].depth == 0 || uses_ntp_projection(v)) CHECK(self_changed);
      }
      CHECK(hidden_pairs > 0);
    }
  }

  TEST_CASE("rotary: shifting every position leaves logits unchanged") {
    const Setup s = make_setup(10, 2);
    const BlockMaskSet masks = precompute(10, 3);
    const DrafterModel m = DrafterModel::init(fixture::tiny_drafter_config(s.target.config, Variant::shared), 9);
    const DraftBatch batch = build_example(s.tokens, s.fused, cod_sample(10, 3, 0.8, 1), masks, m.config.mask_token());
    const Tensor2D ref = drafter_eval(m, batch).logits;
    for (int c : {1, 17, 500}) {
      DraftBatch b = batch;
      for (int& p : b.positions) p += c;
      CHECK(max_abs_diff(drafter_eval(m, b).logits, ref) < 1e-10);
    }
  }

  TEST_CASE("depth-0 only batches equal a slot-by-slot cached forward") {
    const Setup s = make_setup(9, 6);
    const BlockMaskSet masks = precompute(9, 1);
    const DrafterModel m = DrafterModel::init(fixture::tiny_drafter_config(s.target.config, Variant::shared, 1), 4);
    const DraftBatch full = build_example(s.tokens, s.fused, full_layout(9, 1), masks, m.config.mask_token());
    const Tensor2D ref = drafter_eval(m, full).logits;
    KVCache cache = m.make_cache();
    double worst = 0.0;
    for (int p = 0; p < 9; ++p) {
      DraftBatch one = build_example(std::span<const int>(s.tokens).first(static_cast<std::size_t>(p) + 1),
                                     s.fused.topRows(p + 1), full_layout(p + 1, 1), masks, m.config.mask_token());
      // Keep only the newest slot; earlier ones come from the cache.
      DraftBatch last;
      last.slots = {one.slots.back()};
      last.tokens = {one.tokens.back()};
      last.positions = {p};
      last.fused = one.fused.bottomRows(1);
      last.mask = build_direct(last.slots);
      const std::vector<int> rows = {0};
      const Tensor2D out = drafter_eval(m, last, &cache, rows).logits;
      worst = std::max(worst, max_abs_diff(out.row(0), ref.row(p)));
    }
    CHECK(cache.length == 9);
    CHECK(worst < 1e-10);
  }

  TEST_CASE("drafter input validation") {
    const Setup s = make_setup(6, 1);
    const BlockMaskSet masks = precompute(6, 2);
    const DrafterModel m = DrafterModel::init(fixture::tiny_drafter_config(s.target.config, Variant::shared, 2), 4);
    const DraftBatch batch = build_example(s.tokens, s.fused, full_layout(6, 2), masks, m.config.mask_token());
    DraftBatch bad = batch;
    std::swap(bad.slots[0], bad.slots[1]);
    CHECK_THROWS_AS(drafter_eval(m, bad), IntegrityError);
    bad = batch;
    bad.tokens[0] = m.config.vocab;
    CHECK_THROWS_AS(drafter_eval(m, bad), VocabError);
    bad = batch;
    bad.fused = Tensor2D::Zero(static_cast<Eigen::Index>(batch.size()), 3);
    CHECK_THROWS_AS(drafter_eval(m, bad), DimensionError);
    DrafterConfig dc = m.config;
    dc.dropout = 1.0;
    CHECK_THROWS_AS(dc.validate(), ConfigError);
    CHECK(variant_from_string(to_string(Variant::ntp_proj_depth)) == Variant::ntp_proj_depth);
    CHECK_THROWS_AS(variant_from_string("nope"), ConfigError);
  }
}
