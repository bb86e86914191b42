#include "pdraft/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <ostream>
#include <random>

namespace pdraft {

// ---- optimizer --------------------------------------------------------------

Adam::Adam(const ParamStore& params, AdamConfig config) : config_(config) {
  m_ = params.zero_gradients();
  v_ = params.zero_gradients();
}

void Adam::step(ParamStore& params, const Gradients& grads, double lr) {
  if (grads.size() != params.size() || m_.size() != params.size()) {
    throw IntegrityError("Adam: gradient map does not match parameters");
  }
  double scale_by = 1.0;
  if (config_.clip_norm > 0.0) {
    double sq = 0.0;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (params[i].trainable) sq += grads[i].squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) scale_by = config_.clip_norm / norm;
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, t_);
  const double bc2 = 1.0 - std::pow(config_.beta2, t_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    const Tensor2D g = grads[i] * scale_by;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    params[i].value.array() -=
        lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.eps);
  }
}

double linear_schedule(int step, int total_steps, double peak, double warmup_ratio) {
  if (total_steps <= 0) return peak;
  const int warmup = std::max(1, static_cast<int>(std::ceil(warmup_ratio * total_steps)));
  if (step < warmup) return peak * static_cast<double>(step + 1) / warmup;
  const int remain = std::max(1, total_steps - warmup);
  return peak * std::max(0.0, 1.0 - static_cast<double>(step - warmup) / remain);
}

// ---- config -----------------------------------------------------------------

void TrainConfig::validate() const {
  if (k_train < 1) throw ConfigError("train: k_train must be >= 1");
  if (!(cod_ratio > 0.0 && cod_ratio < 1.0)) throw ConfigError("train: cod_ratio must lie in (0,1)");
  if (max_seq_len < 2) throw ConfigError("train: max_seq_len must be >= 2");
  if (segments < 1) throw ConfigError("train: segments must be >= 1");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (!(peak_lr > 0.0)) throw ConfigError("train: peak_lr must be positive");
  if (warmup_ratio < 0.0 || warmup_ratio > 1.0) throw ConfigError("train: warmup_ratio must lie in [0,1]");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
}

namespace {

nlohmann::json adam_json(const AdamConfig& a) {
  return {{"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"clip_norm", a.clip_norm}};
}

void adam_from(const nlohmann::json& j, AdamConfig& a) {
  a.beta1 = j.value("beta1", a.beta1);
  a.beta2 = j.value("beta2", a.beta2);
  a.eps = j.value("eps", a.eps);
  a.clip_norm = j.value("clip_norm", a.clip_norm);
}

}  // namespace

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"k_train", c.k_train},
                     {"cod_ratio", c.cod_ratio},
                     {"max_seq_len", c.max_seq_len},
                     {"segments", c.segments},
                     {"epochs", c.epochs},
                     {"peak_lr", c.peak_lr},
                     {"warmup_ratio", c.warmup_ratio},
                     {"batch_size", c.batch_size},
                     {"max_slots_per_forward", c.max_slots_per_forward},
                     {"seed", c.seed},
                     {"adam", adam_json(c.adam)},
                     {"checkpoint_dir", c.checkpoint_dir}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.k_train = j.value("k_train", c.k_train);
  c.cod_ratio = j.value("cod_ratio", c.cod_ratio);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.segments = j.value("segments", c.segments);
  c.epochs = j.value("epochs", c.epochs);
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_slots_per_forward = j.value("max_slots_per_forward", c.max_slots_per_forward);
  c.seed = j.value("seed", c.seed);
  if (j.contains("adam")) adam_from(j.at("adam"), c.adam);
  c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
}

void to_json(nlohmann::json& j, const TargetTrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},         {"peak_lr", c.peak_lr},
                     {"warmup_ratio", c.warmup_ratio}, {"batch_size", c.batch_size},
                     {"max_seq_len", c.max_seq_len}, {"seed", c.seed},
                     {"adam", adam_json(c.adam)}};
}

void from_json(const nlohmann::json& j, TargetTrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.seed = j.value("seed", c.seed);
  if (j.contains("adam")) adam_from(j.at("adam"), c.adam);
}

// ---- examples ---------------------------------------------------------------

DraftBatch build_example(std::span<const int> tokens, const Tensor2D& fused, const LayoutSample& sample,
                         const BlockMaskSet& masks, int mask_token) {
  const int n = static_cast<int>(tokens.size());
  if (sample.n != n) {
    throw IntegrityError("build_example: sample length " + std::to_string(sample.n) + " for " +
                         std::to_string(n) + " tokens");
  }
  if (fused.rows() != n) throw DimensionError("build_example: fused hidden rows do not match tokens");
  DraftBatch b;
  b.mask = gather(masks, sample);
  b.slots = b.mask.order;
  const std::size_t L = b.slots.size();
  b.tokens.resize(L);
  b.positions.resize(L);
  b.labels.resize(L);
  b.loss_weight.resize(L);
  b.fused = Tensor2D::Zero(static_cast<Eigen::Index>(L), fused.cols());
  for (std::size_t i = 0; i < L; ++i) {
    const Slot s = b.slots[i];
    const auto p = static_cast<std::size_t>(s.pos);
    b.tokens[i] = s.depth == 0 ? tokens[p] : mask_token;
    b.positions[i] = s.pos;
    const int root = s.pos - s.depth;
    if (root >= 1) b.fused.row(static_cast<Eigen::Index>(i)) = fused.row(root - 1);
    const bool has_label = s.pos + 1 < n;
    b.labels[i] = has_label ? tokens[p + 1] : 0;
    b.loss_weight[i] = has_label ? 1.0 : 0.0;
  }
  return b;
}

BuiltExample build_example(std::span<const int> tokens, const Tensor2D& fused, const TrainConfig& cfg,
                           std::uint64_t example_seed, const BlockMaskSet& masks, int mask_token) {
  const int n = static_cast<int>(tokens.size());
  if (n > cfg.max_seq_len) {
    throw RangeError("build_example: sequence of length " + std::to_string(n) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  if (n < 1) throw DomainError("build_example: empty sequence");
  BuiltExample ex;
  ex.depths_used = std::min(cfg.k_train, n);
  ex.sample = cod_sample(n, ex.depths_used, cfg.cod_ratio, example_seed);
  ex.sample.depths = cfg.k_train;
  ex.sample.positions.resize(static_cast<std::size_t>(cfg.k_train));
  ex.batch = build_example(tokens, fused, ex.sample, masks, mask_token);
  return ex;
}

DraftBatch select_slots(const DraftBatch& batch, const SegmentSlots& seg, const BlockMaskSet& masks) {
  DraftBatch out;
  out.mask = gather(masks, seg.slots);
  out.slots = seg.slots;
  const std::size_t L = seg.slots.size();
  out.tokens.resize(L);
  out.positions.resize(L);
  out.labels.resize(L);
  out.loss_weight.resize(L);
  out.fused.resize(static_cast<Eigen::Index>(L), batch.fused.cols());
  const bool has_direct = !batch.direct.empty();
  if (has_direct) {
    out.direct.resize(L);
    out.direct_hidden.resize(static_cast<Eigen::Index>(L), batch.direct_hidden.cols());
  }
  out.dropout_active = batch.dropout_active;
  out.dropout_seed = batch.dropout_seed;
  for (std::size_t i = 0; i < L; ++i) {
    auto it = std::lower_bound(batch.slots.begin(), batch.slots.end(), seg.slots[i]);
    if (it == batch.slots.end() || *it != seg.slots[i]) {
      throw IntegrityError("select_slots: slot " + to_string(seg.slots[i]) + " is not in the batch");
    }
    const auto src = static_cast<std::size_t>(it - batch.slots.begin());
    out.tokens[i] = batch.tokens[src];
    out.positions[i] = batch.positions[src];
    out.labels[i] = batch.labels[src];
    out.loss_weight[i] = seg.loss_bearing[i] ? batch.loss_weight[src] : 0.0;
    out.fused.row(static_cast<Eigen::Index>(i)) = batch.fused.row(static_cast<Eigen::Index>(src));
    if (has_direct) {
      out.direct[i] = batch.direct[src];
      out.direct_hidden.row(static_cast<Eigen::Index>(i)) = batch.direct_hidden.row(static_cast<Eigen::Index>(src));
    }
  }
  return out;
}

Var loss(const DraftBatch& batch, Var logits) {
  const std::size_t count = batch.loss_count();
  if (count == 0) throw EmptyBatchError("loss: batch has no loss-bearing slots");
  return cross_entropy(logits, batch.labels, batch.loss_weight, static_cast<double>(count));
}

// ---- steps ------------------------------------------------------------------

void DepthTally::resize(int depths) {
  if (static_cast<int>(correct.size()) < depths) {
    correct.resize(static_cast<std::size_t>(depths), 0);
    total.resize(static_cast<std::size_t>(depths), 0);
  }
}

void DepthTally::add(const DraftBatch& batch, const Tensor2D& logits) {
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch.loss_weight[i] == 0.0) continue;
    const int d = batch.slots[i].depth;
    resize(d + 1);
    ++total[static_cast<std::size_t>(d)];
    if (argmax_row(logits.row(static_cast<Eigen::Index>(i))) == batch.labels[i]) ++correct[static_cast<std::size_t>(d)];
  }
}

void DepthTally::merge(const DepthTally& other) {
  resize(static_cast<int>(other.total.size()));
  for (std::size_t d = 0; d < other.total.size(); ++d) {
    correct[d] += other.correct[d];
    total[d] += other.total[d];
  }
}

std::vector<double> DepthTally::accuracy() const {
  std::vector<double> acc(total.size(), 0.0);
  for (std::size_t d = 0; d < total.size(); ++d) {
    if (total[d] > 0) acc[d] = static_cast<double>(correct[d]) / static_cast<double>(total[d]);
  }
  return acc;
}

StepResult step_full(const DrafterModel& model, const DraftBatch& batch, std::size_t max_slots) {
  if (max_slots > 0 && batch.size() > max_slots) {
    throw BudgetError("step_full: " + std::to_string(batch.size()) + " slots exceed the forward budget of " +
                      std::to_string(max_slots) + "; use step_segmented with more segments");
  }
  Tape tape;
  Binding bind(tape, model.params);
  DrafterGraph g = drafter_forward(bind, model, batch);
  Var l = loss(batch, g.logits);
  tape.backward(l);
  StepResult r;
  r.loss = l.value()(0, 0);
  r.grads = bind.gradients();
  r.tally.add(batch, g.logits.value());
  r.peak_slots = batch.size();
  return r;
}

StepResult step_segmented(const DrafterModel& model, const DraftBatch& batch, const LayoutSample& sample,
                          const SegmentPlan& plan, const BlockMaskSet& masks) {
  if (plan.length != sample.n || plan.assignment.size() != static_cast<std::size_t>(sample.depths)) {
    throw IntegrityError("step_segmented: plan was built for a different sample");
  }
  std::size_t assigned = 0;
  for (const auto& row : plan.assignment) {
    for (int a : row) assigned += a >= 0 ? 1 : 0;
  }
  for (int d = 0; d < sample.depths; ++d) {
    for (int p : sample.positions[static_cast<std::size_t>(d)]) {
      const int a = plan.segment_of(Slot{p, d});
      if (a < 0 || a >= plan.segments) {
        throw IntegrityError("step_segmented: slot " + to_string(Slot{p, d}) + " has no segment");
      }
    }
  }
  if (assigned != sample.total() || batch.slots != sample.slots()) {
    throw IntegrityError("step_segmented: plan, sample and batch disagree on the slot set");
  }
  const std::size_t count = batch.loss_count();
  if (count == 0) throw EmptyBatchError("step_segmented: batch has no loss-bearing slots");

  StepResult r;
  r.grads = model.params.zero_gradients();
  for (int s = 0; s < plan.segments; ++s) {
    const SegmentSlots seg = segment_slots(plan, sample, s);
    if (seg.slots.empty()) continue;
    const DraftBatch sub = select_slots(batch, seg, masks);
    r.peak_slots = std::max(r.peak_slots, sub.size());
    if (sub.loss_count() == 0) continue;
    Tape tape;
    Binding bind(tape, model.params);
    DrafterGraph g = drafter_forward(bind, model, sub);
    Var l = cross_entropy(g.logits, sub.labels, sub.loss_weight, static_cast<double>(count));
    tape.backward(l);
    bind.accumulate_into(r.grads);
    r.loss += l.value()(0, 0);
    r.tally.add(sub, g.logits.value());
  }
  return r;
}

// ---- metrics ----------------------------------------------------------------

nlohmann::json StepRecord::to_json() const {
  return nlohmann::json{{"step", step},
                        {"epoch", epoch},
                        {"loss", loss},
                        {"lr", lr},
                        {"depth_accuracy", depth_accuracy},
                        {"alpha", alpha},
                        {"peak_slots", peak_slots},
                        {"timestamp", timestamp}};
}

std::vector<double> TrainMetrics::epoch_alpha() const {
  std::vector<double> sum;
  std::vector<int> cnt;
  for (const auto& s : steps) {
    if (static_cast<int>(sum.size()) <= s.epoch) {
      sum.resize(static_cast<std::size_t>(s.epoch) + 1, 0.0);
      cnt.resize(static_cast<std::size_t>(s.epoch) + 1, 0);
    }
    sum[static_cast<std::size_t>(s.epoch)] += s.alpha;
    ++cnt[static_cast<std::size_t>(s.epoch)];
  }
  for (std::size_t e = 0; e < sum.size(); ++e) sum[e] = cnt[e] ? sum[e] / cnt[e] : 0.0;
  return sum;
}

std::vector<double> TrainMetrics::epoch_loss() const {
  std::vector<double> sum;
  std::vector<int> cnt;
  for (const auto& s : steps) {
    if (static_cast<int>(sum.size()) <= s.epoch) {
      sum.resize(static_cast<std::size_t>(s.epoch) + 1, 0.0);
      cnt.resize(static_cast<std::size_t>(s.epoch) + 1, 0);
    }
    sum[static_cast<std::size_t>(s.epoch)] += s.loss;
    ++cnt[static_cast<std::size_t>(s.epoch)];
  }
  for (std::size_t e = 0; e < sum.size(); ++e) sum[e] = cnt[e] ? sum[e] / cnt[e] : 0.0;
  return sum;
}

// ---- training loops ---------------------------------------------------------

namespace {

double unix_seconds() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

std::vector<std::vector<int>> usable_sequences(const std::vector<std::vector<int>>& corpus, int max_len) {
  std::vector<std::vector<int>> out;
  out.reserve(corpus.size());
  for (const auto& seq : corpus) {
    if (seq.size() < 2) continue;
    const auto len = std::min(seq.size(), static_cast<std::size_t>(max_len));
    out.emplace_back(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(len));
  }
  if (out.empty()) throw EmptyBatchError("training corpus has no sequence with at least two tokens");
  return out;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(epoch) + 0x51ed27ull)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace

TrainResult train(const std::vector<std::vector<int>>& corpus, const TargetModel& target,
                  const DrafterConfig& drafter_config, const TrainConfig& cfg, std::ostream* metrics_out) {
  cfg.validate();
  DrafterConfig dc = drafter_config;
  dc.vocab = target.config.vocab;
  dc.fused_width = target.config.fused_width();
  dc.depth_slots = cfg.k_train;
  dc.validate();

  const auto sequences = usable_sequences(corpus, cfg.max_seq_len);
  const BlockMaskSet masks = precompute(cfg.max_seq_len, cfg.k_train, mask_budget_from_env());
  TrainResult result{DrafterModel::init(dc, splitmix64(cfg.seed ^ 0xd7a1ull), &target), {}};
  DrafterModel& drafter = result.drafter;

  // Target hidden states are fixed, so they are computed once.
  std::vector<Tensor2D> fused(sequences.size());
  for (std::size_t i = 0; i < sequences.size(); ++i) fused[i] = target_forward(target, sequences[i]).fused;

  Adam adam(drafter.params, cfg.adam);
  const auto per_epoch = static_cast<int>((sequences.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                          static_cast<std::size_t>(cfg.batch_size));
  const int total_steps = per_epoch * cfg.epochs;
  const auto t0 = std::chrono::steady_clock::now();
  std::string last_checkpoint;
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(sequences.size(), cfg.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Gradients grads = drafter.params.zero_gradients();
      DepthTally tally;
      double loss_sum = 0.0;
      std::size_t peak = 0;
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t idx = order[k];
        const std::uint64_t ex_seed =
            splitmix64(cfg.seed ^ splitmix64((static_cast<std::uint64_t>(epoch) << 32) ^ idx));
        BuiltExample ex = build_example(sequences[idx], fused[idx], cfg, ex_seed, masks, dc.mask_token());
        ex.batch.dropout_active = dc.variant == Variant::regularized;
        ex.batch.dropout_seed = ex_seed;
        const int n = ex.sample.n;
        const int segs = std::min(cfg.segments, n);
        StepResult r = segs > 1
                           ? step_segmented(drafter, ex.batch, ex.sample, partition(ex.sample, segs), masks)
                           : step_full(drafter, ex.batch, cfg.max_slots_per_forward);
        add_into(grads, r.grads);
        loss_sum += r.loss;
        tally.merge(r.tally);
        peak = std::max(peak, r.peak_slots);
      }
      const double count = static_cast<double>(stop - start);
      for (auto& g : grads) g /= count;
      const double step_loss = loss_sum / count;
      if (!std::isfinite(step_loss)) {
        throw DivergenceError("training diverged at step " + std::to_string(step) + "; last good checkpoint: " +
                              (last_checkpoint.empty() ? std::string("none") : last_checkpoint));
      }
      const double lr = linear_schedule(step, total_steps, cfg.peak_lr, cfg.warmup_ratio);
      adam.step(drafter.params, grads, lr);

      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.loss = step_loss;
      rec.lr = lr;
      rec.depth_accuracy = tally.accuracy();
      rec.alpha = drafter.alpha_value();
      rec.peak_slots = peak;
      rec.timestamp = unix_seconds();
      if (metrics_out) *metrics_out << rec.to_json().dump() << '\n';
      result.metrics.steps.push_back(std::move(rec));
      ++step;
    }
    if (!cfg.checkpoint_dir.empty()) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      last_checkpoint = cfg.checkpoint_dir + "/drafter_epoch" + std::to_string(epoch) + ".ckpt";
      nlohmann::json meta{{"kind", "drafter"}, {"config", dc}, {"epoch", epoch}};
      save_checkpoint(last_checkpoint, drafter.params, meta.dump());
    }
  }
  result.metrics.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

TargetModel train_target(const std::vector<std::vector<int>>& corpus, const TargetConfig& config,
                         const TargetTrainConfig& cfg, std::ostream* metrics_out) {
  const auto sequences = usable_sequences(corpus, cfg.max_seq_len);
  TargetModel model = TargetModel::init(config, splitmix64(cfg.seed ^ 0x7a4e7ull));
  Adam adam(model.params, cfg.adam);
  const auto per_epoch = static_cast<int>((sequences.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                          static_cast<std::size_t>(cfg.batch_size));
  const int total_steps = per_epoch * cfg.epochs;
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(sequences.size(), cfg.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Gradients grads = model.params.zero_gradients();
      double loss_sum = 0.0;
      long correct = 0;
      long total = 0;
      for (std::size_t k = start; k < stop; ++k) {
        const auto& seq = sequences[order[k]];
        const std::size_t n = seq.size();
        std::vector<int> labels(n, 0);
        std::vector<double> weights(n, 0.0);
        for (std::size_t i = 0; i + 1 < n; ++i) {
          labels[i] = seq[i + 1];
          weights[i] = 1.0;
        }
        Tape tape;
        Binding bind(tape, model.params);
        TargetGraph g = target_graph(bind, model, seq);
        Var l = cross_entropy(g.logits, labels, weights, static_cast<double>(n - 1));
        tape.backward(l);
        bind.accumulate_into(grads);
        loss_sum += l.value()(0, 0);
        for (std::size_t i = 0; i + 1 < n; ++i) {
          ++total;
          if (argmax_row(g.logits.value().row(static_cast<Eigen::Index>(i))) == labels[i]) ++correct;
        }
      }
      const double count = static_cast<double>(stop - start);
      for (auto& g : grads) g /= count;
      const double step_loss = loss_sum / count;
      if (!std::isfinite(step_loss)) throw DivergenceError("target training diverged at step " + std::to_string(step));
      const double lr = linear_schedule(step, total_steps, cfg.peak_lr, cfg.warmup_ratio);
      adam.step(model.params, grads, lr);
      if (metrics_out) {
        *metrics_out << nlohmann::json{{"step", step},
                                       {"epoch", epoch},
                                       {"loss", step_loss},
                                       {"lr", lr},
                                       {"accuracy", total ? static_cast<double>(correct) / total : 0.0},
                                       {"timestamp", unix_seconds()}}
                            .dump()
                     << '\n';
      }
      ++step;
    }
  }
  return model;
}

std::vector<double> evaluate_depth_accuracy(const DrafterModel& drafter, const TargetModel& target,
                                            const std::vector<std::vector<int>>& sequences, int depths) {
  int max_len = 1;
  for (const auto& s : sequences) max_len = std::max(max_len, static_cast<int>(s.size()));
  const BlockMaskSet masks = precompute(max_len, depths, mask_budget_from_env());
  DepthTally tally;
  tally.resize(depths);
  for (const auto& seq : sequences) {
    if (seq.size() < 2) continue;
    const int n = static_cast<int>(seq.size());
    LayoutSample sample = full_layout(n, std::min(depths, n));
    sample.depths = depths;
    sample.positions.resize(static_cast<std::size_t>(depths));
    const Tensor2D fused = target_forward(target, seq).fused;
    const DraftBatch batch = build_example(seq, fused, sample, masks, drafter.config.mask_token());
    tally.add(batch, drafter_eval(drafter, batch).logits);
  }
  return tally.accuracy();
}

}  // namespace pdraft
