#pragma once

// Training driver: source fine-tuning, domain-invariant fine-tuning with the
// shift hook, and the adversarial label-correction loop (classifiers maximize
// their sliced Wasserstein discrepancy on target data, the encoder minimizes
// it), with parameter-freezing contracts and patience-based early stopping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "domaininv/checkpoint.hpp"
#include "domaininv/data.hpp"
#include "domaininv/discrepancy.hpp"
#include "domaininv/domain_transform.hpp"
#include "domaininv/metrics.hpp"
#include "domaininv/optimizer.hpp"
#include "domaininv/qa_model.hpp"

namespace domaininv {

class TrainingError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class FreezeViolation : public TrainingError {
public:
  using TrainingError::TrainingError;
};

enum class Alternation { PerBatch, PerEpoch };

struct TrainConfig {
  double source_lr = 3e-5;
  double adapt_lr = 1e-5;        // Step 1
  double adversarial_lr = 1e-5;  // Steps 2 and 3
  std::size_t batch_size = 12;
  std::size_t source_epochs = 2;
  std::size_t invariant_epochs = 1;
  std::size_t adapt_epochs = 10;
  double warmup_fraction = 0.10;
  std::size_t patience = 3;
  double weight_decay = 0.01;
  double bn_momentum = 0.9;
  double heldout_fraction = 0.1;
  bool label_correction = true;
  Alternation alternation = Alternation::PerBatch;
  std::size_t eval_batch_size = 64;
  bool check_freeze = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(source_lr > 0.0) || !(adapt_lr > 0.0) || !(adversarial_lr > 0.0))
      throw ConfigError("train config: learning rates must be positive");
    if (batch_size == 0 || eval_batch_size == 0) throw ConfigError("train config: batch sizes must be positive");
    if (patience == 0) throw ConfigError("train config: patience must be positive");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("train config: warmup_fraction outside [0,1)");
    if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0))
      throw ConfigError("train config: heldout_fraction outside [0,1)");
    if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw ConfigError("train config: bn_momentum outside [0,1)");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"source_lr", c.source_lr},
       {"adapt_lr", c.adapt_lr},
       {"adversarial_lr", c.adversarial_lr},
       {"batch_size", c.batch_size},
       {"source_epochs", c.source_epochs},
       {"invariant_epochs", c.invariant_epochs},
       {"adapt_epochs", c.adapt_epochs},
       {"warmup_fraction", c.warmup_fraction},
       {"patience", c.patience},
       {"weight_decay", c.weight_decay},
       {"bn_momentum", c.bn_momentum},
       {"heldout_fraction", c.heldout_fraction},
       {"label_correction", c.label_correction},
       {"alternation", c.alternation == Alternation::PerBatch ? "per_batch" : "per_epoch"},
       {"eval_batch_size", c.eval_batch_size},
       {"check_freeze", c.check_freeze},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.source_lr = j.value("source_lr", c.source_lr);
  c.adapt_lr = j.value("adapt_lr", c.adapt_lr);
  c.adversarial_lr = j.value("adversarial_lr", c.adversarial_lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.source_epochs = j.value("source_epochs", c.source_epochs);
  c.invariant_epochs = j.value("invariant_epochs", c.invariant_epochs);
  c.adapt_epochs = j.value("adapt_epochs", c.adapt_epochs);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.patience = j.value("patience", c.patience);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
  c.heldout_fraction = j.value("heldout_fraction", c.heldout_fraction);
  c.label_correction = j.value("label_correction", c.label_correction);
  const std::string alt = j.value("alternation", std::string("per_batch"));
  if (alt == "per_batch")
    c.alternation = Alternation::PerBatch;
  else if (alt == "per_epoch")
    c.alternation = Alternation::PerEpoch;
  else
    throw ConfigError("train config: unknown alternation '" + alt + "'");
  c.eval_batch_size = j.value("eval_batch_size", c.eval_batch_size);
  c.check_freeze = j.value("check_freeze", c.check_freeze);
  c.seed = j.value("seed", c.seed);
}

// ---------------------------------------------------------------------------
// Loss log

struct LossRecord {
  std::string stage;
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double ce = 0.0;
  double swd_start = 0.0;
  double swd_end = 0.0;
  std::size_t num_inconsistent = 0;
  std::size_t clamp_events = 0;
  std::size_t pair_fallbacks = 0;
};

inline void to_json(nlohmann::json& j, const LossRecord& r) {
  j = {{"stage", r.stage},
       {"step", r.step},
       {"epoch", r.epoch},
       {"lr", r.lr},
       {"L_ce", r.ce},
       {"L_swd_start", r.swd_start},
       {"L_swd_end", r.swd_end},
       {"num_inconsistent", r.num_inconsistent},
       {"clamp_events", r.clamp_events},
       {"pair_fallbacks", r.pair_fallbacks}};
}

struct LossLog {
  std::vector<LossRecord> records;
  std::ostream* jsonl = nullptr;  // optional stream, one JSON object per line
  std::function<void(const std::string&)> notes;
  // Called after each completed epoch of a stage.
  std::function<void(const std::string& stage, std::size_t epoch)> on_epoch_end;

  void add(const LossRecord& r) {
    for (double v : {r.ce, r.swd_start, r.swd_end, r.lr})
      if (!std::isfinite(v)) throw TrainingError("non-finite value in loss record for stage " + r.stage);
    records.push_back(r);
    if (jsonl) *jsonl << nlohmann::json(r).dump() << '\n';
  }
  void note(const std::string& msg) const {
    if (notes) notes(msg);
  }
  void epoch_end(const std::string& stage, std::size_t epoch) const {
    if (on_epoch_end) on_epoch_end(stage, epoch);
  }
};

// ---------------------------------------------------------------------------
// Early stopping

// Epoch bookkeeping for the adversarial loop. Stops once `patience`
// consecutive epochs fail to improve strictly on the best loss so far.
struct AdaptState {
  std::size_t epoch = 0;
  std::vector<double> swd_loss_history;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t patience_counter = 0;
  std::size_t patience = 3;
  Stage stage = Stage::DomainInvariant;

  explicit AdaptState(std::size_t patience_ = 3) : patience(patience_) {}

  // Records one epoch's loss; returns true when training should stop.
  bool record_epoch(double loss) {
    ++epoch;
    swd_loss_history.push_back(loss);
    if (loss < best_loss) {
      best_loss = loss;
      patience_counter = 0;
    } else {
      ++patience_counter;
    }
    return patience_counter >= patience;
  }
};

// ---------------------------------------------------------------------------
// Helpers

using ExampleRefs = std::vector<const TokenizedExample*>;

inline ExampleRefs gather_examples(const std::vector<TokenizedExample>& pool, const std::vector<std::size_t>& idx) {
  ExampleRefs out;
  for (std::size_t i : idx) out.push_back(&pool.at(i));
  return out;
}

inline std::vector<Parameter*> encoder_parameters(EncoderParams& e) {
  std::vector<Parameter*> out;
  e.visit([&](const std::string&, Parameter& p) { out.push_back(&p); });
  return out;
}

inline std::vector<Parameter*> head_parameters(ClassifierHead& h) {
  return {&h.start_w, &h.start_b, &h.end_w, &h.end_b};
}

// Marks exactly the given modules trainable.
struct Trainable {
  bool encoder = false, c1 = false, c2 = false, shift = false;
};

inline void set_trainable(ModelState& s, Trainable t) {
  s.encoder.set_trainable(t.encoder);
  s.c1.set_trainable(t.c1);
  s.c2.set_trainable(t.c2);
  s.shift.w.set_trainable(t.shift);
}

struct Checksums {
  std::uint64_t encoder, c1, c2, shift;
};

inline Checksums checksums(const ModelState& s) {
  return {s.encoder.checksum(), s.c1.checksum(), s.c2.checksum(), s.shift.checksum()};
}

inline void assert_frozen(const Checksums& before, const Checksums& after, Trainable t, const std::string& where) {
  if (!t.encoder && before.encoder != after.encoder) throw FreezeViolation(where + ": encoder changed while frozen");
  if (!t.c1 && before.c1 != after.c1) throw FreezeViolation(where + ": C1 changed while frozen");
  if (!t.c2 && before.c2 != after.c2) throw FreezeViolation(where + ": C2 changed while frozen");
  if (!t.shift && before.shift != after.shift) throw FreezeViolation(where + ": W changed while frozen");
}

inline ForwardOptions eval_options() { return ForwardOptions{}; }

inline ForwardOptions train_options(bool update_running, double momentum, std::uint64_t dropout_seed) {
  ForwardOptions o;
  o.training = true;
  o.update_running_stats = update_running;
  o.bn_momentum = momentum;
  o.dropout_seed = dropout_seed;
  return o;
}

inline std::vector<Span> gold_spans(const ExampleRefs& ex) {
  std::vector<Span> out;
  for (const auto* e : ex) {
    if (!e->span) throw TrainingError("example " + e->id + " has no gold span");
    out.push_back(*e->span);
  }
  return out;
}


// Seed for one stage's batch order, derived from the run seed.
inline std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage_tag) {
  Rng rng = make_rng(seed, streams::kShuffle, 0x5354ull << 16 | stage_tag);
  return rng();
}

// ---------------------------------------------------------------------------
// Prediction and evaluation

// Spans decoded from `head` on a plain eval-mode forward.
inline std::vector<Span> predict_spans(EncoderParams& encoder, const ModelConfig& cfg, const ClassifierHead& head,
                                       const std::vector<TokenizedExample>& pool, std::size_t batch_size = 64) {
  std::vector<Span> out;
  out.reserve(pool.size());
  for (std::size_t first = 0; first < pool.size(); first += batch_size) {
    ExampleRefs refs;
    for (std::size_t i = first; i < std::min(pool.size(), first + batch_size); ++i) refs.push_back(&pool[i]);
    const EncodedBatch b = encode_batch(refs, cfg);
    const EncoderOutput h = forward_encoder(encoder, cfg, b, eval_options());
    const auto spans = decode_batch(classify_spans(head, h.final_hidden, b), cfg.max_answer_len);
    out.insert(out.end(), spans.begin(), spans.end());
  }
  return out;
}

// Pseudo labels for an unlabeled pool: C1's decoded spans.
inline std::vector<Span> pseudo_label(ModelState& m, const std::vector<TokenizedExample>& pool,
                                      std::size_t batch_size = 64) {
  return predict_spans(m.encoder, m.config, m.c1, pool, batch_size);
}

// id -> predicted answer text, from G and C1.
inline std::unordered_map<std::string, std::string> predict(ModelState& m, const PackedCorpus& packed,
                                                            std::size_t batch_size = 64) {
  const auto spans = pseudo_label(m, packed.examples, batch_size);
  std::unordered_map<std::string, std::string> out;
  for (std::size_t i = 0; i < spans.size(); ++i)
    out[packed.examples[i].id] = packed.examples[i].span_text(spans[i]);
  return out;
}

// EM / F1 of G + C1 on a corpus packed without spans. Works at any stage.
inline Metrics evaluate(ModelState& m, const Corpus& corpus, const PackedCorpus& packed, std::size_t batch_size = 64) {
  const auto preds = predict(m, packed, batch_size);
  std::unordered_map<std::string, std::vector<std::string>> golds;
  for (std::size_t i = 0; i < packed.examples.size(); ++i) {
    const QASample& s = corpus.samples.at(packed.sample_index[i]);
    std::vector<std::string> refs = s.all_answers;
    if (refs.empty() && s.answer_text) refs.push_back(*s.answer_text);
    if (refs.empty()) throw MetricsError("evaluate: no reference answer for " + s.id);
    golds[s.id] = std::move(refs);
  }
  return evaluate_corpus(preds, golds);
}

inline Metrics evaluate_zero_shot(ModelState& m, const Corpus& target_dev, const PackedCorpus& packed,
                                  std::size_t batch_size = 64) {
  return evaluate(m, target_dev, packed, batch_size);
}

// ---------------------------------------------------------------------------
// Losses

// A resolved parallel batch: source examples with gold spans, target
// examples with pseudo spans.
struct PairBatch {
  ExampleRefs source;
  ExampleRefs target;
  std::vector<Span> pseudo;
  std::size_t fallbacks = 0;
};

inline PairBatch resolve_batch(const ParallelBatch& b, const std::vector<TokenizedExample>& source,
                               const std::vector<TokenizedExample>& target, const std::vector<Span>& pseudo) {
  PairBatch out;
  out.source = gather_examples(source, b.source);
  out.target = gather_examples(target, b.target);
  for (std::size_t t : b.target) out.pseudo.push_back(pseudo.at(t));
  out.fallbacks = b.fallbacks();
  return out;
}

// Source forward whose hidden states carry the style of the paired target
// batch. `target_hidden` are the target's plain-forward states H^(0..L).
inline EncoderOutput target_aware_source_forward(ModelState& m, const PairBatch& pb, const EncodedBatch& sb,
                                                 const std::vector<Var>& target_hidden, ForwardOptions opt) {
  std::vector<GroupMasks> ms, mt;
  for (std::size_t i = 0; i < pb.source.size(); ++i) {
    ms.push_back(make_group_masks(*pb.source[i], pb.source[i]->span));
    mt.push_back(make_group_masks(*pb.target[i], pb.pseudo.at(i)));
  }
  opt.hook = make_shift_hook(m.shift, target_hidden, make_shift_operators(ms, mt, sb.seq_len));
  opt.hook_placement = m.shift_config.placement;
  return forward_encoder(m.encoder, m.config, sb, opt);
}

// Cross-entropy of C2 on the target-aware source batch.
inline Var domain_invariant_loss(ModelState& m, const PairBatch& pb, const ForwardOptions& source_opt,
                                 NllStats* stats = nullptr) {
  const EncodedBatch sb = encode_batch(pb.source, m.config);
  const EncodedBatch tb = encode_batch(pb.target, m.config);
  ForwardOptions topt = source_opt;
  topt.update_running_stats = false;
  topt.skip_batch_norm = true;
  topt.dropout_seed = source_opt.dropout_seed + 1;
  const EncoderOutput t = forward_encoder(m.encoder, m.config, tb, topt);
  const EncoderOutput s = target_aware_source_forward(m, pb, sb, t.hidden, source_opt);
  return cross_entropy_span_loss(classify_spans(m.c2, s.final_hidden, sb), gold_spans(pb.source), stats);
}

// Both classifiers on one target forward, and their start / end discrepancies.
struct TargetDiscrepancy {
  EncodedBatch batch;
  EncoderOutput hidden;
  SpanProbs c1;
  SpanProbs c2;
  Var swd_start;
  Var swd_end;
};

inline Matrix swd_directions(const SWDConfig& cfg, std::size_t dim, std::uint64_t swd_step, bool end) {
  return sample_directions(dim, cfg.num_projections, cfg.seed, 2 * swd_step + (end ? 1 : 0));
}

inline TargetDiscrepancy target_discrepancy(ModelState& m, const ExampleRefs& target, const SWDConfig& swd_cfg,
                                            std::uint64_t swd_step, const ForwardOptions& opt) {
  swd_cfg.validate();
  TargetDiscrepancy d;
  d.batch = encode_batch(target, m.config);
  d.hidden = forward_encoder(m.encoder, m.config, d.batch, opt);
  d.c1 = classify_spans(m.c1, d.hidden.final_hidden, d.batch);
  d.c2 = classify_spans(m.c2, d.hidden.final_hidden, d.batch);
  const std::size_t t = d.batch.seq_len;
  const bool lg = swd_cfg.on_logits;
  d.swd_start = swd(lg ? d.c1.start_logits : d.c1.start, lg ? d.c2.start_logits : d.c2.start,
                    swd_directions(swd_cfg, t, swd_step, false));
  d.swd_end = swd(lg ? d.c1.end_logits : d.c1.end, lg ? d.c2.end_logits : d.c2.end,
                  swd_directions(swd_cfg, t, swd_step, true));
  return d;
}

// 1 where C1 and C2 decode different spans.
inline std::vector<std::uint8_t> inconsistency_filter(const SpanProbs& c1, const SpanProbs& c2,
                                                      std::size_t max_answer_len) {
  const auto a = decode_batch(c1, max_answer_len), b = decode_batch(c2, max_answer_len);
  std::vector<std::uint8_t> mask(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) mask[i] = a[i] == b[i] ? 0 : 1;
  return mask;
}

inline std::vector<std::uint8_t> inconsistency_filter(ModelState& m, const ExampleRefs& target) {
  const EncodedBatch b = encode_batch(target, m.config);
  const EncoderOutput h = forward_encoder(m.encoder, m.config, b, eval_options());
  return inconsistency_filter(classify_spans(m.c1, h.final_hidden, b), classify_spans(m.c2, h.final_hidden, b),
                              m.config.max_answer_len);
}

// Classifier objective: CE of C1 and C2 on target-aware source pairs whose
// target is inconsistent, minus both discrepancies.
struct ClassifierObjective {
  Var total;
  std::optional<Var> ce;
  Var swd_start;
  Var swd_end;
  std::vector<std::uint8_t> inconsistent;
  std::size_t num_inconsistent = 0;
};

inline ClassifierObjective classifier_discrepancy_loss(ModelState& m, const PairBatch& pb, const SWDConfig& swd_cfg,
                                                       std::uint64_t swd_step, const ForwardOptions& opt,
                                                       NllStats* stats = nullptr) {
  ForwardOptions topt = opt;
  topt.update_running_stats = false;
  const TargetDiscrepancy d = target_discrepancy(m, pb.target, swd_cfg, swd_step, topt);
  ClassifierObjective o;
  o.swd_start = d.swd_start;
  o.swd_end = d.swd_end;
  o.inconsistent = inconsistency_filter(d.c1, d.c2, m.config.max_answer_len);
  for (auto v : o.inconsistent) o.num_inconsistent += v;
  o.total = weighted_sum({d.swd_start, d.swd_end}, {-1.0, -1.0});
  if (o.num_inconsistent == 0) return o;
  const EncodedBatch sb = encode_batch(pb.source, m.config);
  ForwardOptions sopt = topt;
  sopt.dropout_seed = opt.dropout_seed + 1;
  const EncoderOutput s = target_aware_source_forward(m, pb, sb, d.hidden.hidden, sopt);
  const auto gold = gold_spans(pb.source);
  Var ce1 = cross_entropy_span_loss(classify_spans(m.c1, s.final_hidden, sb), gold, o.inconsistent, stats);
  Var ce2 = cross_entropy_span_loss(classify_spans(m.c2, s.final_hidden, sb), gold, o.inconsistent, stats);
  o.ce = weighted_sum({ce1, ce2}, {1.0, 1.0});
  o.total = weighted_sum({*o.ce, d.swd_start, d.swd_end}, {1.0, -1.0, -1.0});
  return o;
}

// Encoder objective: start + end discrepancy on the target batch.
inline TargetDiscrepancy generator_discrepancy_loss(ModelState& m, const ExampleRefs& target, const SWDConfig& swd_cfg,
                                                    std::uint64_t swd_step, const ForwardOptions& opt, Var* total) {
  TargetDiscrepancy d = target_discrepancy(m, target, swd_cfg, swd_step, opt);
  *total = weighted_sum({d.swd_start, d.swd_end}, {1.0, 1.0});
  return d;
}

// ---------------------------------------------------------------------------
// Single update steps. Each marks exactly its own modules trainable.

struct StepContext {
  std::size_t step = 0;   // index within the stage
  std::size_t epoch = 0;
  double lr = 0.0;
  std::uint64_t dropout_seed = 0;
  std::uint64_t swd_step = 0;
  double bn_momentum = 0.9;
  bool check_freeze = false;
};

inline void check_loss(double v, const std::string& where) {
  if (!std::isfinite(v)) throw TrainingError("non-finite loss in " + where);
}

inline constexpr Trainable kSourceTrainable{true, true, false, false};
inline constexpr Trainable kInvariantTrainable{true, false, true, true};
inline constexpr Trainable kClassifierTrainable{false, true, true, false};
inline constexpr Trainable kGeneratorTrainable{true, false, false, false};

inline std::vector<Parameter*> trainable_parameters(ModelState& m, Trainable t) {
  std::vector<Parameter*> out;
  if (t.encoder) out = encoder_parameters(m.encoder);
  if (t.c1)
    for (Parameter* p : head_parameters(m.c1)) out.push_back(p);
  if (t.c2)
    for (Parameter* p : head_parameters(m.c2)) out.push_back(p);
  if (t.shift) out.push_back(&m.shift.w);
  return out;
}

// Step 1: update G, C2 and W on the target-aware source CE.
inline LossRecord domain_invariant_step(ModelState& m, const PairBatch& pb, AdamW& opt, const StepContext& ctx) {
  set_trainable(m, kInvariantTrainable);
  const std::optional<Checksums> before = ctx.check_freeze ? std::optional(checksums(m)) : std::nullopt;
  NllStats stats;
  ForwardOptions fo = train_options(true, ctx.bn_momentum, ctx.dropout_seed);
  Var loss = domain_invariant_loss(m, pb, fo, &stats);
  check_loss(loss.scalar(), "domain-invariant step");
  backward(loss);
  opt.step(ctx.lr);
  if (before) assert_frozen(*before, checksums(m), kInvariantTrainable, "domain-invariant step");
  LossRecord r;
  r.stage = "domain_invariant";
  r.step = ctx.step;
  r.epoch = ctx.epoch;
  r.lr = ctx.lr;
  r.ce = loss.scalar();
  r.clamp_events = stats.clamp_events;
  r.pair_fallbacks = pb.fallbacks;
  return r;
}

// Step 2: update C1 and C2 to raise their discrepancy on the target batch.
inline LossRecord adversarial_classifier_step(ModelState& m, const PairBatch& pb, AdamW& opt, const SWDConfig& swd_cfg,
                                              const StepContext& ctx, LossLog* log = nullptr) {
  set_trainable(m, kClassifierTrainable);
  const std::optional<Checksums> before = ctx.check_freeze ? std::optional(checksums(m)) : std::nullopt;
  NllStats stats;
  ClassifierObjective o =
      classifier_discrepancy_loss(m, pb, swd_cfg, ctx.swd_step, train_options(false, ctx.bn_momentum, ctx.dropout_seed),
                                  &stats);
  check_loss(o.total.scalar(), "classifier step");
  if (o.num_inconsistent == 0 && log) log->note("classifier step " + std::to_string(ctx.step) +
                                                ": no inconsistent pairs, CE term skipped");
  backward(o.total);
  opt.step(ctx.lr);
  if (before) assert_frozen(*before, checksums(m), kClassifierTrainable, "classifier step");
  LossRecord r;
  r.stage = "adversarial_classifier";
  r.step = ctx.step;
  r.epoch = ctx.epoch;
  r.lr = ctx.lr;
  r.ce = o.ce ? o.ce->scalar() : 0.0;
  r.swd_start = o.swd_start.scalar();
  r.swd_end = o.swd_end.scalar();
  r.num_inconsistent = o.num_inconsistent;
  r.clamp_events = stats.clamp_events;
  r.pair_fallbacks = pb.fallbacks;
  return r;
}

// Step 3: update G to lower the discrepancy on the target batch.
inline LossRecord generator_alignment_step(ModelState& m, const ExampleRefs& target, AdamW& opt,
                                           const SWDConfig& swd_cfg, const StepContext& ctx) {
  set_trainable(m, kGeneratorTrainable);
  const std::optional<Checksums> before = ctx.check_freeze ? std::optional(checksums(m)) : std::nullopt;
  Var total;
  const TargetDiscrepancy d = generator_discrepancy_loss(
      m, target, swd_cfg, ctx.swd_step, train_options(true, ctx.bn_momentum, ctx.dropout_seed), &total);
  check_loss(total.scalar(), "generator step");
  backward(total);
  opt.step(ctx.lr);
  if (before) assert_frozen(*before, checksums(m), kGeneratorTrainable, "generator step");
  LossRecord r;
  r.stage = "generator_alignment";
  r.step = ctx.step;
  r.epoch = ctx.epoch;
  r.lr = ctx.lr;
  r.swd_start = d.swd_start.scalar();
  r.swd_end = d.swd_end.scalar();
  return r;
}

// ---------------------------------------------------------------------------
// Stages

// Plain CE fine-tuning of G and C1 on labeled source; C2 is cloned from C1
// at the end. On a non-finite loss the state from the last completed epoch
// is restored and TrainingError is thrown.
inline void train_source_baseline(ModelState& m, const PackedCorpus& source, const TrainConfig& cfg, LossLog& log) {
  cfg.validate();
  if (source.examples.empty()) throw TrainingError("source baseline: empty source corpus");
  for (const auto& e : source.examples)
    if (!e.span) throw TrainingError("source baseline: source example " + e.id + " lacks a gold span");
  const std::size_t per_epoch = steps_per_epoch(source.examples.size(), cfg.batch_size);
  if (per_epoch == 0) throw TrainingError("source baseline: batch_size exceeds corpus size");
  const std::size_t total = per_epoch * cfg.source_epochs;
  const LinearSchedule schedule{cfg.source_lr, total, cfg.warmup_fraction, true};
  set_trainable(m, kSourceTrainable);
  AdamW opt(trainable_parameters(m, kSourceTrainable), AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  const std::uint64_t order_seed = stage_seed(cfg.seed, 1);
  ModelState last_good = m;
  std::size_t last_good_step = 0;
  for (std::size_t step = 0; step < total; ++step) {
    LossRecord r;
    r.stage = "source";
    r.step = step;
    r.epoch = step / per_epoch;
    r.lr = schedule(step);
    try {
      const ExampleRefs batch = gather_examples(
          source.examples, epoch_batch_indices(source.examples.size(), cfg.batch_size, order_seed, step));
      const EncodedBatch b = encode_batch(batch, m.config);
      NllStats stats;
      const EncoderOutput h =
          forward_encoder(m.encoder, m.config, b, train_options(true, cfg.bn_momentum, order_seed + step));
      Var loss = cross_entropy_span_loss(classify_spans(m.c1, h.final_hidden, b), gold_spans(batch), &stats);
      check_loss(loss.scalar(), "source fine-tuning");
      backward(loss);
      opt.step(r.lr);
      r.ce = loss.scalar();
      r.clamp_events = stats.clamp_events;
    } catch (const NumericError& e) {
      m = std::move(last_good);
      throw TrainingError(std::string("source fine-tuning diverged at step ") + std::to_string(step) + " (" +
                          e.what() + "); restored the state after step " + std::to_string(last_good_step));
    } catch (const TrainingError& e) {
      m = std::move(last_good);
      throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step) +
                          "; restored the state after step " + std::to_string(last_good_step));
    }
    log.add(r);
    if ((step + 1) % per_epoch == 0) {
      last_good = m;
      last_good_step = step + 1;
      log.epoch_end("source", step / per_epoch);
    }
  }
  m.c2 = clone_head(m.c1);
  m.stage = Stage::SourceFinetuned;
  set_trainable(m, {});
}

// Deterministic split of an unlabeled target pool into train and held-out.
struct TargetSplit {
  PackedCorpus train;
  PackedCorpus heldout;
};

inline TargetSplit split_target(const PackedCorpus& target, double heldout_fraction, std::uint64_t seed) {
  std::vector<std::size_t> perm(target.examples.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = make_rng(seed, streams::kShuffle, 0x484cull);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n_held = static_cast<std::size_t>(std::floor(heldout_fraction * static_cast<double>(perm.size())));
  std::vector<std::uint8_t> held(perm.size(), 0);
  for (std::size_t i = 0; i < n_held; ++i) held[perm[i]] = 1;
  TargetSplit s;
  for (std::size_t i = 0; i < target.examples.size(); ++i) {
    PackedCorpus& dst = held[i] ? s.heldout : s.train;
    dst.by_type[static_cast<std::size_t>(target.examples[i].question_type)].push_back(dst.examples.size());
    dst.examples.push_back(target.examples[i]);
    dst.sample_index.push_back(target.sample_index[i]);
  }
  return s;
}

inline void check_pair_pools(const PackedCorpus& source, const PackedCorpus& target, const TrainConfig& cfg) {
  if (source.examples.empty() || target.examples.empty()) throw TrainingError("adaptation: empty source or target");
  if (steps_per_epoch(source.examples.size(), cfg.batch_size) == 0)
    throw TrainingError("adaptation: batch_size exceeds source size");
  for (const auto& e : source.examples)
    if (!e.span) throw TrainingError("adaptation: source example " + e.id + " lacks a gold span");
}

// Step 1 for `invariant_epochs` epochs; C1 stays frozen and supplies the
// target pseudo spans, refreshed each epoch.
inline void domain_invariant_finetune(ModelState& m, const PackedCorpus& source, const PackedCorpus& target,
                                      const TrainConfig& cfg, LossLog& log) {
  cfg.validate();
  if (m.stage != Stage::SourceFinetuned)
    throw TrainingError(std::string("domain-invariant fine-tuning needs stage source_finetuned, found ") +
                        stage_name(m.stage));
  check_pair_pools(source, target, cfg);
  const std::size_t per_epoch = steps_per_epoch(source.examples.size(), cfg.batch_size);
  const std::size_t total = per_epoch * cfg.invariant_epochs;
  const LinearSchedule schedule{cfg.adapt_lr, total, cfg.warmup_fraction, false};
  set_trainable(m, kInvariantTrainable);
  AdamW opt(trainable_parameters(m, kInvariantTrainable), AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  const std::uint64_t order_seed = stage_seed(cfg.seed, 2);
  std::vector<Span> pseudo;
  for (std::size_t step = 0; step < total; ++step) {
    if (step % per_epoch == 0) pseudo = pseudo_label(m, target.examples, cfg.eval_batch_size);
    const ParallelBatch pb = sample_parallel_batch(source, target, cfg.batch_size, order_seed, step);
    StepContext ctx;
    ctx.step = step;
    ctx.epoch = step / per_epoch;
    ctx.lr = schedule(step);
    ctx.dropout_seed = order_seed + 2 * step;
    ctx.bn_momentum = cfg.bn_momentum;
    ctx.check_freeze = cfg.check_freeze;
    log.add(domain_invariant_step(m, resolve_batch(pb, source.examples, target.examples, pseudo), opt, ctx));
    if ((step + 1) % per_epoch == 0) log.epoch_end("domain_invariant", step / per_epoch);
  }
  m.stage = Stage::DomainInvariant;
  set_trainable(m, {});
}

// Epoch-mean encoder objective on a held-out target pool, eval mode, with
// directions fixed per held-out batch so epochs are comparable.
struct HeldoutLoss {
  double start = 0.0;
  double end = 0.0;
  double total() const { return start + end; }
};

inline HeldoutLoss heldout_discrepancy(ModelState& m, const PackedCorpus& heldout, const SWDConfig& swd_cfg,
                                       std::size_t batch_size) {
  constexpr std::uint64_t kHeldoutSwdBase = 1ull << 40;
  HeldoutLoss sum;
  std::size_t batches = 0;
  for (std::size_t first = 0; first < heldout.examples.size(); first += batch_size, ++batches) {
    ExampleRefs refs;
    for (std::size_t i = first; i < std::min(heldout.examples.size(), first + batch_size); ++i)
      refs.push_back(&heldout.examples[i]);
    Var total;
    const auto d = generator_discrepancy_loss(m, refs, swd_cfg, kHeldoutSwdBase + batches, eval_options(), &total);
    sum.start += d.swd_start.scalar();
    sum.end += d.swd_end.scalar();
  }
  if (batches > 0) {
    sum.start /= static_cast<double>(batches);
    sum.end /= static_cast<double>(batches);
  }
  return sum;
}

struct AdaptResult {
  AdaptState state;
  std::size_t invariant_steps = 0;
  std::size_t adversarial_steps = 0;
  bool stopped_early = false;
};

// The full procedure: Step 1 once, then Step 2 / Step 3 for up to
// adapt_epochs epochs with patience on the held-out encoder objective.
// The adapted model is G + C1.
inline AdaptResult run_adaptation(ModelState& m, const PackedCorpus& source, const PackedCorpus& target,
                                  const TrainConfig& cfg, const SWDConfig& swd_cfg, LossLog& log) {
  cfg.validate();
  swd_cfg.validate();
  if (m.stage != Stage::SourceFinetuned)
    throw TrainingError(std::string("adaptation needs stage source_finetuned, found ") + stage_name(m.stage));
  TargetSplit split = split_target(target, cfg.heldout_fraction, cfg.seed);
  if (split.train.examples.empty()) throw TrainingError("adaptation: no target training examples after the split");
  const PackedCorpus& heldout = split.heldout.examples.empty() ? split.train : split.heldout;

  AdaptResult res{AdaptState(cfg.patience)};
  const std::size_t log_start = log.records.size();
  domain_invariant_finetune(m, source, split.train, cfg, log);
  res.invariant_steps = log.records.size() - log_start;
  res.state.stage = m.stage;
  if (!cfg.label_correction) return res;

  const std::size_t per_epoch = steps_per_epoch(source.examples.size(), cfg.batch_size);
  const LinearSchedule schedule{cfg.adversarial_lr, per_epoch * cfg.adapt_epochs, cfg.warmup_fraction, false};
  AdamW opt_c(trainable_parameters(m, kClassifierTrainable), AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  AdamW opt_g(trainable_parameters(m, kGeneratorTrainable), AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  const std::uint64_t order_seed = stage_seed(cfg.seed, 3);
  std::uint64_t swd_step = 0;
  std::size_t global = 0;
  for (std::size_t epoch = 0; epoch < cfg.adapt_epochs; ++epoch) {
    const std::vector<Span> pseudo = pseudo_label(m, split.train.examples, cfg.eval_batch_size);
    std::vector<PairBatch> batches;
    for (std::size_t i = 0; i < per_epoch; ++i)
      batches.push_back(resolve_batch(
          sample_parallel_batch(source, split.train, cfg.batch_size, order_seed, epoch * per_epoch + i),
          source.examples, split.train.examples, pseudo));
    auto context = [&](std::size_t step) {
      StepContext ctx;
      ctx.step = step;
      ctx.epoch = epoch;
      ctx.lr = schedule(step);
      ctx.dropout_seed = order_seed + 2 * step;
      ctx.swd_step = swd_step++;
      ctx.bn_momentum = cfg.bn_momentum;
      ctx.check_freeze = cfg.check_freeze;
      return ctx;
    };
    if (cfg.alternation == Alternation::PerBatch) {
      for (const PairBatch& pb : batches) {
        const std::size_t step = global++;
        StepContext ctx = context(step);
        log.add(adversarial_classifier_step(m, pb, opt_c, swd_cfg, ctx, &log));
        ctx.swd_step = swd_step++;
        log.add(generator_alignment_step(m, pb.target, opt_g, swd_cfg, ctx));
      }
    } else {
      const std::size_t first = global;
      for (std::size_t i = 0; i < batches.size(); ++i)
        log.add(adversarial_classifier_step(m, batches[i], opt_c, swd_cfg, context(first + i), &log));
      for (std::size_t i = 0; i < batches.size(); ++i)
        log.add(generator_alignment_step(m, batches[i].target, opt_g, swd_cfg, context(first + i)));
      global += batches.size();
    }
    res.adversarial_steps += batches.size();
    const HeldoutLoss held = heldout_discrepancy(m, heldout, swd_cfg, cfg.eval_batch_size);
    LossRecord r;
    r.stage = "heldout";
    r.step = global;
    r.epoch = epoch;
    r.swd_start = held.start;
    r.swd_end = held.end;
    log.add(r);
    log.epoch_end("adversarial", epoch);
    if (res.state.record_epoch(held.total())) {
      res.stopped_early = epoch + 1 < cfg.adapt_epochs;
      log.note("early stop after epoch " + std::to_string(epoch + 1));
      break;
    }
  }
  m.stage = Stage::Adapted;
  res.state.stage = m.stage;
  set_trainable(m, {});
  return res;
}

}  // namespace domaininv
