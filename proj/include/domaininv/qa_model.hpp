#pragma once

// Small transformer-encoder extractive QA model: token + learned position
// embeddings, post-LN encoder blocks, one batch-norm over the final hidden
// states, and two-projection span classifier heads.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "domaininv/rng.hpp"
#include "domaininv/tensor.hpp"

namespace domaininv {

class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t hidden_dim = 32;
  std::size_t num_heads = 2;
  std::size_t ffn_dim = 64;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 48;
  double dropout_rate = 0.0;
  std::size_t max_answer_len = 4;

  void validate() const {
    if (num_layers == 0 || hidden_dim == 0 || num_heads == 0 || ffn_dim == 0 || vocab_size == 0 ||
        max_seq_len == 0 || max_answer_len == 0)
      throw ConfigError("model config: all dimensions must be positive");
    if (hidden_dim % num_heads != 0)
      throw ConfigError("model config: num_heads (" + std::to_string(num_heads) + ") must divide hidden_dim (" +
                        std::to_string(hidden_dim) + ")");
    if (max_answer_len > max_seq_len) throw ConfigError("model config: max_answer_len exceeds max_seq_len");
    if (!(dropout_rate >= 0.0 && dropout_rate <= 1.0)) throw ConfigError("model config: dropout_rate outside [0,1]");
  }

  bool operator==(const ModelConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, num_layers, hidden_dim, num_heads, ffn_dim, vocab_size,
                                                max_seq_len, dropout_rate, max_answer_len)

// A trainable array with value semantics: copying deep-copies the data, so a
// cloned classifier never aliases its source.
class Parameter {
public:
  Parameter() : node_(std::make_shared<Node>()) {}
  explicit Parameter(Matrix m) : node_(std::make_shared<Node>()) { node_->value = std::move(m); }
  Parameter(const Parameter& o) : node_(std::make_shared<Node>()) {
    node_->value = o.node_->value;
    node_->requires_grad = o.node_->requires_grad;
  }
  Parameter& operator=(const Parameter& o) {
    if (this != &o) {
      node_ = std::make_shared<Node>();
      node_->value = o.node_->value;
      node_->requires_grad = o.node_->requires_grad;
    }
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  Matrix& value() { return node_->value; }
  const Matrix& value() const { return node_->value; }
  Matrix& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad = Matrix(); }
  bool has_grad() const { return node_->grad.same_shape(node_->value); }
  void set_trainable(bool on) { node_->requires_grad = on; }
  bool trainable() const { return node_->requires_grad; }
  // Graph handle; gradients land in this parameter when trainable.
  Var var() const { return Var(node_); }

private:
  std::shared_ptr<Node> node_;
};

namespace detail {
inline Matrix gaussian(std::size_t r, std::size_t c, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(r, c);
  for (auto& v : m.data) v = dist(rng);
  return m;
}
}  // namespace detail

struct LayerParams {
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln1_gain, ln1_offset;
  Parameter w1, b1, w2, b2;
  Parameter ln2_gain, ln2_offset;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "attn.wq", wq);
    f(prefix + "attn.bq", bq);
    f(prefix + "attn.wk", wk);
    f(prefix + "attn.bk", bk);
    f(prefix + "attn.wv", wv);
    f(prefix + "attn.bv", bv);
    f(prefix + "attn.wo", wo);
    f(prefix + "attn.bo", bo);
    f(prefix + "ln1.gain", ln1_gain);
    f(prefix + "ln1.offset", ln1_offset);
    f(prefix + "ffn.w1", w1);
    f(prefix + "ffn.b1", b1);
    f(prefix + "ffn.w2", w2);
    f(prefix + "ffn.b2", b2);
    f(prefix + "ln2.gain", ln2_gain);
    f(prefix + "ln2.offset", ln2_offset);
  }
};

// Encoder parameters (the feature generator). Running batch-norm statistics
// are state, not trainable, but belong to the encoder for checksums and
// checkpoints.
struct EncoderParams {
  Parameter token_embedding;
  Parameter position_embedding;
  Parameter emb_ln_gain, emb_ln_offset;
  std::vector<LayerParams> layers;
  Parameter bn_gain, bn_offset;
  RunningStats bn_running;

  template <typename F>
  void visit(F&& f) {
    f("embedding.token", token_embedding);
    f("embedding.position", position_embedding);
    f("embedding.ln.gain", emb_ln_gain);
    f("embedding.ln.offset", emb_ln_offset);
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].visit("layer" + std::to_string(l) + ".", f);
    f("batchnorm.gain", bn_gain);
    f("batchnorm.offset", bn_offset);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<EncoderParams*>(this)->visit([&](const std::string& n, Parameter& p) { f(n, std::as_const(p)); });
  }

  void set_trainable(bool on) {
    visit([on](const std::string&, Parameter& p) { p.set_trainable(on); });
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    visit([&h](const std::string&, const Parameter& p) { h = domaininv::checksum(p.value(), h); });
    h = domaininv::checksum(bn_running.mean, h);
    return domaininv::checksum(bn_running.var, h);
  }
};

// One answer classifier: start and end projections, each d -> 1 per position.
struct ClassifierHead {
  Parameter start_w, start_b, end_w, end_b;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "start.w", start_w);
    f(prefix + "start.b", start_b);
    f(prefix + "end.w", end_w);
    f(prefix + "end.b", end_b);
  }
  void set_trainable(bool on) {
    visit("", [on](const std::string&, Parameter& p) { p.set_trainable(on); });
  }
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const Parameter* p : {&start_w, &start_b, &end_w, &end_b}) h = domaininv::checksum(p->value(), h);
    return h;
  }
};

// Deep copy; C2 starts as an exact copy of the source-trained C1.
inline ClassifierHead clone_head(const ClassifierHead& head) { return head; }

inline EncoderParams init_encoder(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.hidden_dim, f = cfg.ffn_dim;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sf = 1.0 / std::sqrt(static_cast<double>(f));
  EncoderParams e;
  e.token_embedding = Parameter(detail::gaussian(cfg.vocab_size, d, 1.0, rng));
  e.position_embedding = Parameter(detail::gaussian(cfg.max_seq_len, d, 0.5, rng));
  e.emb_ln_gain = Parameter(Matrix(1, d, 1.0));
  e.emb_ln_offset = Parameter(Matrix(1, d, 0.0));
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    LayerParams lp;
    lp.wq = Parameter(detail::gaussian(d, d, sd, rng));
    lp.bq = Parameter(Matrix(1, d));
    lp.wk = Parameter(detail::gaussian(d, d, sd, rng));
    lp.bk = Parameter(Matrix(1, d));
    lp.wv = Parameter(detail::gaussian(d, d, sd, rng));
    lp.bv = Parameter(Matrix(1, d));
    lp.wo = Parameter(detail::gaussian(d, d, sd, rng));
    lp.bo = Parameter(Matrix(1, d));
    lp.ln1_gain = Parameter(Matrix(1, d, 1.0));
    lp.ln1_offset = Parameter(Matrix(1, d, 0.0));
    lp.w1 = Parameter(detail::gaussian(d, f, sd, rng));
    lp.b1 = Parameter(Matrix(1, f));
    lp.w2 = Parameter(detail::gaussian(f, d, sf, rng));
    lp.b2 = Parameter(Matrix(1, d));
    lp.ln2_gain = Parameter(Matrix(1, d, 1.0));
    lp.ln2_offset = Parameter(Matrix(1, d, 0.0));
    e.layers.push_back(std::move(lp));
  }
  e.bn_gain = Parameter(Matrix(1, d, 1.0));
  e.bn_offset = Parameter(Matrix(1, d, 0.0));
  e.bn_running.mean = Matrix(1, d, 0.0);
  e.bn_running.var = Matrix(1, d, 1.0);
  return e;
}

inline ClassifierHead init_head(const ModelConfig& cfg, Rng& rng) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
  ClassifierHead h;
  h.start_w = Parameter(detail::gaussian(cfg.hidden_dim, 1, sd, rng));
  h.start_b = Parameter(Matrix(1, 1));
  h.end_w = Parameter(detail::gaussian(cfg.hidden_dim, 1, sd, rng));
  h.end_b = Parameter(Matrix(1, 1));
  return h;
}

struct InitializedModel {
  EncoderParams encoder;
  ClassifierHead c1;
  ClassifierHead c2;
};

// Deterministic for a fixed (config, seed). C2 is a copy of C1; after source
// fine-tuning the trainer re-clones it explicitly.
inline InitializedModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = make_rng(seed, streams::kInit);
  InitializedModel m;
  m.encoder = init_encoder(cfg, rng);
  m.c1 = init_head(cfg, rng);
  m.c2 = clone_head(m.c1);
  return m;
}

// ---------------------------------------------------------------------------
// Tokenized inputs

enum class TokenGroup : std::uint8_t { Pad = 0, Special = 1, Question = 2, Context = 3, Answer = 4 };

struct Span {
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const Span&) const = default;
};

struct TokenizedExample {
  std::string id;
  std::vector<std::size_t> token_ids;  // padded to max_seq_len
  std::vector<TokenGroup> groups;      // one label per position
  std::optional<Span> span;            // gold (source) answer, sequence positions
  std::size_t context_first = 0;       // first context position
  std::size_t context_last = 0;        // last context position (inclusive)
  std::vector<std::string> context_words;  // words at context_first..context_last
  int question_type = 0;

  std::size_t length() const { return token_ids.size(); }
  bool in_context(std::size_t p) const { return p >= context_first && p <= context_last; }

  // Text of a predicted span, rebuilt from the context words.
  std::string span_text(const Span& s) const {
    std::string out;
    for (std::size_t p = s.start; p <= s.end; ++p) {
      if (!in_context(p)) continue;
      if (!out.empty()) out += ' ';
      out += context_words[p - context_first];
    }
    return out;
  }
};

// Flattened view of a batch with uniform padded length.
struct EncodedBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> token_ids;     // batch * seq_len
  std::vector<std::size_t> position_ids;  // batch * seq_len
  std::vector<std::uint8_t> valid;        // non-PAD
  std::vector<std::uint8_t> context;      // allowed answer positions
};

inline EncodedBatch encode_batch(const std::vector<const TokenizedExample*>& examples, const ModelConfig& cfg) {
  if (examples.empty()) throw ShapeError("encode_batch: empty batch");
  EncodedBatch b;
  b.batch = examples.size();
  b.seq_len = examples.front()->length();
  if (b.seq_len > cfg.max_seq_len) throw ShapeError("encode_batch: sequence longer than max_seq_len");
  for (const TokenizedExample* ex : examples) {
    if (ex->length() != b.seq_len || ex->groups.size() != b.seq_len)
      throw ShapeError("encode_batch: non-uniform padded length in batch");
    if (ex->context_first > ex->context_last || ex->context_last >= b.seq_len)
      throw ShapeError("encode_batch: empty or out-of-range context window for " + ex->id);
    for (std::size_t p = 0; p < b.seq_len; ++p) {
      if (ex->token_ids[p] >= cfg.vocab_size)
        throw ShapeError("encode_batch: token id " + std::to_string(ex->token_ids[p]) + " >= vocab_size");
      b.token_ids.push_back(ex->token_ids[p]);
      b.position_ids.push_back(p);
      b.valid.push_back(ex->groups[p] != TokenGroup::Pad);
      b.context.push_back(ex->in_context(p));
    }
  }
  return b;
}

inline EncodedBatch encode_batch(const std::vector<TokenizedExample>& examples, const ModelConfig& cfg) {
  std::vector<const TokenizedExample*> ptrs;
  for (const auto& e : examples) ptrs.push_back(&e);
  return encode_batch(ptrs, cfg);
}

// ---------------------------------------------------------------------------
// Forward pass

// Per-layer transform applied to H^(l) before the next stage consumes it.
using LayerHook = std::function<Var(std::size_t layer, const Var& hidden)>;

enum class HookPlacement : std::uint8_t {
  AfterBlock,       // H^(1..L), the output of each transformer block
  AfterEmbeddings,  // H^(0..L-1), the input of each transformer block
};

struct ForwardOptions {
  bool training = false;
  // Fold batch statistics into the running averages (only when the encoder is being trained).
  bool update_running_stats = false;
  double bn_momentum = 0.9;
  std::uint64_t dropout_seed = 0;
  LayerHook hook;
  HookPlacement hook_placement = HookPlacement::AfterBlock;
  // Stop after the encoder layers; `final_hidden` is left empty.
  bool skip_batch_norm = false;
};

struct EncoderOutput {
  std::vector<Var> hidden;  // H^(0..L), as consumed downstream (post-hook)
  Var final_hidden;         // batch-normalized H^(L)
};

namespace detail {
inline Var maybe_dropout(const Var& x, double rate, bool training, Rng* rng) {
  if (!training || rate <= 0.0 || rng == nullptr) return x;
  Matrix mask(x.rows(), x.cols());
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = rate >= 1.0 ? 0.0 : 1.0 / (1.0 - rate);
  for (auto& m : mask.data) m = keep(*rng) ? s : 0.0;
  return apply_mask(x, std::move(mask));
}

inline void check_finite(const Var& v, const char* where) {
  if (!all_finite(v.value())) throw NumericError(std::string("non-finite activations in ") + where);
}
}  // namespace detail

inline EncoderOutput forward_encoder(EncoderParams& params, const ModelConfig& cfg, const EncodedBatch& batch,
                                     const ForwardOptions& opt = {}) {
  if (params.layers.size() != cfg.num_layers) throw ShapeError("forward_encoder: layer count mismatch");
  if (params.token_embedding.value().rows != cfg.vocab_size ||
      params.token_embedding.value().cols != cfg.hidden_dim)
    throw ShapeError("forward_encoder: embedding shape does not match config");
  Rng drop_rng = make_rng(opt.dropout_seed, streams::kDropout);
  Rng* rng = opt.training && cfg.dropout_rate > 0.0 ? &drop_rng : nullptr;

  auto apply_hook = [&](std::size_t layer, Var h) {
    return opt.hook ? opt.hook(layer, h) : h;
  };

  EncoderOutput out;
  Var x = add(gather_rows(params.token_embedding.var(), batch.token_ids),
              gather_rows(params.position_embedding.var(), batch.position_ids));
  x = layer_norm(x, params.emb_ln_gain.var(), params.emb_ln_offset.var());
  x = detail::maybe_dropout(x, cfg.dropout_rate, opt.training, rng);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    if (opt.hook_placement == HookPlacement::AfterEmbeddings) x = apply_hook(l, x);
    out.hidden.push_back(x);
    const LayerParams& lp = params.layers[l];
    Var q = add_row(matmul(x, lp.wq.var()), lp.bq.var());
    Var k = add_row(matmul(x, lp.wk.var()), lp.bk.var());
    Var v = add_row(matmul(x, lp.wv.var()), lp.bv.var());
    Var att = multi_head_attention(q, k, v, batch.batch, batch.seq_len, cfg.num_heads, batch.valid);
    att = add_row(matmul(att, lp.wo.var()), lp.bo.var());
    att = detail::maybe_dropout(att, cfg.dropout_rate, opt.training, rng);
    Var x1 = layer_norm(add(x, att), lp.ln1_gain.var(), lp.ln1_offset.var());
    Var ff = gelu(add_row(matmul(x1, lp.w1.var()), lp.b1.var()));
    ff = add_row(matmul(ff, lp.w2.var()), lp.b2.var());
    ff = detail::maybe_dropout(ff, cfg.dropout_rate, opt.training, rng);
    x = layer_norm(add(x1, ff), lp.ln2_gain.var(), lp.ln2_offset.var());
    if (opt.hook_placement == HookPlacement::AfterBlock) x = apply_hook(l + 1, x);
  }
  out.hidden.push_back(x);
  detail::check_finite(x, "encoder");
  if (opt.skip_batch_norm) return out;
  RunningStats scratch = params.bn_running;
  RunningStats& stats = opt.training && opt.update_running_stats ? params.bn_running : scratch;
  out.final_hidden = batch_norm(x, params.bn_gain.var(), params.bn_offset.var(), batch.valid, stats, opt.training,
                                opt.training && opt.update_running_stats, opt.bn_momentum);
  detail::check_finite(out.final_hidden, "batch norm");
  return out;
}

// ---------------------------------------------------------------------------
// Span classification and decoding

struct SpanProbs {
  Var start;         // batch x seq_len
  Var end;           // batch x seq_len
  Var start_logits;  // batch x seq_len, zero outside the context window
  Var end_logits;
};

inline SpanProbs classify_spans(const ClassifierHead& head, const Var& final_hidden, const EncodedBatch& batch) {
  SpanProbs p;
  Var ls = matmul(final_hidden, head.start_w.var());
  ls = add_row(ls, head.start_b.var());
  Var le = matmul(final_hidden, head.end_w.var());
  le = add_row(le, head.end_b.var());
  p.start = masked_softmax(ls, batch.batch, batch.seq_len, batch.context);
  p.end = masked_softmax(le, batch.batch, batch.seq_len, batch.context);
  p.start_logits = masked_rows(ls, batch.batch, batch.seq_len, batch.context);
  p.end_logits = masked_rows(le, batch.batch, batch.seq_len, batch.context);
  return p;
}

struct SpanPrediction {
  Span span;
  double score = 0.0;
  std::vector<double> start_probs;
  std::vector<double> end_probs;
};

// argmax of start[i] * end[j] over i <= j < i + max_answer_len; ties go to
// the smallest i, then the smallest j.
inline SpanPrediction decode_span(const std::vector<double>& start_probs, const std::vector<double>& end_probs,
                                  std::size_t max_answer_len) {
  if (start_probs.size() != end_probs.size() || start_probs.empty())
    throw ShapeError("decode_span: probability vectors must be non-empty and equal length");
  if (max_answer_len == 0) throw ShapeError("decode_span: max_answer_len must be positive");
  SpanPrediction best;
  best.score = -1.0;
  const std::size_t n = start_probs.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n && j - i + 1 <= max_answer_len; ++j) {
      const double s = start_probs[i] * end_probs[j];
      if (s > best.score) {
        best.score = s;
        best.span = {i, j};
      }
    }
  best.start_probs = start_probs;
  best.end_probs = end_probs;
  return best;
}

inline std::vector<double> row_of(const Matrix& m, std::size_t r) {
  return std::vector<double>(m.row(r), m.row(r) + m.cols);
}

inline std::vector<Span> decode_batch(const SpanProbs& probs, std::size_t max_answer_len) {
  std::vector<Span> spans;
  for (std::size_t b = 0; b < probs.start.rows(); ++b)
    spans.push_back(
        decode_span(row_of(probs.start.value(), b), row_of(probs.end.value(), b), max_answer_len).span);
  return spans;
}

// Mean over the selected rows of (-log p_start[gold.start] - log p_end[gold.end]) / 2.
// Zero probabilities are clamped to 1e-12 and counted in `stats`.
inline Var cross_entropy_span_loss(const SpanProbs& probs, const std::vector<Span>& gold,
                                   const std::vector<std::uint8_t>& use, NllStats* stats = nullptr) {
  std::vector<std::size_t> s, e;
  for (const auto& g : gold) {
    if (g.start > g.end) throw ShapeError("cross_entropy_span_loss: gold start after end");
    s.push_back(g.start);
    e.push_back(g.end);
  }
  Var ls = mean_neg_log(probs.start, s, use, stats);
  Var le = mean_neg_log(probs.end, e, use, stats);
  return weighted_sum({ls, le}, {0.5, 0.5});
}

inline Var cross_entropy_span_loss(const SpanProbs& probs, const std::vector<Span>& gold, NllStats* stats = nullptr) {
  return cross_entropy_span_loss(probs, gold, std::vector<std::uint8_t>(gold.size(), 1), stats);
}

}  // namespace domaininv
