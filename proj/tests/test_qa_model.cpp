#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "test_util.hpp"

using namespace domaininv;
using testutil::tiny_config;
using testutil::tiny_examples;

namespace {

std::uint64_t hidden_checksum(const EncoderOutput& out) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Var& v : out.hidden) h = checksum(v.value(), h);
  return checksum(out.final_hidden.value(), h);
}

bool same_params(const EncoderParams& a, const EncoderParams& b) { return a.checksum() == b.checksum(); }

}  // namespace

TEST(ModelConfig, RejectsInvalidDimensions) {
  ModelConfig c;
  c.num_heads = 3;
  c.hidden_dim = 32;
  EXPECT_THROW(c.validate(), ConfigError);
  ModelConfig z;
  z.num_layers = 0;
  EXPECT_THROW(z.validate(), ConfigError);
  ModelConfig m;
  m.max_answer_len = m.max_seq_len + 1;
  EXPECT_THROW(m.validate(), ConfigError);
  ModelConfig d;
  d.dropout_rate = 1.5;
  EXPECT_THROW(d.validate(), ConfigError);
  EXPECT_THROW(init_model(c, 1), ConfigError);
}

TEST(ModelConfig, JsonRoundTrip) {
  ModelConfig c = tiny_config();
  c.dropout_rate = 0.25;
  EXPECT_EQ(nlohmann::json(c).get<ModelConfig>(), c);
}

TEST(InitModel, DeterministicForSeed) {
  const ModelConfig cfg = tiny_config();
  auto a = init_model(cfg, 7), b = init_model(cfg, 7), c = init_model(cfg, 8);
  EXPECT_TRUE(same_params(a.encoder, b.encoder));
  EXPECT_EQ(a.c1.checksum(), b.c1.checksum());
  EXPECT_FALSE(same_params(a.encoder, c.encoder));
  EXPECT_EQ(a.c1.checksum(), a.c2.checksum());
}

TEST(ClassifierHead, CloneIsDeep) {
  auto m = init_model(tiny_config(), 3);
  const std::uint64_t before = m.c1.checksum();
  ClassifierHead c2 = clone_head(m.c1);
  c2.start_w.value().data[0] += 1.0;
  c2.end_b.value().data[0] -= 1.0;
  EXPECT_EQ(m.c1.checksum(), before);
  EXPECT_NE(c2.checksum(), before);
}

TEST(ForwardEncoder, ReturnsAllLayersAndShapes) {
  const ModelConfig cfg = tiny_config();
  auto m = init_model(cfg, 1);
  const auto ex = tiny_examples(3, cfg, 2);
  const auto out = forward_encoder(m.encoder, cfg, encode_batch(ex, cfg));
  ASSERT_EQ(out.hidden.size(), cfg.num_layers + 1);
  for (const Var& h : out.hidden) {
    EXPECT_EQ(h.rows(), 3 * cfg.max_seq_len);
    EXPECT_EQ(h.cols(), cfg.hidden_dim);
  }
  EXPECT_EQ(out.final_hidden.rows(), 3 * cfg.max_seq_len);
}

TEST(ForwardEncoder, IdentityHookChangesNoBit) {
  const ModelConfig cfg = tiny_config();
  auto m = init_model(cfg, 4);
  const auto ex = tiny_examples(4, cfg, 5);
  const auto batch = encode_batch(ex, cfg);
  for (bool training : {false, true})
    for (HookPlacement place : {HookPlacement::AfterBlock, HookPlacement::AfterEmbeddings}) {
      ForwardOptions plain;
      plain.training = training;
      ForwardOptions hooked = plain;
      hooked.hook_placement = place;
      std::size_t calls = 0;
      hooked.hook = [&calls](std::size_t, const Var& h) {
        ++calls;
        return h;
      };
      const auto a = forward_encoder(m.encoder, cfg, batch, plain);
      const auto b = forward_encoder(m.encoder, cfg, batch, hooked);
      EXPECT_EQ(calls, cfg.num_layers);
      EXPECT_EQ(hidden_checksum(a), hidden_checksum(b));
    }
}

TEST(ForwardEncoder, HookReplacesStateBeforeNextLayer) {
  const ModelConfig cfg = tiny_config();
  auto m = init_model(cfg, 4);
  const auto batch = encode_batch(tiny_examples(2, cfg, 6), cfg);
  ForwardOptions opt;
  std::vector<std::size_t> layers;
  opt.hook = [&](std::size_t l, const Var& h) {
    layers.push_back(l);
    return l == 1 ? scale(h, 2.0) : h;
  };
  const auto hooked = forward_encoder(m.encoder, cfg, batch, opt);
  const auto plain = forward_encoder(m.encoder, cfg, batch);
  EXPECT_EQ(layers, (std::vector<std::size_t>{1, 2}));
  // H^(1) is reported post-hook and differs; layer 2 consumed the scaled state.
  EXPECT_NE(checksum(hooked.hidden[1].value()), checksum(plain.hidden[1].value()));
  EXPECT_EQ(hooked.hidden[1].value().data[0], 2.0 * plain.hidden[1].value().data[0]);
  EXPECT_NE(checksum(hooked.hidden[2].value()), checksum(plain.hidden[2].value()));
}

TEST(ForwardEncoder, EvalModeIsDeterministicAndLeavesRunningStats) {
  const ModelConfig cfg = tiny_config();
  auto m = init_model(cfg, 9);
  const auto ex = tiny_examples(1, cfg, 10);
  const auto batch = encode_batch(ex, cfg);
  const std::uint64_t before = m.encoder.checksum();
  const auto a = forward_encoder(m.encoder, cfg, batch);
  const auto b = forward_encoder(m.encoder, cfg, batch);
  EXPECT_EQ(hidden_checksum(a), hidden_checksum(b));
  EXPECT_EQ(m.encoder.checksum(), before);
}

TEST(ForwardEncoder, RunningStatsUpdateOnlyWhenRequested) {
  const ModelConfig cfg = tiny_config();
  auto m = init_model(cfg, 9);
  const auto batch = encode_batch(tiny_examples(3, cfg, 10), cfg);
  const std::uint64_t before = m.encoder.checksum();
  ForwardOptions opt;
  opt.training = true;
  forward_encoder(m.encoder, cfg, batch, opt);
  EXPECT_EQ(m.encoder.checksum(), before);
  opt.update_running_stats = true;
  forward_encoder(m.encoder, cfg, batch, opt);
  EXPECT_NE(m.encoder.checksum(), before);
}

TEST(ForwardEncoder, PaddingDoesNotLeakIntoValidPositions) {
  const ModelConfig cfg = tiny_config();
  auto m = init_model(cfg, 12);
  auto ex = tiny_examples(1, cfg, 13);
  const auto a = forward_encoder(m.encoder, cfg, encode_batch(ex, cfg));
  // Change a PAD token id; valid positions must be unaffected in eval mode.
  ex[0].token_ids.back() = 7;
  const auto b = forward_encoder(m.encoder, cfg, encode_batch(ex, cfg));
  const std::size_t last_valid = ex[0].context_last + 1;
  for (std::size_t p = 0; p <= last_valid; ++p)
    for (std::size_t j = 0; j < cfg.hidden_dim; ++j)
      EXPECT_EQ(a.final_hidden.value()(p, j), b.final_hidden.value()(p, j));
}

TEST(ForwardEncoder, RejectsBadInputs) {
  const ModelConfig cfg = tiny_config();
  auto m = init_model(cfg, 1);
  auto ex = tiny_examples(2, cfg, 2);
  ex[1].token_ids[1] = cfg.vocab_size;
  EXPECT_THROW(encode_batch(ex, cfg), ShapeError);
  auto short_ex = tiny_examples(2, cfg, 2);
  short_ex[1].token_ids.pop_back();
  short_ex[1].groups.pop_back();
  EXPECT_THROW(encode_batch(short_ex, cfg), ShapeError);
  EXPECT_THROW(encode_batch(std::vector<TokenizedExample>{}, cfg), ShapeError);
  auto ok = tiny_examples(1, cfg, 3);
  m.encoder.token_embedding.value().data[ok[0].token_ids[1] * cfg.hidden_dim] =
      std::numeric_limits<double>::infinity();
  EXPECT_THROW(forward_encoder(m.encoder, cfg, encode_batch(ok, cfg)), NumericError);
}

TEST(ForwardEncoder, HiddenStateChecksumMatchesRecordedFixture) {
  const ModelConfig cfg = tiny_config();
  auto m = init_model(cfg, 20240611);
  const auto ex = tiny_examples(2, cfg, 17);
  const auto out = forward_encoder(m.encoder, cfg, encode_batch(ex, cfg));
  std::ifstream in(std::string(DOMAININV_FIXTURE_DIR) + "/tiny_model_hidden_checksum.txt");
  ASSERT_TRUE(in) << "missing fixture; current checksum is " << hidden_checksum(out);
  std::uint64_t recorded = 0;
  in >> recorded;
  EXPECT_EQ(hidden_checksum(out), recorded);
}

TEST(ClassifySpans, ProbabilitiesNormalizedAndMasked) {
  const ModelConfig cfg = tiny_config();
  auto m = init_model(cfg, 21);
  const auto ex = tiny_examples(3, cfg, 22);
  const auto batch = encode_batch(ex, cfg);
  const auto out = forward_encoder(m.encoder, cfg, batch);
  const SpanProbs p = classify_spans(m.c1, out.final_hidden, batch);
  for (const Var* v : {&p.start, &p.end})
    for (std::size_t b = 0; b < 3; ++b) {
      double s = 0.0;
      for (std::size_t j = 0; j < cfg.max_seq_len; ++j) {
        const double x = v->value()(b, j);
        if (!ex[b].in_context(j)) {
          EXPECT_EQ(x, 0.0);
        }
        EXPECT_GE(x, 0.0);
        s += x;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(ClassifySpans, ClosedFormSoftmaxValues) {
  // Hidden states chosen so the start logits over the window are [1, 2, 3].
  EncodedBatch batch;
  batch.batch = 1;
  batch.seq_len = 5;
  batch.context = {0, 1, 1, 1, 0};
  Matrix h(5, 1, {9.0, 1.0, 2.0, 3.0, -4.0});
  ClassifierHead head;
  head.start_w = Parameter(Matrix(1, 1, {1.0}));
  head.start_b = Parameter(Matrix(1, 1, {0.0}));
  head.end_w = Parameter(Matrix(1, 1, {0.0}));
  head.end_b = Parameter(Matrix(1, 1, {0.0}));
  const SpanProbs p = classify_spans(head, Var::constant(h), batch);
  EXPECT_NEAR(p.start.value().data[1], 0.0900, 5e-5);
  EXPECT_NEAR(p.start.value().data[2], 0.2447, 5e-5);
  EXPECT_NEAR(p.start.value().data[3], 0.6652, 5e-5);
  for (std::size_t j = 1; j <= 3; ++j) EXPECT_DOUBLE_EQ(p.end.value().data[j], 1.0 / 3.0);
  EXPECT_EQ(p.start.value().data[0], 0.0);
  EXPECT_EQ(p.start.value().data[4], 0.0);
}

TEST(ClassifySpans, UniformOverFiveContextPositions) {
  EncodedBatch batch;
  batch.batch = 1;
  batch.seq_len = 7;
  batch.context = {0, 1, 1, 1, 1, 1, 0};
  ClassifierHead head;
  for (Parameter* p : {&head.start_w, &head.end_w}) *p = Parameter(Matrix(2, 1));
  for (Parameter* p : {&head.start_b, &head.end_b}) *p = Parameter(Matrix(1, 1));
  const SpanProbs p = classify_spans(head, Var::constant(testutil::random_matrix(7, 2, 1)), batch);
  for (std::size_t j = 1; j <= 5; ++j) EXPECT_DOUBLE_EQ(p.start.value().data[j], 0.2);
}

TEST(DecodeSpan, HandCases) {
  auto a = decode_span({1, 0, 0}, {0, 0, 1}, 3);
  EXPECT_EQ(a.span, (Span{0, 2}));
  EXPECT_DOUBLE_EQ(a.score, 1.0);
  EXPECT_EQ(decode_span({1, 0, 0}, {1, 0, 0}, 3).span, (Span{0, 0}));
  auto t = decode_span({0.5, 0.5, 0}, {0, 0.5, 0.5}, 2);
  EXPECT_EQ(t.span, (Span{0, 1}));
  EXPECT_DOUBLE_EQ(t.score, 0.25);
  EXPECT_THROW(decode_span({}, {}, 2), ShapeError);
}

TEST(DecodeSpan, MatchesBruteForce) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng() % 32, max_len = 1 + rng() % 6;
    // Few distinct values so ties are common.
    std::vector<double> s(n), e(n);
    for (auto& v : s) v = static_cast<double>(rng() % 4) / 4.0;
    for (auto& v : e) v = static_cast<double>(rng() % 4) / 4.0;
    double best = -1.0;
    Span arg;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (j < i || j - i + 1 > max_len) continue;
        if (s[i] * e[j] > best) {
          best = s[i] * e[j];
          arg = {i, j};
        }
      }
    const auto got = decode_span(s, e, max_len);
    EXPECT_EQ(got.span, arg);
    EXPECT_EQ(got.score, best);
    EXPECT_LE(got.span.end - got.span.start + 1, max_len);
  }
}

TEST(CrossEntropySpanLoss, ClosedForms) {
  SpanProbs point;
  point.start = Var::constant(Matrix(1, 4, {0, 1, 0, 0}));
  point.end = Var::constant(Matrix(1, 4, {0, 0, 1, 0}));
  EXPECT_EQ(cross_entropy_span_loss(point, {Span{1, 2}}).scalar(), 0.0);

  SpanProbs uniform;
  uniform.start = Var::constant(Matrix(1, 4, 0.25));
  uniform.end = Var::constant(Matrix(1, 4, 0.25));
  EXPECT_NEAR(cross_entropy_span_loss(uniform, {Span{0, 3}}).scalar(), std::log(4.0), 1e-12);

  SpanProbs two;
  two.start = Var::constant(Matrix(2, 2, {0.5, 0.5, 0.2, 0.8}));
  two.end = Var::constant(Matrix(2, 2, {0.5, 0.5, 0.1, 0.9}));
  const double a = -(std::log(0.5) + std::log(0.5)) / 2.0;
  const double b = -(std::log(0.8) + std::log(0.9)) / 2.0;
  EXPECT_NEAR(cross_entropy_span_loss(two, {Span{0, 1}, Span{1, 1}}).scalar(), (a + b) / 2.0, 1e-12);
}

TEST(CrossEntropySpanLoss, ZeroGoldProbabilityIsClampedAndFlagged) {
  SpanProbs p;
  p.start = Var::constant(Matrix(1, 3, {0, 1, 0}));
  p.end = Var::constant(Matrix(1, 3, {0, 1, 0}));
  NllStats stats;
  const double v = cross_entropy_span_loss(p, {Span{0, 1}}, &stats).scalar();
  EXPECT_EQ(stats.clamp_events, 1u);
  EXPECT_NEAR(v, -std::log(1e-12) / 2.0, 1e-9);
  EXPECT_THROW(cross_entropy_span_loss(p, {Span{2, 1}}), ShapeError);
}

TEST(TokenizedExample, SpanTextFromContextWords) {
  const ModelConfig cfg = tiny_config();
  auto ex = tiny_examples(1, cfg, 30)[0];
  const Span s{ex.context_first + 1, ex.context_first + 2};
  EXPECT_EQ(ex.span_text(s), ex.context_words[1] + " " + ex.context_words[2]);
  EXPECT_EQ(ex.span_text(Span{0, 0}), "");
}
