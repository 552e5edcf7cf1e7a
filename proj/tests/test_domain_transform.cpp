#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "test_util.hpp"

using namespace domaininv;
using testutil::random_matrix;
using testutil::tiny_config;
using testutil::tiny_examples;

namespace {

// Hand-built masks over `n` positions from explicit index lists.
GroupMasks masks_of(std::size_t n, std::vector<std::size_t> q, std::vector<std::size_t> c, std::vector<std::size_t> a) {
  GroupMasks m{std::vector<std::uint8_t>(n, 0), std::vector<std::uint8_t>(n, 0), std::vector<std::uint8_t>(n, 0)};
  for (auto p : q) m.question[p] = 1;
  for (auto p : c) m.context[p] = 1;
  for (auto p : a) m.answer[p] = 1;
  return m;
}

Matrix identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

GroupMasks random_masks(std::size_t n, std::mt19937_64& rng) {
  GroupMasks m{std::vector<std::uint8_t>(n, 0), std::vector<std::uint8_t>(n, 0), std::vector<std::uint8_t>(n, 0)};
  for (std::size_t p = 0; p < n; ++p) {
    const auto g = rng() % 4;
    if (g == 1) m.question[p] = 1;
    if (g == 2) m.context[p] = 1;
    if (g == 3) m.answer[p] = 1;
  }
  return m;
}

}  // namespace

TEST(GroupShift, HandEvaluation) {
  const Matrix w = identity(2);
  Matrix hs(3, 2, {1, 1, 3, 3, 9, 9});
  Matrix ht(3, 2, {0, 0, 4, 8, 7, 7});
  const auto ms = masks_of(3, {2}, {0, 1}, {});
  const auto mt = masks_of(3, {2}, {0, 1}, {});
  const auto phi = compute_group_shift(w, hs, ht, ms, mt, Group::Context);
  EXPECT_EQ(phi, (std::vector<double>{0.0, 2.0}));
  const Matrix out = apply_transform(hs, {std::vector<double>{0, 0}, phi, std::vector<double>{0, 0}}, ms, w);
  EXPECT_EQ(out(0, 0), 1.0);
  EXPECT_EQ(out(0, 1), 3.0);
  EXPECT_EQ(out(1, 1), 5.0);
  EXPECT_EQ(out(2, 1), 9.0);  // question row untouched by the context shift
}

TEST(GroupShift, EmptyGroupFallsBackToZero) {
  const Matrix w = random_matrix(2, 3, 1);
  const Matrix hs = random_matrix(4, 3, 2), ht = random_matrix(4, 3, 3);
  const auto ms = masks_of(4, {0}, {1}, {2});
  const auto mt = masks_of(4, {0}, {1, 2}, {});
  EXPECT_EQ(compute_group_shift(w, hs, ht, ms, mt, Group::Answer), (std::vector<double>{0.0, 0.0}));
  EXPECT_NE(compute_group_shift(w, hs, ht, ms, mt, Group::Context), (std::vector<double>{0.0, 0.0}));
}

TEST(GroupShift, RejectsShapeMismatch) {
  const auto m = masks_of(2, {0}, {1}, {});
  EXPECT_THROW(compute_group_shift(Matrix(2, 3), Matrix(2, 4), Matrix(2, 4), m, m, Group::Question), ShapeError);
  EXPECT_THROW(apply_transform(Matrix(2, 4), {}, m, Matrix(2, 3)), ShapeError);
}

TEST(GroupShift, IdentityIsExactOnRandomInputs) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 12, d = 1 + rng() % 8, k = 1 + rng() % 6;
    const Matrix w = random_matrix(k, d, rng(), -3, 3), h = random_matrix(n, d, rng(), -5, 5);
    const auto m = random_masks(n, rng);
    std::array<std::vector<double>, 3> shifts;
    for (Group g : kGroups) {
      shifts[static_cast<std::size_t>(g)] = compute_group_shift(w, h, h, m, m, g);
      for (double v : shifts[static_cast<std::size_t>(g)]) EXPECT_EQ(v, 0.0);
    }
    EXPECT_EQ(apply_transform(h, shifts, m, w), h);
  }
}

TEST(GroupShift, LinearInTargetDisplacement) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 6, d = 5, k = 3;
    const Matrix w = random_matrix(k, d, rng()), hs = random_matrix(n, d, rng());
    const Matrix disp = random_matrix(n, d, rng());
    const auto m = masks_of(n, {0, 1}, {2, 3, 4}, {5});
    const double c = 0.1 + static_cast<double>(rng() % 50) / 10.0;
    Matrix ht1 = hs, htc = hs;
    for (std::size_t i = 0; i < hs.size(); ++i) {
      ht1.data[i] += disp.data[i];
      htc.data[i] += c * disp.data[i];
    }
    for (Group g : kGroups) {
      const auto p1 = compute_group_shift(w, hs, ht1, m, m, g);
      const auto pc = compute_group_shift(w, hs, htc, m, m, g);
      for (std::size_t r = 0; r < k; ++r) EXPECT_LE(testutil::rel_err(pc[r], c * p1[r]), 1e-10);
    }
  }
}

TEST(GroupShift, CorrectionLiesInRowSpaceOfW) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 7, d = 6, k = 2;
    const Matrix w = random_matrix(k, d, rng()), hs = random_matrix(n, d, rng()), ht = random_matrix(n, d, rng());
    const auto m = masks_of(n, {0, 1}, {2, 3}, {4, 5});
    std::array<std::vector<double>, 3> shifts;
    for (Group g : kGroups) shifts[static_cast<std::size_t>(g)] = compute_group_shift(w, hs, ht, m, m, g);
    const Matrix out = apply_transform(hs, shifts, m, w);
    Eigen::MatrixXd wt(d, k);
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t j = 0; j < d; ++j) wt(j, r) = w(r, j);
    const Eigen::MatrixXd q = wt.householderQr().householderQ() * Eigen::MatrixXd::Identity(d, k);
    for (std::size_t p = 0; p < n; ++p) {
      Eigen::VectorXd corr(d);
      for (std::size_t j = 0; j < d; ++j) corr(j) = out(p, j) - hs(p, j);
      const Eigen::VectorXd residual = corr - q * (q.transpose() * corr);
      EXPECT_LT(residual.norm(), 1e-8);
    }
    // SPECIAL / PAD position 6 is never shifted.
    for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(out(6, j), hs(6, j));
  }
}

TEST(GroupMasks, CountsAndDisjointness) {
  const ModelConfig cfg = tiny_config();
  auto ex = tiny_examples(1, cfg, 3, false, 3, 5)[0];
  const auto none = make_group_masks(ex, std::nullopt);
  EXPECT_EQ(none.count(Group::Question), 3u);
  EXPECT_EQ(none.count(Group::Context), 5u);
  EXPECT_EQ(none.count(Group::Answer), 0u);
  const Span s{ex.context_first + 1, ex.context_first + 2};
  const auto m = make_group_masks(ex, s);
  EXPECT_EQ(m.count(Group::Question), 3u);
  EXPECT_EQ(m.count(Group::Context), 3u);
  EXPECT_EQ(m.count(Group::Answer), 2u);
  for (std::size_t p = 0; p < ex.length(); ++p) {
    EXPECT_LE(m.question[p] + m.context[p] + m.answer[p], 1);
    if (ex.groups[p] == TokenGroup::Special || ex.groups[p] == TokenGroup::Pad) {
      EXPECT_EQ(m.question[p] + m.context[p] + m.answer[p], 0);
    }
  }
  const auto whole = make_group_masks(ex, Span{ex.context_first, ex.context_last});
  EXPECT_EQ(whole.count(Group::Context), 0u);
  EXPECT_EQ(whole.count(Group::Answer), 5u);
  EXPECT_THROW(make_group_masks(ex, Span{0, 1}), ShapeError);
  EXPECT_THROW(make_group_masks(ex, Span{ex.context_last, ex.context_last + 1}), ShapeError);
}

TEST(GroupMasks, SpanOverridesStoredAnswerLabels) {
  // A source example labelled with a gold answer, masked with a different (pseudo) span.
  const ModelConfig cfg = tiny_config();
  auto ex = tiny_examples(1, cfg, 4, true)[0];
  const Span other{ex.context_last, ex.context_last};
  const auto m = make_group_masks(ex, other);
  EXPECT_EQ(m.count(Group::Answer), 1u);
  EXPECT_EQ(m.answer[ex.context_last], 1);
}

TEST(ShiftOperators, BatchedShiftMatchesPerInstanceReference) {
  const std::size_t b = 3, t = 6, d = 4, k = 3;
  std::mt19937_64 rng(21);
  const Matrix w = random_matrix(k, d, 1), hs = random_matrix(b * t, d, 2), ht = random_matrix(b * t, d, 3);
  std::vector<GroupMasks> ms, mt;
  for (std::size_t i = 0; i < b; ++i) {
    ms.push_back(random_masks(t, rng));
    mt.push_back(random_masks(t, rng));
  }
  const auto ops = make_shift_operators(ms, mt, t);
  auto [shifted, phi] = shift_source_states(Var::constant(w), Var::constant(hs), Var::constant(ht), ops);
  for (std::size_t i = 0; i < b; ++i) {
    Matrix hsi(t, d), hti(t, d);
    for (std::size_t p = 0; p < t; ++p)
      for (std::size_t j = 0; j < d; ++j) {
        hsi(p, j) = hs(i * t + p, j);
        hti(p, j) = ht(i * t + p, j);
      }
    std::array<std::vector<double>, 3> shifts;
    for (Group g : kGroups) {
      shifts[static_cast<std::size_t>(g)] = compute_group_shift(w, hsi, hti, ms[i], mt[i], g);
      for (std::size_t r = 0; r < k; ++r)
        EXPECT_NEAR(phi.value()(i * 3 + static_cast<std::size_t>(g), r), shifts[static_cast<std::size_t>(g)][r], 1e-12);
    }
    const Matrix ref = apply_transform(hsi, shifts, ms[i], w);
    for (std::size_t p = 0; p < t; ++p)
      for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(shifted.value()(i * t + p, j), ref(p, j), 1e-12);
  }
}

TEST(ShiftOperators, GradientWithRespectToW) {
  const std::size_t b = 2, t = 5, d = 3, k = 2;
  std::mt19937_64 rng(22);
  Matrix w = random_matrix(k, d, 4);
  const Matrix hs = random_matrix(b * t, d, 5), ht = random_matrix(b * t, d, 6), probe = random_matrix(b * t, d, 7);
  std::vector<GroupMasks> ms, mt;
  for (std::size_t i = 0; i < b; ++i) {
    ms.push_back(masks_of(t, {0}, {1, 2}, {3}));
    mt.push_back(masks_of(t, {0, 1}, {2}, {3, 4}));
  }
  const auto ops = make_shift_operators(ms, mt, t);
  auto loss = [&](const Var& wv) {
    auto out = shift_source_states(wv, Var::constant(hs), Var::constant(ht), ops).first;
    Var sq = apply_mask(out, probe);
    Matrix ones_r(1, b * t, 1.0), ones_c(d, 1, 1.0);
    Var s = matmul(matmul(Var::constant(ones_r), sq), Var::constant(ones_c));
    return matmul(s, s);  // quadratic so the gradient depends on W nonlinearly
  };
  Var leaf = Var::leaf(w, true);
  backward(loss(leaf));
  const Matrix analytic = leaf.grad();
  EXPECT_LT(testutil::fd_max_rel_err([&] { return loss(Var::constant(w)).scalar(); }, w, analytic), 1e-4);
}

TEST(ShiftHook, TargetAsBothDomainsLeavesForwardBitExact) {
  auto m = testutil::tiny_state(31);
  const auto ex = tiny_examples(4, m.config, 32);
  const auto r = testutil::refs(ex);
  PairBatch pb;
  pb.source = r;
  pb.target = r;
  for (const auto& e : ex) pb.pseudo.push_back(*e.span);
  const EncodedBatch batch = encode_batch(r, m.config);
  for (bool training : {false, true})
    for (HookPlacement place : {HookPlacement::AfterBlock, HookPlacement::AfterEmbeddings}) {
      m.shift_config.placement = place;
      ForwardOptions opt;
      opt.training = training;
      const auto plain = forward_encoder(m.encoder, m.config, batch, opt);
      const auto hooked = target_aware_source_forward(m, pb, batch, plain.hidden, opt);
      for (std::size_t l = 0; l < plain.hidden.size(); ++l) EXPECT_EQ(plain.hidden[l].value(), hooked.hidden[l].value());
      const auto a = classify_spans(m.c1, plain.final_hidden, batch);
      const auto b = classify_spans(m.c1, hooked.final_hidden, batch);
      EXPECT_EQ(a.start_logits.value(), b.start_logits.value());
      EXPECT_EQ(a.end_logits.value(), b.end_logits.value());
    }
}

TEST(ShiftHook, RecordsZeroPhiForIdenticalPairs) {
  auto m = testutil::tiny_state(33);
  const auto ex = tiny_examples(3, m.config, 34);
  const auto batch = encode_batch(ex, m.config);
  const auto plain = forward_encoder(m.encoder, m.config, batch);
  std::vector<GroupMasks> masks;
  for (const auto& e : ex) masks.push_back(make_group_masks(e, e.span));
  std::vector<Matrix> log;
  ForwardOptions opt;
  opt.hook = make_shift_hook(m.shift, plain.hidden, make_shift_operators(masks, masks, batch.seq_len), &log);
  forward_encoder(m.encoder, m.config, batch, opt);
  ASSERT_EQ(log.size(), m.config.num_layers);
  for (const Matrix& phi : log)
    for (double v : phi.data) EXPECT_EQ(v, 0.0);
}

TEST(ShiftConfig, DefaultDimensionAndValidation) {
  EXPECT_EQ(default_shift_dim(32), 16u);
  EXPECT_EQ(default_shift_dim(768), 256u);
  ShiftConfig c;
  c.k = 0;
  EXPECT_THROW(c.validate(32), std::invalid_argument);
  const auto p = init_shift_projection(ShiftConfig{4, HookPlacement::AfterBlock}, 8, 1);
  EXPECT_EQ(p.w.value().rows, 4u);
  EXPECT_EQ(p.w.value().cols, 8u);
}
