#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace domaininv;
using testutil::refs;
using testutil::tiny_examples;
using testutil::tiny_state;

// Central differences (h = 1e-5) against reverse mode for every parameter of
// every group a loss trains, on the tiny model: L=2, d=8, seq 16, batch 4.

namespace {

using Named = std::vector<std::pair<std::string, Parameter*>>;

Named encoder_group(ModelState& m) {
  Named out;
  m.encoder.visit([&](const std::string& n, Parameter& p) { out.emplace_back("encoder." + n, &p); });
  return out;
}

Named head_group(ClassifierHead& h, const std::string& prefix) {
  Named out;
  h.visit(prefix, [&](const std::string& n, Parameter& p) { out.emplace_back(n, &p); });
  return out;
}

Named concat(std::initializer_list<Named> parts) {
  Named out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

// Worst relative error per parameter array; fails on any above 1e-4.
void check_gradients(const std::function<Var()>& loss, const Named& params) {
  for (const auto& [_, p] : params) {
    p->set_trainable(true);
    p->zero_grad();
  }
  backward(loss());
  for (const auto& [name, p] : params) {
    const Matrix analytic = p->has_grad() ? p->grad() : Matrix(p->value().rows, p->value().cols);
    const double err = testutil::fd_max_rel_err([&] { return loss().scalar(); }, p->value(), analytic, 1e-5);
    EXPECT_LT(err, 1e-4) << name;
    p->zero_grad();
  }
}

struct GradFixture {
  ModelState m;
  std::vector<TokenizedExample> source;
  std::vector<TokenizedExample> target;
  PairBatch pb;

  explicit GradFixture(std::uint64_t seed)
      : m(tiny_state(seed)),
        source(tiny_examples(4, m.config, seed + 1)),
        target(tiny_examples(4, m.config, seed + 2, false)) {
    pb.source = refs(source);
    pb.target = refs(target);
    pb.pseudo = pseudo_label(m, target);
    set_trainable(m, {});
  }
};

// Batch statistics without touching running state, so repeated evaluations agree.
ForwardOptions fd_options() { return train_options(false, 0.9, 11); }

SWDConfig swd_cfg() {
  SWDConfig c;
  c.num_projections = 16;
  c.seed = 4;
  return c;
}

}  // namespace

TEST(Gradients, SourceCrossEntropy) {
  GradFixture f(1);
  const EncodedBatch b = encode_batch(f.pb.source, f.m.config);
  check_gradients(
      [&] {
        const EncoderOutput h = forward_encoder(f.m.encoder, f.m.config, b, fd_options());
        return cross_entropy_span_loss(classify_spans(f.m.c1, h.final_hidden, b), gold_spans(f.pb.source));
      },
      concat({encoder_group(f.m), head_group(f.m.c1, "c1.")}));
}

TEST(Gradients, DomainInvariantLoss) {
  GradFixture f(2);
  check_gradients([&] { return domain_invariant_loss(f.m, f.pb, fd_options()); },
                  concat({encoder_group(f.m), head_group(f.m.c2, "c2."), {{"shift.w", &f.m.shift.w}}}));
}

TEST(Gradients, DomainInvariantLossWithHookOnBlockInputs) {
  GradFixture f(3);
  f.m.shift_config.placement = HookPlacement::AfterEmbeddings;
  check_gradients([&] { return domain_invariant_loss(f.m, f.pb, fd_options()); },
                  concat({encoder_group(f.m), {{"shift.w", &f.m.shift.w}}}));
}

TEST(Gradients, ClassifierObjective) {
  GradFixture f(4);
  const ClassifierObjective probe = classifier_discrepancy_loss(f.m, f.pb, swd_cfg(), 0, fd_options());
  ASSERT_GT(probe.num_inconsistent, 0u) << "fixture must exercise the CE term";
  check_gradients([&] { return classifier_discrepancy_loss(f.m, f.pb, swd_cfg(), 0, fd_options()).total; },
                  concat({head_group(f.m.c1, "c1."), head_group(f.m.c2, "c2.")}));
}

TEST(Gradients, ClassifierObjectiveOnLogits) {
  GradFixture f(5);
  SWDConfig c = swd_cfg();
  c.on_logits = true;
  check_gradients([&] { return classifier_discrepancy_loss(f.m, f.pb, c, 1, fd_options()).total; },
                  concat({head_group(f.m.c1, "c1."), head_group(f.m.c2, "c2.")}));
}

TEST(Gradients, GeneratorObjective) {
  GradFixture f(6);
  check_gradients(
      [&] {
        Var total;
        generator_discrepancy_loss(f.m, f.pb.target, swd_cfg(), 2, fd_options(), &total);
        return total;
      },
      encoder_group(f.m));
}
