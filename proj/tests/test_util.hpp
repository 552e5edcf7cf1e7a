#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "domaininv/domaininv.hpp"

namespace testutil {

using namespace domaininv;

// Element-wise relative error with a small floor on the denominator.
inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// Max relative error of `analytic` against central differences of `f`
// with respect to every entry of `x`.
inline double fd_max_rel_err(const std::function<double()>& f, Matrix& x, const Matrix& analytic,
                             double h = 1e-5) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x.data[i];
    x.data[i] = keep + h;
    const double up = f();
    x.data[i] = keep - h;
    const double down = f();
    x.data[i] = keep;
    worst = std::max(worst, rel_err(analytic.data[i], (up - down) / (2.0 * h)));
  }
  return worst;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (auto& v : m.data) v = u(rng);
  return m;
}

// Rows are softmax-normalized random vectors.
inline Matrix random_distributions(std::size_t b, std::size_t v, std::uint64_t seed, double spread = 2.0) {
  Matrix m = random_matrix(b, v, seed, -spread, spread);
  for (std::size_t i = 0; i < b; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += (m(i, j) = std::exp(m(i, j)));
    for (std::size_t j = 0; j < v; ++j) m(i, j) /= z;
  }
  return m;
}

inline ModelConfig tiny_config(std::size_t vocab = 24, std::size_t seq_len = 16) {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.vocab_size = vocab;
  c.max_seq_len = seq_len;
  c.max_answer_len = 3;
  return c;
}

// [CLS] q q q [SEP] context... [SEP] PAD..., random ids, optional random gold span.
inline std::vector<TokenizedExample> tiny_examples(std::size_t n, const ModelConfig& cfg, std::uint64_t seed,
                                                   bool with_span = true, std::size_t question_len = 3,
                                                   std::size_t context_len = 9) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> tok(4, cfg.vocab_size - 1);
  std::vector<TokenizedExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    TokenizedExample ex;
    ex.id = "ex" + std::to_string(seed) + "-" + std::to_string(i);
    ex.question_type = static_cast<int>(i % 3);
    ex.token_ids.push_back(Vocabulary::kCls);
    ex.groups.push_back(TokenGroup::Special);
    for (std::size_t q = 0; q < question_len; ++q) {
      ex.token_ids.push_back(tok(rng));
      ex.groups.push_back(TokenGroup::Question);
    }
    ex.token_ids.push_back(Vocabulary::kSep);
    ex.groups.push_back(TokenGroup::Special);
    ex.context_first = ex.token_ids.size();
    for (std::size_t c = 0; c < context_len; ++c) {
      ex.token_ids.push_back(tok(rng));
      ex.groups.push_back(TokenGroup::Context);
      ex.context_words.push_back("w" + std::to_string(ex.token_ids.back()));
    }
    ex.context_last = ex.token_ids.size() - 1;
    ex.token_ids.push_back(Vocabulary::kSep);
    ex.groups.push_back(TokenGroup::Special);
    while (ex.token_ids.size() < cfg.max_seq_len) {
      ex.token_ids.push_back(Vocabulary::kPad);
      ex.groups.push_back(TokenGroup::Pad);
    }
    if (with_span) {
      std::uniform_int_distribution<std::size_t> start(ex.context_first, ex.context_last);
      const std::size_t s = start(rng);
      std::uniform_int_distribution<std::size_t> len(0, cfg.max_answer_len - 1);
      const std::size_t e = std::min(ex.context_last, s + len(rng));
      ex.span = Span{s, e};
      for (std::size_t p = s; p <= e; ++p) ex.groups[p] = TokenGroup::Answer;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<std::string> tiny_vocab_words(std::size_t n) {
  std::vector<std::string> w;
  for (std::size_t i = 4; i < n; ++i) w.push_back("w" + std::to_string(i));
  return w;
}

inline Vocabulary tiny_vocabulary(std::size_t n) {
  Corpus c;
  QASample s;
  s.id = "v";
  s.question = "w4";
  for (const auto& w : tiny_vocab_words(n)) s.context += w + " ";
  c.samples.push_back(s);
  Vocabulary v = build_vocabulary({&c});
  return v;
}

// A tiny model state with random (non-trivial) parameters; C2 is a perturbed
// copy of C1 so the two classifiers disagree.
inline ModelState tiny_state(std::uint64_t seed, bool perturb_c2 = true, std::size_t k = 4) {
  ModelConfig cfg = tiny_config();
  ShiftConfig sc;
  sc.k = k;
  ModelState m;
  m.config = cfg;
  m.shift_config = sc;
  auto init = init_model(cfg, seed);
  m.encoder = std::move(init.encoder);
  m.c1 = std::move(init.c1);
  m.c2 = clone_head(m.c1);
  m.shift = init_shift_projection(sc, cfg.hidden_dim, seed);
  m.vocab = tiny_vocabulary(cfg.vocab_size);
  m.seed = seed;
  m.stage = Stage::SourceFinetuned;
  if (perturb_c2) {
    std::mt19937_64 rng(seed + 99);
    std::normal_distribution<double> g(0.0, 0.5);
    m.c2.visit("", [&](const std::string&, Parameter& p) {
      for (auto& v : p.value().data) v += g(rng);
    });
  }
  return m;
}

inline ExampleRefs refs(const std::vector<TokenizedExample>& v) {
  ExampleRefs r;
  for (const auto& e : v) r.push_back(&e);
  return r;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("domaininv-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
