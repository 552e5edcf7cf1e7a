#pragma once

// Group-wise domain shift between paired source/target instances and the
// additive transformation that injects it into source hidden states.
//
//   phi_g^(l)  = mean_{p in g(target)} W h_t[p]  -  mean_{p in g(source)} W h_s[p]
//   h'_s[p]    = h_s[p] + W^T phi_g^(l)          for every source position p in g
//
// W (k x d) is shared by every layer and every group. If either side of a
// group is empty the shift for that group is zero.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "domaininv/qa_model.hpp"

namespace domaininv {

struct ShiftConfig {
  std::size_t k = 16;
  HookPlacement placement = HookPlacement::AfterBlock;

  void validate(std::size_t hidden_dim) const {
    if (k == 0) throw ConfigError("shift config: k must be >= 1");
    (void)hidden_dim;
  }
};

inline void to_json(nlohmann::json& j, const ShiftConfig& c) {
  j = {{"k", c.k}, {"placement", c.placement == HookPlacement::AfterBlock ? "after_block" : "after_embeddings"}};
}
inline void from_json(const nlohmann::json& j, ShiftConfig& c) {
  c.k = j.value("k", c.k);
  const std::string p = j.value("placement", std::string("after_block"));
  if (p == "after_block")
    c.placement = HookPlacement::AfterBlock;
  else if (p == "after_embeddings")
    c.placement = HookPlacement::AfterEmbeddings;
  else
    throw ConfigError("shift config: unknown placement '" + p + "'");
}

// Default k for a hidden width: d/2 rounded down to a power of two.
inline std::size_t default_shift_dim(std::size_t hidden_dim) {
  std::size_t k = 1;
  while (k * 2 <= hidden_dim / 2) k *= 2;
  return k;
}

// W, the k x d projection shared across layers and groups.
struct ShiftProjection {
  Parameter w;

  std::size_t k() const { return w.value().rows; }
  std::size_t d() const { return w.value().cols; }
  std::uint64_t checksum() const { return domaininv::checksum(w.value()); }
};

inline ShiftProjection init_shift_projection(const ShiftConfig& cfg, std::size_t hidden_dim, std::uint64_t seed) {
  cfg.validate(hidden_dim);
  Rng rng = make_rng(seed, streams::kInit, 0x5348u);
  return ShiftProjection{Parameter(detail::gaussian(cfg.k, hidden_dim, 1.0 / std::sqrt(double(hidden_dim)), rng))};
}

enum class Group : std::uint8_t { Question = 0, Context = 1, Answer = 2 };
inline constexpr std::array<Group, 3> kGroups{Group::Question, Group::Context, Group::Answer};

inline const char* group_name(Group g) {
  switch (g) {
    case Group::Question: return "question";
    case Group::Context: return "context";
    case Group::Answer: return "answer";
  }
  return "?";
}

// Disjoint per-position masks; SPECIAL and PAD positions belong to no group.
struct GroupMasks {
  std::vector<std::uint8_t> question;
  std::vector<std::uint8_t> context;
  std::vector<std::uint8_t> answer;

  const std::vector<std::uint8_t>& of(Group g) const {
    switch (g) {
      case Group::Question: return question;
      case Group::Context: return context;
      default: return answer;
    }
  }
  std::size_t count(Group g) const {
    std::size_t n = 0;
    for (auto v : of(g)) n += v;
    return n;
  }
};

// QUESTION = question tokens, ANSWER = span tokens, CONTEXT = context minus span.
inline GroupMasks make_group_masks(const TokenizedExample& ex, const std::optional<Span>& span) {
  const std::size_t n = ex.length();
  if (span) {
    if (span->start > span->end || !ex.in_context(span->start) || !ex.in_context(span->end))
      throw ShapeError("make_group_masks: span outside context window of " + ex.id);
  }
  GroupMasks m{std::vector<std::uint8_t>(n, 0), std::vector<std::uint8_t>(n, 0), std::vector<std::uint8_t>(n, 0)};
  for (std::size_t p = 0; p < n; ++p) {
    const TokenGroup g = ex.groups[p];
    if (g == TokenGroup::Question) {
      m.question[p] = 1;
    } else if (g == TokenGroup::Context || g == TokenGroup::Answer) {
      if (span && p >= span->start && p <= span->end)
        m.answer[p] = 1;
      else
        m.context[p] = 1;
    }
  }
  return m;
}

// phi for one instance pair at one layer. H_s and H_t are seq_len x d.
inline std::vector<double> compute_group_shift(const Matrix& w, const Matrix& h_s, const Matrix& h_t,
                                               const GroupMasks& masks_s, const GroupMasks& masks_t, Group g) {
  if (h_s.cols != w.cols || h_t.cols != w.cols)
    throw ShapeError("compute_group_shift: W is " + shape_str(w) + " but hidden states are " + shape_str(h_s) +
                     " / " + shape_str(h_t));
  const auto& ms = masks_s.of(g);
  const auto& mt = masks_t.of(g);
  if (ms.size() != h_s.rows || mt.size() != h_t.rows) throw ShapeError("compute_group_shift: mask length mismatch");
  const std::size_t d = w.cols, k = w.rows;
  std::vector<double> phi(k, 0.0);
  const std::size_t ns = masks_s.count(g), nt = masks_t.count(g);
  if (ns == 0 || nt == 0) return phi;
  std::vector<double> mean_s(d, 0.0), mean_t(d, 0.0);
  for (std::size_t p = 0; p < h_s.rows; ++p)
    if (ms[p])
      for (std::size_t j = 0; j < d; ++j) mean_s[j] += h_s(p, j) / static_cast<double>(ns);
  for (std::size_t p = 0; p < h_t.rows; ++p)
    if (mt[p])
      for (std::size_t j = 0; j < d; ++j) mean_t[j] += h_t(p, j) / static_cast<double>(nt);
  // avg(W h) = W avg(h) by linearity.
  for (std::size_t r = 0; r < k; ++r) {
    double a = 0.0, b = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      a += w(r, j) * mean_t[j];
      b += w(r, j) * mean_s[j];
    }
    phi[r] = a - b;
  }
  return phi;
}

struct DomainShiftVector {
  // phi[layer][group] in R^k, for one instance pair.
  std::vector<std::array<std::vector<double>, 3>> phi;
};

// Adds W^T phi_g to each source position of group g; other positions unchanged.
inline Matrix apply_transform(const Matrix& h_s, const std::array<std::vector<double>, 3>& shifts,
                              const GroupMasks& masks_s, const Matrix& w) {
  if (h_s.cols != w.cols) throw ShapeError("apply_transform: width mismatch");
  Matrix out = h_s;
  for (Group g : kGroups) {
    const auto& phi = shifts[static_cast<std::size_t>(g)];
    if (phi.size() != w.rows) throw ShapeError("apply_transform: shift length does not match k");
    std::vector<double> corr(w.cols, 0.0);
    for (std::size_t r = 0; r < w.rows; ++r)
      for (std::size_t j = 0; j < w.cols; ++j) corr[j] += w(r, j) * phi[r];
    const auto& m = masks_s.of(g);
    for (std::size_t p = 0; p < out.rows; ++p)
      if (m[p])
        for (std::size_t j = 0; j < w.cols; ++j) out(p, j) += corr[j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batched, differentiable form used inside the encoder hook.

// Constant pooling/scatter operators for a batch of paired instances.
struct ShiftOperators {
  Var pool_source;     // (B*3) x (B*T), row (b,g) averages source group g of pair b
  Var pool_target;     // (B*3) x (B*T)
  Var scatter_source;  // (B*T) x (B*3), routes the correction of (b,g) to its source positions
};

inline ShiftOperators make_shift_operators(const std::vector<GroupMasks>& masks_s, const std::vector<GroupMasks>& masks_t,
                                           std::size_t seq_len) {
  if (masks_s.size() != masks_t.size()) throw ShapeError("shift operators: pair count mismatch");
  const std::size_t b = masks_s.size();
  Matrix ps(b * 3, b * seq_len), pt(b * 3, b * seq_len), sc(b * seq_len, b * 3);
  for (std::size_t i = 0; i < b; ++i)
    for (Group g : kGroups) {
      const std::size_t row = i * 3 + static_cast<std::size_t>(g);
      const auto& ms = masks_s[i].of(g);
      const auto& mt = masks_t[i].of(g);
      if (ms.size() != seq_len || mt.size() != seq_len) throw ShapeError("shift operators: mask length mismatch");
      const std::size_t ns = masks_s[i].count(g), nt = masks_t[i].count(g);
      for (std::size_t p = 0; p < seq_len; ++p)
        if (ms[p]) sc(i * seq_len + p, row) = 1.0;
      if (ns == 0 || nt == 0) continue;
      for (std::size_t p = 0; p < seq_len; ++p) {
        if (ms[p]) ps(row, i * seq_len + p) = 1.0 / static_cast<double>(ns);
        if (mt[p]) pt(row, i * seq_len + p) = 1.0 / static_cast<double>(nt);
      }
    }
  return {Var::constant(std::move(ps)), Var::constant(std::move(pt)), Var::constant(std::move(sc))};
}

// Returns (shifted source states, phi) for one layer; phi is (B*3) x k.
inline std::pair<Var, Var> shift_source_states(const Var& w, const Var& h_s, const Var& h_t, const ShiftOperators& ops) {
  Var pooled_diff = sub(matmul(ops.pool_target, h_t), matmul(ops.pool_source, h_s));
  Var phi = matmul_nt(pooled_diff, w);
  Var corr = matmul(phi, w);
  return {add(h_s, matmul(ops.scatter_source, corr)), phi};
}

// Encoder hook that injects target style from the paired target hidden states.
// `target_hidden` are the plain-forward states H_t^(0..L) of the paired batch.
// If `phi_log` is set, phi per layer is recorded there.
inline LayerHook make_shift_hook(const ShiftProjection& proj, std::vector<Var> target_hidden, ShiftOperators ops,
                                 std::vector<Matrix>* phi_log = nullptr) {
  Var w = proj.w.var();
  return [w, target_hidden = std::move(target_hidden), ops = std::move(ops), phi_log](std::size_t layer,
                                                                                      const Var& h) {
    if (layer >= target_hidden.size()) throw ShapeError("shift hook: no target states for layer");
    auto [shifted, phi] = shift_source_states(w, h, target_hidden[layer], ops);
    if (phi_log) phi_log->push_back(phi.value());
    return shifted;
  };
}

}  // namespace domaininv
