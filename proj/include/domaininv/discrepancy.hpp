#pragma once

// Sliced Wasserstein discrepancy between two batches of distributions, and
// the exact 1-D Wasserstein-1 distance used as a reference.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "json.hpp"

#include "domaininv/rng.hpp"
#include "domaininv/tensor.hpp"

namespace domaininv {

struct SWDConfig {
  std::size_t num_projections = 128;
  std::uint64_t seed = 0;
  // Compare post-softmax distributions (default) or pre-softmax logits.
  bool on_logits = false;

  void validate() const {
    if (num_projections == 0) throw std::invalid_argument("swd config: num_projections must be >= 1");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SWDConfig, num_projections, seed, on_logits)

// W1 between two distributions on unit-spaced ordered positions:
// sum_j |CDF_p(j) - CDF_q(j)|.
inline double wasserstein1d_exact(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw ShapeError("wasserstein1d_exact: length mismatch");
  double cp = 0.0, cq = 0.0, total = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    cp += p[j];
    cq += q[j];
    total += std::abs(cp - cq);
  }
  return total;
}

// R unit directions in R^V drawn from (seed, step).
inline Matrix sample_directions(std::size_t dim, std::size_t count, std::uint64_t seed, std::uint64_t step = 0) {
  Rng rng = make_rng(seed, streams::kSwd, step);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix dirs(count, dim);
  for (std::size_t r = 0; r < count; ++r) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        dirs(r, j) = normal(rng);
        norm += dirs(r, j) * dirs(r, j);
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < dim; ++j) dirs(r, j) /= norm;
  }
  return dirs;
}

namespace detail {
inline std::vector<std::size_t> argsort_column(const Matrix& m, std::size_t col) {
  std::vector<std::size_t> idx(m.rows);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return m(a, col) < m(b, col); });
  return idx;
}
}  // namespace detail

// Project both B x V batches onto each direction, sort the B projections,
// and average the squared differences of the sorted lists over B and R.
// Differentiable in P and Q; the sort order is treated as fixed.
inline Var swd(const Var& p, const Var& q, const Matrix& directions) {
  if (!p.value().same_shape(q.value())) throw ShapeError("swd: batch shapes differ");
  if (directions.cols != p.cols()) throw ShapeError("swd: direction width does not match distribution length");
  const std::size_t batch = p.rows(), count = directions.rows;
  Matrix proj_p(batch, count), proj_q(batch, count);
  gemm_acc(p.value(), false, directions, true, proj_p);
  gemm_acc(q.value(), false, directions, true, proj_q);
  // diff(i, r): sorted_p[i] - sorted_q[i] under projection r, scattered back to source rows.
  Matrix dp(batch, count), dq(batch, count);
  double total = 0.0;
  for (std::size_t r = 0; r < count; ++r) {
    const auto ip = detail::argsort_column(proj_p, r);
    const auto iq = detail::argsort_column(proj_q, r);
    for (std::size_t i = 0; i < batch; ++i) {
      const double diff = proj_p(ip[i], r) - proj_q(iq[i], r);
      total += diff * diff;
      dp(ip[i], r) = diff;
      dq(iq[i], r) = -diff;
    }
  }
  const double norm = 1.0 / static_cast<double>(batch * count);
  return detail::make_result(Matrix(1, 1, total * norm), {p, q},
                             [dp = std::move(dp), dq = std::move(dq), directions, norm](Node& self) {
                               const double g = 2.0 * norm * self.grad.data[0];
                               Node& np = detail::parent(self, 0);
                               Node& nq = detail::parent(self, 1);
                               if (np.requires_grad) gemm_acc(dp, false, directions, false, np.grad, g);
                               if (nq.requires_grad) gemm_acc(dq, false, directions, false, nq.grad, g);
                             });
}

inline Var swd(const Var& p, const Var& q, const SWDConfig& cfg, std::uint64_t step = 0) {
  cfg.validate();
  return swd(p, q, sample_directions(p.cols(), cfg.num_projections, cfg.seed, step));
}

inline double swd(const Matrix& p, const Matrix& q, const SWDConfig& cfg, std::uint64_t step = 0) {
  return swd(Var::constant(p), Var::constant(q), cfg, step).scalar();
}

}  // namespace domaininv
