#pragma once

// Dense row-major matrices and a small reverse-mode autograd tape.
//
// Every op records a closure that propagates the output gradient to its
// parents. Leaves carry `requires_grad`; ops whose parents are all constant
// produce constant nodes and record nothing.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

namespace domaininv {

class ShapeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw ShapeError("Matrix: value count does not match shape");
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double* row(std::size_t r) { return data.data() + r * cols; }
  const double* row(std::size_t r) const { return data.data() + r * cols; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  bool operator==(const Matrix& o) const { return rows == o.rows && cols == o.cols && data == o.data; }
};

inline std::string shape_str(const Matrix& m) {
  return "(" + std::to_string(m.rows) + "x" + std::to_string(m.cols) + ")";
}

inline bool all_finite(const Matrix& m) {
  return std::all_of(m.data.begin(), m.data.end(), [](double v) { return std::isfinite(v); });
}

// C += alpha * op(A) * op(B), op = optional transpose.
inline void gemm_acc(const Matrix& a, bool ta, const Matrix& b, bool tb, Matrix& c, double alpha = 1.0) {
  const std::size_t m = ta ? a.cols : a.rows;
  const std::size_t k = ta ? a.rows : a.cols;
  const std::size_t kb = tb ? b.cols : b.rows;
  const std::size_t n = tb ? b.rows : b.cols;
  if (k != kb || c.rows != m || c.cols != n)
    throw ShapeError("gemm: incompatible shapes " + shape_str(a) + (ta ? "^T" : "") + " * " + shape_str(b) +
                     (tb ? "^T" : "") + " -> " + shape_str(c));
  if (m == 0 || n == 0 || k == 0) return;
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto idx = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  Eigen::Map<const RowMajor> ea(a.data.data(), idx(a.rows), idx(a.cols));
  Eigen::Map<const RowMajor> eb(b.data.data(), idx(b.rows), idx(b.cols));
  Eigen::Map<RowMajor> ec(c.data.data(), idx(c.rows), idx(c.cols));
  if (!ta && !tb)
    ec.noalias() += alpha * ea * eb;
  else if (!ta && tb)
    ec.noalias() += alpha * ea * eb.transpose();
  else if (ta && !tb)
    ec.noalias() += alpha * ea.transpose() * eb;
  else
    ec.noalias() += alpha * ea.transpose() * eb.transpose();
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows, b.cols);
  gemm_acc(a, false, b, false, c);
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

// FNV-1a over the raw bytes; used for freeze-contract checksums and fixtures.
inline std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t checksum(const Matrix& m, std::uint64_t h = 1469598103934665603ULL) {
  h = fnv1a(&m.rows, sizeof(m.rows), h);
  h = fnv1a(&m.cols, sizeof(m.cols), h);
  return fnv1a(m.data.data(), m.data.size() * sizeof(double), h);
}

// ---------------------------------------------------------------------------
// Autograd graph

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (!grad.same_shape(value)) grad = Matrix(value.rows, value.cols);
  }
};

class Var {
public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Var constant(Matrix m) {
    auto n = std::make_shared<Node>();
    n->value = std::move(m);
    return Var(std::move(n));
  }
  static Var leaf(Matrix m, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(m);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  std::size_t rows() const { return node_->value.rows; }
  std::size_t cols() const { return node_->value.cols; }
  double scalar() const { return node_->value.data.at(0); }
  Node* get() const { return node_.get(); }
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

private:
  std::shared_ptr<Node> node_;
};

namespace detail {

// Builds a result node; the closure is kept only when some parent needs gradients.
inline Var make_result(Matrix value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents)
    if (p.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(fn);
  }
  return Var(std::move(n));
}

inline Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

}  // namespace detail

// Runs reverse-mode accumulation from a scalar output. Gradients of leaves accumulate.
inline void backward(const Var& loss) {
  if (loss.rows() * loss.cols() != 1) throw ShapeError("backward: loss must be a scalar");
  if (!loss.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->ensure_grad();
  loss.get()->grad.data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
  // Release interior gradients so the graph can be collected promptly.
  for (Node* n : order)
    if (!n->parents.empty()) n->grad = Matrix();
}

// ---------------------------------------------------------------------------
// Ops

inline Var matmul(const Var& a, const Var& b) {
  Matrix out(a.rows(), b.cols());
  gemm_acc(a.value(), false, b.value(), false, out);
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    if (pa.requires_grad) gemm_acc(self.grad, false, pb.value, true, pa.grad);
    if (pb.requires_grad) gemm_acc(pa.value, true, self.grad, false, pb.grad);
  });
}

// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  Matrix out(a.rows(), b.rows());
  gemm_acc(a.value(), false, b.value(), true, out);
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    if (pa.requires_grad) gemm_acc(self.grad, false, pb.value, false, pa.grad);
    if (pb.requires_grad) gemm_acc(self.grad, true, pa.value, false, pb.grad);
  });
}

inline Var add(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value())) throw ShapeError("add: shape mismatch");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& p = detail::parent(self, k);
      if (!p.requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad.data[i] += self.grad.data[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value())) throw ShapeError("sub: shape mismatch");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad.data[i] += self.grad.data[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad.data[i] -= self.grad.data[i];
  });
}

inline Var scale(const Var& a, double s) {
  Matrix out = a.value();
  for (auto& v : out.data) v *= s;
  return detail::make_result(std::move(out), {a}, [s](Node& self) {
    Node& p = detail::parent(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad.data[i] += s * self.grad.data[i];
  });
}

// Adds a 1 x c row vector to every row of a.
inline Var add_row(const Var& a, const Var& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) throw ShapeError("add_row: bias must be 1 x cols");
  Matrix out = a.value();
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += bias.value().data[c];
  return detail::make_result(std::move(out), {a, bias}, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad.data[i] += self.grad.data[i];
    if (pb.requires_grad)
      for (std::size_t r = 0; r < self.grad.rows; ++r)
        for (std::size_t c = 0; c < self.grad.cols; ++c) pb.grad.data[c] += self.grad(r, c);
  });
}

// Tanh approximation of GELU.
inline Var gelu(const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  Matrix out = a.value();
  for (auto& x : out.data) x = 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
  return detail::make_result(std::move(out), {a}, [](Node& self) {
    Node& p = detail::parent(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = p.value.data[i];
      const double u = k * (x + 0.044715 * x * x * x);
      const double t = std::tanh(u);
      const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
      const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      p.grad.data[i] += d * self.grad.data[i];
    }
  });
}

// Row-wise layer normalization with learned gain and offset (both 1 x c).
inline Var layer_norm(const Var& a, const Var& gain, const Var& offset, double eps = 1e-5) {
  const std::size_t n = a.rows(), c = a.cols();
  if (gain.cols() != c || offset.cols() != c) throw ShapeError("layer_norm: parameter width mismatch");
  Matrix xhat(n, c), out(n, c);
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = a.value().row(r);
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += x[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat(r, j) = (x[j] - mean) * inv_std[r];
      out(r, j) = xhat(r, j) * gain.value().data[j] + offset.value().data[j];
    }
  }
  return detail::make_result(std::move(out), {a, gain, offset},
                             [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                               Node& px = detail::parent(self, 0);
                               Node& pg = detail::parent(self, 1);
                               Node& pb = detail::parent(self, 2);
                               const std::size_t n = self.grad.rows, c = self.grad.cols;
                               for (std::size_t r = 0; r < n; ++r) {
                                 const double* dy = self.grad.row(r);
                                 if (pg.requires_grad)
                                   for (std::size_t j = 0; j < c; ++j) pg.grad.data[j] += dy[j] * xhat(r, j);
                                 if (pb.requires_grad)
                                   for (std::size_t j = 0; j < c; ++j) pb.grad.data[j] += dy[j];
                                 if (!px.requires_grad) continue;
                                 double sum_d = 0.0, sum_dx = 0.0;
                                 for (std::size_t j = 0; j < c; ++j) {
                                   const double d = dy[j] * pg.value.data[j];
                                   sum_d += d;
                                   sum_dx += d * xhat(r, j);
                                 }
                                 const double cn = static_cast<double>(c);
                                 for (std::size_t j = 0; j < c; ++j) {
                                   const double d = dy[j] * pg.value.data[j];
                                   px.grad(r, j) += inv_std[r] * (d - sum_d / cn - xhat(r, j) * sum_dx / cn);
                                 }
                               }
                             });
}

// Gathers rows of `table` by index.
inline Var gather_rows(const Var& table, const std::vector<std::size_t>& ids) {
  Matrix out(ids.size(), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy_n(table.value().row(ids[i]), table.cols(), out.row(i));
  }
  return detail::make_result(std::move(out), {table}, [ids](Node& self) {
    Node& p = detail::parent(self, 0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* g = p.grad.row(ids[i]);
      const double* d = self.grad.row(i);
      for (std::size_t j = 0; j < self.grad.cols; ++j) g[j] += d[j];
    }
  });
}

// Inverted dropout with a caller-supplied keep mask (1/(1-rate) or 0 per entry).
inline Var apply_mask(const Var& a, Matrix mask) {
  if (!mask.same_shape(a.value())) throw ShapeError("apply_mask: shape mismatch");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= mask.data[i];
  return detail::make_result(std::move(out), {a}, [mask = std::move(mask)](Node& self) {
    Node& p = detail::parent(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad.data[i] += mask.data[i] * self.grad.data[i];
  });
}

// Sum of 1 x 1 scalars with weights.
inline Var weighted_sum(const std::vector<Var>& xs, const std::vector<double>& w) {
  if (xs.size() != w.size()) throw ShapeError("weighted_sum: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].rows() * xs[i].cols() != 1) throw ShapeError("weighted_sum: operands must be scalars");
    s += w[i] * xs[i].scalar();
  }
  return detail::make_result(Matrix(1, 1, s), xs, [w](Node& self) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      Node& p = detail::parent(self, i);
      if (p.requires_grad) p.grad.data[0] += w[i] * self.grad.data[0];
    }
  });
}

// Multi-head scaled dot-product attention over a batch of equal-length sequences
// stacked as (batch * seq_len) x d rows. Keys with key_valid == 0 receive no weight.
inline Var multi_head_attention(const Var& q, const Var& k, const Var& v, std::size_t batch, std::size_t seq_len,
                                std::size_t num_heads, const std::vector<std::uint8_t>& key_valid) {
  const std::size_t d = q.cols();
  if (q.rows() != batch * seq_len || !q.value().same_shape(k.value()) || !q.value().same_shape(v.value()))
    throw ShapeError("attention: q/k/v shape mismatch");
  if (key_valid.size() != batch * seq_len) throw ShapeError("attention: key mask size mismatch");
  if (d % num_heads != 0) throw ShapeError("attention: heads must divide width");
  const std::size_t hd = d / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  // probs[b][h] is a seq_len x seq_len block stored contiguously.
  auto probs = std::make_shared<std::vector<double>>(batch * num_heads * seq_len * seq_len, 0.0);
  Matrix out(batch * seq_len, d);
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * seq_len;
    for (std::size_t h = 0; h < num_heads; ++h) {
      double* P = probs->data() + (b * num_heads + h) * seq_len * seq_len;
      const std::size_t off = h * hd;
      for (std::size_t i = 0; i < seq_len; ++i) {
        double* pi = P + i * seq_len;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < seq_len; ++j) {
          if (!key_valid[base + j]) continue;
          double s = 0.0;
          for (std::size_t t = 0; t < hd; ++t) s += Q(base + i, off + t) * K(base + j, off + t);
          pi[j] = s * inv_sqrt;
          mx = std::max(mx, pi[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < seq_len; ++j) {
          if (!key_valid[base + j]) {
            pi[j] = 0.0;
            continue;
          }
          pi[j] = std::exp(pi[j] - mx);
          z += pi[j];
        }
        if (z > 0.0)
          for (std::size_t j = 0; j < seq_len; ++j) pi[j] /= z;
        for (std::size_t j = 0; j < seq_len; ++j) {
          if (pi[j] == 0.0) continue;
          for (std::size_t t = 0; t < hd; ++t) out(base + i, off + t) += pi[j] * V(base + j, off + t);
        }
      }
    }
  }
  return detail::make_result(
      std::move(out), {q, k, v}, [probs, batch, seq_len, num_heads, hd, inv_sqrt](Node& self) {
        Node& pq = detail::parent(self, 0);
        Node& pk = detail::parent(self, 1);
        Node& pv = detail::parent(self, 2);
        const Matrix& Q = pq.value;
        const Matrix& K = pk.value;
        const Matrix& V = pv.value;
        const Matrix& dO = self.grad;
        std::vector<double> dP(seq_len);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t base = b * seq_len;
          for (std::size_t h = 0; h < num_heads; ++h) {
            const double* P = probs->data() + (b * num_heads + h) * seq_len * seq_len;
            const std::size_t off = h * hd;
            for (std::size_t i = 0; i < seq_len; ++i) {
              const double* pi = P + i * seq_len;
              double dot = 0.0;
              for (std::size_t j = 0; j < seq_len; ++j) {
                double s = 0.0;
                if (pi[j] != 0.0)
                  for (std::size_t t = 0; t < hd; ++t) s += dO(base + i, off + t) * V(base + j, off + t);
                dP[j] = s;
                dot += s * pi[j];
              }
              for (std::size_t j = 0; j < seq_len; ++j) {
                if (pi[j] == 0.0) continue;
                if (pv.requires_grad)
                  for (std::size_t t = 0; t < hd; ++t) pv.grad(base + j, off + t) += pi[j] * dO(base + i, off + t);
                const double ds = pi[j] * (dP[j] - dot) * inv_sqrt;
                if (pq.requires_grad)
                  for (std::size_t t = 0; t < hd; ++t) pq.grad(base + i, off + t) += ds * K(base + j, off + t);
                if (pk.requires_grad)
                  for (std::size_t t = 0; t < hd; ++t) pk.grad(base + j, off + t) += ds * Q(base + i, off + t);
              }
            }
          }
        }
      });
}

// Running statistics for batch normalization; owned by the encoder.
struct RunningStats {
  Matrix mean;  // 1 x d
  Matrix var;   // 1 x d
};

// Feature-wise batch normalization over the rows flagged in `row_valid`. Rows
// not flagged pass through normalized with the same statistics but do not
// contribute to them. In training mode the batch statistics are used (and
// optionally folded into `running` with the given momentum); otherwise the
// running statistics are used.
inline Var batch_norm(const Var& a, const Var& gain, const Var& offset, const std::vector<std::uint8_t>& row_valid,
                      RunningStats& running, bool training, bool update_running, double momentum, double eps = 1e-5) {
  const std::size_t n = a.rows(), c = a.cols();
  if (row_valid.size() != n) throw ShapeError("batch_norm: row mask size mismatch");
  if (running.mean.cols != c || running.var.cols != c) throw ShapeError("batch_norm: running stats width mismatch");
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  std::size_t count = 0;
  if (training) {
    for (std::size_t r = 0; r < n; ++r) {
      if (!row_valid[r]) continue;
      ++count;
      for (std::size_t j = 0; j < c; ++j) mean[j] += a.value()(r, j);
    }
    if (count == 0) throw ShapeError("batch_norm: no valid rows in training mode");
    for (auto& m : mean) m /= static_cast<double>(count);
    for (std::size_t r = 0; r < n; ++r) {
      if (!row_valid[r]) continue;
      for (std::size_t j = 0; j < c; ++j) {
        const double dv = a.value()(r, j) - mean[j];
        var[j] += dv * dv;
      }
    }
    for (auto& v : var) v /= static_cast<double>(count);
    if (update_running)
      for (std::size_t j = 0; j < c; ++j) {
        running.mean.data[j] = momentum * running.mean.data[j] + (1.0 - momentum) * mean[j];
        running.var.data[j] = momentum * running.var.data[j] + (1.0 - momentum) * var[j];
      }
  } else {
    mean = running.mean.data;
    var = running.var.data;
  }
  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  Matrix xhat(n, c), out(n, c);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      xhat(r, j) = (a.value()(r, j) - mean[j]) * inv_std[j];
      out(r, j) = xhat(r, j) * gain.value().data[j] + offset.value().data[j];
    }
  return detail::make_result(
      std::move(out), {a, gain, offset},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), row_valid, training, count](Node& self) {
        Node& px = detail::parent(self, 0);
        Node& pg = detail::parent(self, 1);
        Node& pb = detail::parent(self, 2);
        const std::size_t n = self.grad.rows, c = self.grad.cols;
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            if (pg.requires_grad) pg.grad.data[j] += self.grad(r, j) * xhat(r, j);
            if (pb.requires_grad) pb.grad.data[j] += self.grad(r, j);
          }
        if (!px.requires_grad) return;
        if (!training) {
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < c; ++j) px.grad(r, j) += self.grad(r, j) * pg.value.data[j] * inv_std[j];
          return;
        }
        // Statistics depend on valid rows only; every row depends on them.
        const double m = static_cast<double>(count);
        std::vector<double> sum_d(c, 0.0), sum_dx(c, 0.0);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const double d = self.grad(r, j) * pg.value.data[j];
            sum_d[j] += d;
            sum_dx[j] += d * xhat(r, j);
          }
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const double d = self.grad(r, j) * pg.value.data[j];
            double g = d * inv_std[j];
            if (row_valid[r]) g -= inv_std[j] * (sum_d[j] + xhat(r, j) * sum_dx[j]) / m;
            px.grad(r, j) += g;
          }
      });
}

// Reshapes an (batch * seq_len) x 1 logit column into batch x seq_len
// probabilities, softmax-normalized over positions with allowed != 0.
// Disallowed positions get probability exactly 0.
inline Var masked_softmax(const Var& logits, std::size_t batch, std::size_t seq_len,
                          const std::vector<std::uint8_t>& allowed) {
  if (logits.rows() != batch * seq_len || logits.cols() != 1) throw ShapeError("masked_softmax: logits shape");
  if (allowed.size() != batch * seq_len) throw ShapeError("masked_softmax: mask size");
  Matrix out(batch, seq_len);
  for (std::size_t b = 0; b < batch; ++b) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < seq_len; ++j)
      if (allowed[b * seq_len + j]) {
        const double v = logits.value().data[b * seq_len + j];
        if (!std::isfinite(v)) throw NumericError("masked_softmax: non-finite logit in row " + std::to_string(b));
        mx = std::max(mx, v);
        any = true;
      }
    if (!any) throw ShapeError("masked_softmax: empty window in row " + std::to_string(b));
    double z = 0.0;
    for (std::size_t j = 0; j < seq_len; ++j)
      if (allowed[b * seq_len + j]) {
        out(b, j) = std::exp(logits.value().data[b * seq_len + j] - mx);
        z += out(b, j);
      }
    for (std::size_t j = 0; j < seq_len; ++j) out(b, j) /= z;
  }
  Matrix probs = out;
  return detail::make_result(std::move(out), {logits}, [probs = std::move(probs)](Node& self) {
    Node& p = detail::parent(self, 0);
    for (std::size_t b = 0; b < probs.rows; ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < probs.cols; ++j) dot += self.grad(b, j) * probs(b, j);
      for (std::size_t j = 0; j < probs.cols; ++j)
        p.grad.data[b * probs.cols + j] += probs(b, j) * (self.grad(b, j) - dot);
    }
  });
}

// Reshapes an (batch * seq_len) x 1 column into batch x seq_len, zeroing
// positions with allowed == 0.
inline Var masked_rows(const Var& column, std::size_t batch, std::size_t seq_len,
                       const std::vector<std::uint8_t>& allowed) {
  if (column.rows() != batch * seq_len || column.cols() != 1 || allowed.size() != batch * seq_len)
    throw ShapeError("masked_rows: shape mismatch");
  Matrix out(batch, seq_len);
  for (std::size_t i = 0; i < batch * seq_len; ++i) out.data[i] = allowed[i] ? column.value().data[i] : 0.0;
  return detail::make_result(std::move(out), {column}, [allowed](Node& self) {
    Node& p = detail::parent(self, 0);
    for (std::size_t i = 0; i < allowed.size(); ++i)
      if (allowed[i]) p.grad.data[i] += self.grad.data[i];
  });
}

struct NllStats {
  std::size_t clamp_events = 0;
};

// Mean over selected rows of -log(max(probs[b, target[b]], eps)). Rows with
// weight 0 are skipped; the mean is over the selected rows.
inline Var mean_neg_log(const Var& probs, const std::vector<std::size_t>& target, const std::vector<std::uint8_t>& use,
                        NllStats* stats = nullptr, double eps = 1e-12) {
  const std::size_t batch = probs.rows();
  if (target.size() != batch || use.size() != batch) throw ShapeError("mean_neg_log: batch size mismatch");
  std::size_t n = 0;
  double total = 0.0;
  std::vector<std::uint8_t> clamped(batch, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    if (!use[b]) continue;
    if (target[b] >= probs.cols()) throw ShapeError("mean_neg_log: target index out of range");
    ++n;
    double p = probs.value()(b, target[b]);
    if (p < eps) {
      p = eps;
      clamped[b] = 1;
      if (stats) ++stats->clamp_events;
    }
    total -= std::log(p);
  }
  if (n == 0) throw ShapeError("mean_neg_log: no rows selected");
  const double inv_n = 1.0 / static_cast<double>(n);
  return detail::make_result(Matrix(1, 1, total * inv_n), {probs},
                             [target, use, clamped = std::move(clamped), inv_n](Node& self) {
                               Node& p = detail::parent(self, 0);
                               const double g = self.grad.data[0];
                               for (std::size_t b = 0; b < target.size(); ++b) {
                                 if (!use[b] || clamped[b]) continue;
                                 p.grad(b, target[b]) -= g * inv_n / p.value(b, target[b]);
                               }
                             });
}

}  // namespace domaininv
