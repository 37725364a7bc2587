#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace ilr {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  return os.str();
}

inline int64_t checked_size(const Shape& s) {
  if (s.empty()) throw std::invalid_argument("tensor shape must have at least one extent");
  int64_t n = 1;
  for (int64_t e : s) {
    if (e <= 0) throw std::invalid_argument("tensor extent must be positive, got shape " + shape_str(s));
    n *= e;
  }
  return n;
}

// Number of threads the dense kernels may use. Read once from ILR_THREADS.
inline int kernel_threads() {
  static const int n = [] {
    const char* env = std::getenv("ILR_THREADS");
    int v = env ? std::atoi(env) : 1;
    return v < 1 ? 1 : v;
  }();
  return n;
}

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // empty until backward touches this node
  bool requires_grad = false;
  std::string name;  // set on leaves, for diagnostics

  int64_t size() const { return static_cast<int64_t>(values.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), S(0));
  }
};

// Shared handle to a value node. Copies alias the same storage; parameters
// stay alive across graphs while intermediate nodes die with their graph.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<S>>();
    int64_t count = checked_size(shape);
    n->shape = std::move(shape);
    n->values.assign(static_cast<size_t>(count), S(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<S> values, bool requires_grad = false) {
    int64_t count = checked_size(shape);
    if (count != static_cast<int64_t>(values.size()))
      throw std::invalid_argument("tensor value count " + std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t size() const { return node_->size(); }
  int64_t rows() const { return rank() == 1 ? 1 : node_->shape[rank() - 2]; }
  int64_t cols() const { return node_->shape[rank() - 1]; }

  std::vector<S>& values() { return node_->values; }
  const std::vector<S>& values() const { return node_->values; }
  S value() const {
    if (size() != 1) throw std::invalid_argument("value() requires a scalar tensor");
    return node_->values[0];
  }
  const std::vector<S>& grad() const {
    if (node_->grad.empty())
      throw std::runtime_error("gradient not populated for tensor '" + node_->name + "'");
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }

  void zero_grad() { node_->grad.assign(node_->values.size(), S(0)); }
  void set_name(std::string name) { node_->name = std::move(name); }
  const std::string& name() const { return node_->name; }

  // Deep copy with gradient tracking severed; used by the stop-gradient
  // oracles to freeze one recurrence application.
  Tensor detach() const {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = node_->shape;
    n->values = node_->values;
    n->requires_grad = false;
    return Tensor(std::move(n));
  }

  Tensor clone(bool requires_grad) const {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = node_->shape;
    n->values = node_->values;
    n->requires_grad = requires_grad;
    n->name = node_->name;
    return Tensor(std::move(n));
  }

  TensorNode<S>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<S>>& handle() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<S>> n) : node_(std::move(n)) {}
  std::shared_ptr<TensorNode<S>> node_;
};

namespace detail {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Map = Eigen::Map<EMat<S>>;
template <typename S>
using CMap = Eigen::Map<const EMat<S>>;

// C (+)= op(A) * op(B), partitioned over C's rows when ILR_THREADS > 1.
// The partition is fixed for a given thread count, so results are
// bit-deterministic for a fixed ILR_THREADS.
template <typename S, typename AExpr, typename BExpr>
void gemm_rows(S* c, int64_t m, int64_t n, const AExpr& a, const BExpr& b, bool accumulate) {
  Map<S> C(c, m, n);
  const int threads = kernel_threads();
  if (threads <= 1 || m < 4 * threads) {
    if (accumulate)
      C.noalias() += a * b;
    else
      C.noalias() = a * b;
    return;
  }
  const int64_t chunk = (m + threads - 1) / threads;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    const int64_t r0 = t * chunk;
    if (r0 >= m) break;
    const int64_t len = std::min(chunk, m - r0);
    pool.emplace_back([&, r0, len] {
      if (accumulate)
        C.middleRows(r0, len).noalias() += a.middleRows(r0, len) * b;
      else
        C.middleRows(r0, len).noalias() = a.middleRows(r0, len) * b;
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

// Dynamic tape: forward executes eagerly and records one backward closure per
// differentiable op. Reverse replay of the execution order is a reverse
// topological order, and visits each recorded op exactly once.
template <typename S>
class Graph {
 public:
  using Mask = std::shared_ptr<const std::vector<S>>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  size_t num_recorded_ops() const { return ops_.size(); }

  Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    require_rank(a, 2, "matmul lhs");
    require_rank(b, 2, "matmul rhs");
    const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
      throw std::invalid_argument("matmul: inner extents mismatch " + shape_str(a.shape()) +
                                  " vs " + shape_str(b.shape()));
    Tensor<S> out = make_output({m, n}, {a, b});
    detail::CMap<S> A(a.values().data(), m, k), B(b.values().data(), k, n);
    detail::gemm_rows(out.values().data(), m, n, A, B, false);
    if (out.requires_grad()) {
      record("matmul", [a, b, out, m, k, n] {
        auto* on = out.node();
        if (on->grad.empty()) return;
        detail::CMap<S> G(on->grad.data(), m, n);
        detail::CMap<S> A(a.values().data(), m, k), B(b.values().data(), k, n);
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          detail::gemm_rows(a.node()->grad.data(), m, k, G, B.transpose(), true);
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          detail::gemm_rows(b.node()->grad.data(), k, n, A.transpose(), G, true);
        }
      });
    }
    return out;
  }

  Tensor<S> transpose(const Tensor<S>& a) {
    require_rank(a, 2, "transpose");
    const int64_t m = a.shape()[0], n = a.shape()[1];
    Tensor<S> out = make_output({n, m}, {a});
    detail::CMap<S> A(a.values().data(), m, n);
    detail::Map<S>(out.values().data(), n, m) = A.transpose();
    if (out.requires_grad()) {
      record("transpose", [a, out, m, n] {
        auto* on = out.node();
        if (on->grad.empty() || !a.requires_grad()) return;
        a.node()->ensure_grad();
        detail::CMap<S> G(on->grad.data(), n, m);
        detail::Map<S>(a.node()->grad.data(), m, n) += G.transpose();
      });
    }
    return out;
  }

  // add/mul support equal shapes, plus a rank-1 rhs broadcast over the rows
  // of a rank-2 lhs.
  Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) { return binary_pointwise(a, b, true); }
  Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) { return binary_pointwise(a, b, false); }

  Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out = make_output(a.shape(), {a});
    const auto& av = a.values();
    auto& ov = out.values();
    for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * c;
    if (out.requires_grad()) {
      record("scale", [a, out, c] {
        auto* on = out.node();
        if (on->grad.empty() || !a.requires_grad()) return;
        a.node()->ensure_grad();
        auto& ag = a.node()->grad;
        for (size_t i = 0; i < ag.size(); ++i) ag[i] += on->grad[i] * c;
      });
    }
    return out;
  }

  Tensor<S> neg(const Tensor<S>& a) { return scale(a, S(-1)); }

  Tensor<S> silu(const Tensor<S>& a) {
    Tensor<S> out = make_output(a.shape(), {a});
    const auto& av = a.values();
    auto& ov = out.values();
    for (size_t i = 0; i < av.size(); ++i) {
      const S sg = S(1) / (S(1) + std::exp(-av[i]));
      ov[i] = av[i] * sg;
    }
    if (out.requires_grad()) {
      record("silu", [a, out] {
        auto* on = out.node();
        if (on->grad.empty() || !a.requires_grad()) return;
        a.node()->ensure_grad();
        const auto& av = a.values();
        auto& ag = a.node()->grad;
        for (size_t i = 0; i < av.size(); ++i) {
          const S sg = S(1) / (S(1) + std::exp(-av[i]));
          ag[i] += on->grad[i] * (sg * (S(1) + av[i] * (S(1) - sg)));
        }
      });
    }
    return out;
  }

  Tensor<S> sum(const Tensor<S>& a) {
    Tensor<S> out = make_output({1}, {a});
    const auto& av = a.values();
    S acc = S(0);
    for (S v : av) acc += v;
    out.values()[0] = acc;
    if (out.requires_grad()) {
      record("sum", [a, out] {
        auto* on = out.node();
        if (on->grad.empty() || !a.requires_grad()) return;
        a.node()->ensure_grad();
        const S g = on->grad[0];
        for (auto& v : a.node()->grad) v += g;
      });
    }
    return out;
  }

  Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    if (checked_size(shape) != a.size())
      throw std::invalid_argument("reshape: element count mismatch " + shape_str(a.shape()) +
                                  " -> " + shape_str(shape));
    Tensor<S> out = make_output(std::move(shape), {a});
    out.values() = a.values();
    if (out.requires_grad()) {
      record("reshape", [a, out] {
        auto* on = out.node();
        if (on->grad.empty() || !a.requires_grad()) return;
        a.node()->ensure_grad();
        auto& ag = a.node()->grad;
        for (size_t i = 0; i < ag.size(); ++i) ag[i] += on->grad[i];
      });
    }
    return out;
  }

  Tensor<S> slice_cols(const Tensor<S>& a, int64_t start, int64_t count) {
    require_rank(a, 2, "slice_cols");
    const int64_t m = a.shape()[0], n = a.shape()[1];
    if (start < 0 || count <= 0 || start + count > n)
      throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + "," +
                                  std::to_string(start + count) + ") out of " + std::to_string(n));
    Tensor<S> out = make_output({m, count}, {a});
    detail::CMap<S> A(a.values().data(), m, n);
    detail::Map<S>(out.values().data(), m, count) = A.middleCols(start, count);
    if (out.requires_grad()) {
      record("slice_cols", [a, out, start, count, m, n] {
        auto* on = out.node();
        if (on->grad.empty() || !a.requires_grad()) return;
        a.node()->ensure_grad();
        detail::CMap<S> G(on->grad.data(), m, count);
        detail::Map<S>(a.node()->grad.data(), m, n).middleCols(start, count) += G;
      });
    }
    return out;
  }

  Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const int64_t m = parts[0].shape()[0];
    int64_t total = 0;
    for (const auto& p : parts) {
      require_rank(p, 2, "concat_cols");
      if (p.shape()[0] != m) throw std::invalid_argument("concat_cols: row extents differ");
      total += p.shape()[1];
    }
    Tensor<S> out = make_output({m, total}, parts);
    detail::Map<S> O(out.values().data(), m, total);
    int64_t at = 0;
    for (const auto& p : parts) {
      O.middleCols(at, p.shape()[1]) = detail::CMap<S>(p.values().data(), m, p.shape()[1]);
      at += p.shape()[1];
    }
    if (out.requires_grad()) {
      record("concat_cols", [parts, out, m, total] {
        auto* on = out.node();
        if (on->grad.empty()) return;
        detail::CMap<S> G(on->grad.data(), m, total);
        int64_t at = 0;
        for (const auto& p : parts) {
          const int64_t w = p.shape()[1];
          if (p.requires_grad()) {
            p.node()->ensure_grad();
            detail::Map<S>(p.node()->grad.data(), m, w) += G.middleCols(at, w);
          }
          at += w;
        }
      });
    }
    return out;
  }

  // Row-wise softmax over the last extent. An optional additive mask of the
  // same shape is applied before normalization; -inf entries land at exactly
  // zero. A fully masked row cannot be normalized and is rejected.
  Tensor<S> softmax_rows(const Tensor<S>& a, const Mask& mask = nullptr) {
    require_rank(a, 2, "softmax_rows");
    const int64_t m = a.shape()[0], n = a.shape()[1];
    if (mask && static_cast<int64_t>(mask->size()) != m * n)
      throw std::invalid_argument("softmax_rows: mask size mismatch");
    Tensor<S> out = make_output({m, n}, {a});
    const S* av = a.values().data();
    const S* mv = mask ? mask->data() : nullptr;
    S* ov = out.values().data();
    const S neg_inf = -std::numeric_limits<S>::infinity();
    for (int64_t r = 0; r < m; ++r) {
      S mx = neg_inf;
      for (int64_t c = 0; c < n; ++c) {
        const S v = av[r * n + c] + (mv ? mv[r * n + c] : S(0));
        if (v > mx) mx = v;
      }
      if (mx == neg_inf)
        throw std::invalid_argument("softmax_rows: fully masked row " + std::to_string(r));
      S denom = S(0);
      for (int64_t c = 0; c < n; ++c) {
        const S v = av[r * n + c] + (mv ? mv[r * n + c] : S(0));
        const S e = std::exp(v - mx);
        ov[r * n + c] = e;
        denom += e;
      }
      const S inv = S(1) / denom;
      for (int64_t c = 0; c < n; ++c) ov[r * n + c] *= inv;
    }
    if (out.requires_grad()) {
      record("softmax_rows", [a, out, m, n] {
        auto* on = out.node();
        if (on->grad.empty() || !a.requires_grad()) return;
        a.node()->ensure_grad();
        const S* y = out.values().data();
        const S* g = on->grad.data();
        S* ag = a.node()->grad.data();
        for (int64_t r = 0; r < m; ++r) {
          S dot = S(0);
          for (int64_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
          for (int64_t c = 0; c < n; ++c)
            ag[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
        }
      });
    }
    return out;
  }

  Tensor<S> rms_norm(const Tensor<S>& x, const Tensor<S>& weight, S eps) {
    if (eps <= S(0)) throw std::invalid_argument("rms_norm: eps must be positive");
    if (weight.rank() != 1) throw std::invalid_argument("rms_norm: weight must be rank 1");
    const int64_t d = x.cols();
    if (weight.size() != d)
      throw std::invalid_argument("rms_norm: weight extent " + std::to_string(weight.size()) +
                                  " != feature extent " + std::to_string(d));
    const int64_t rows = x.size() / d;
    Tensor<S> out = make_output(x.shape(), {x, weight});
    auto inv_rms = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
    const S* xv = x.values().data();
    const S* wv = weight.values().data();
    S* ov = out.values().data();
    for (int64_t r = 0; r < rows; ++r) {
      S ms = S(0);
      for (int64_t c = 0; c < d; ++c) ms += xv[r * d + c] * xv[r * d + c];
      ms /= S(d);
      const S inv = S(1) / std::sqrt(ms + eps);
      (*inv_rms)[static_cast<size_t>(r)] = inv;
      for (int64_t c = 0; c < d; ++c) ov[r * d + c] = xv[r * d + c] * inv * wv[c];
    }
    if (out.requires_grad()) {
      record("rms_norm", [x, weight, out, inv_rms, rows, d] {
        auto* on = out.node();
        if (on->grad.empty()) return;
        const S* xv = x.values().data();
        const S* wv = weight.values().data();
        const S* g = on->grad.data();
        S* xg = nullptr;
        S* wg = nullptr;
        if (x.requires_grad()) {
          x.node()->ensure_grad();
          xg = x.node()->grad.data();
        }
        if (weight.requires_grad()) {
          weight.node()->ensure_grad();
          wg = weight.node()->grad.data();
        }
        for (int64_t r = 0; r < rows; ++r) {
          const S inv = (*inv_rms)[static_cast<size_t>(r)];
          if (wg)
            for (int64_t c = 0; c < d; ++c) wg[c] += g[r * d + c] * xv[r * d + c] * inv;
          if (xg) {
            S dot = S(0);
            for (int64_t c = 0; c < d; ++c) dot += g[r * d + c] * wv[c] * xv[r * d + c];
            const S corr = dot * inv * inv * inv / S(d);
            for (int64_t c = 0; c < d; ++c)
              xg[r * d + c] += g[r * d + c] * wv[c] * inv - xv[r * d + c] * corr;
          }
        }
      });
    }
    return out;
  }

  Tensor<S> embedding_gather(const Tensor<S>& table, std::span<const int32_t> ids) {
    require_rank(table, 2, "embedding_gather table");
    if (ids.empty()) throw std::invalid_argument("embedding_gather: empty id sequence");
    const int64_t v = table.shape()[0], d = table.shape()[1];
    for (int32_t id : ids)
      if (id < 0 || id >= v)
        throw std::invalid_argument("embedding_gather: id " + std::to_string(id) +
                                    " out of range [0," + std::to_string(v) + ")");
    const int64_t t = static_cast<int64_t>(ids.size());
    Tensor<S> out = make_output({t, d}, {table});
    const S* tv = table.values().data();
    S* ov = out.values().data();
    for (int64_t r = 0; r < t; ++r)
      std::copy_n(tv + static_cast<int64_t>(ids[r]) * d, d, ov + r * d);
    if (out.requires_grad()) {
      std::vector<int32_t> ids_copy(ids.begin(), ids.end());
      record("embedding_gather", [table, out, ids_copy, d] {
        auto* on = out.node();
        if (on->grad.empty() || !table.requires_grad()) return;
        table.node()->ensure_grad();
        S* tg = table.node()->grad.data();
        const S* g = on->grad.data();
        for (size_t r = 0; r < ids_copy.size(); ++r) {
          S* dst = tg + static_cast<int64_t>(ids_copy[r]) * d;
          const S* src = g + static_cast<int64_t>(r) * d;
          for (int64_t c = 0; c < d; ++c) dst[c] += src[c];
        }
      });
    }
    return out;
  }

  // Mean over rows of -log softmax(logits)[t, target_t], log-sum-exp
  // stabilized.
  Tensor<S> cross_entropy_mean(const Tensor<S>& logits, std::span<const int32_t> targets) {
    require_rank(logits, 2, "cross_entropy_mean logits");
    const int64_t t = logits.shape()[0], v = logits.shape()[1];
    if (static_cast<int64_t>(targets.size()) != t)
      throw std::invalid_argument("cross_entropy_mean: " + std::to_string(targets.size()) +
                                  " targets for " + std::to_string(t) + " rows");
    for (int32_t y : targets)
      if (y < 0 || y >= v)
        throw std::invalid_argument("cross_entropy_mean: target " + std::to_string(y) +
                                    " out of range [0," + std::to_string(v) + ")");
    Tensor<S> out = make_output({1}, {logits});
    auto lse = std::make_shared<std::vector<S>>(static_cast<size_t>(t));
    const S* lv = logits.values().data();
    S loss = S(0);
    for (int64_t r = 0; r < t; ++r) {
      S mx = lv[r * v];
      for (int64_t c = 1; c < v; ++c) mx = std::max(mx, lv[r * v + c]);
      S denom = S(0);
      for (int64_t c = 0; c < v; ++c) denom += std::exp(lv[r * v + c] - mx);
      const S l = mx + std::log(denom);
      (*lse)[static_cast<size_t>(r)] = l;
      loss += l - lv[r * v + targets[static_cast<size_t>(r)]];
    }
    out.values()[0] = loss / S(t);
    if (out.requires_grad()) {
      std::vector<int32_t> tg_copy(targets.begin(), targets.end());
      record("cross_entropy_mean", [logits, out, lse, tg_copy, t, v] {
        auto* on = out.node();
        if (on->grad.empty() || !logits.requires_grad()) return;
        logits.node()->ensure_grad();
        const S g = on->grad[0] / S(t);
        const S* lv = logits.values().data();
        S* lg = logits.node()->grad.data();
        for (int64_t r = 0; r < t; ++r) {
          const S l = (*lse)[static_cast<size_t>(r)];
          for (int64_t c = 0; c < v; ++c) {
            S p = std::exp(lv[r * v + c] - l);
            if (c == tg_copy[static_cast<size_t>(r)]) p -= S(1);
            lg[r * v + c] += g * p;
          }
        }
      });
    }
    return out;
  }

  // Rotary embedding over [T x (H*hd)] (or [T x H x hd]) with contiguous head
  // blocks; pair (2i, 2i+1) of each head rotates by angle pos_t *
  // theta^(-2i/hd). The backward pass is the inverse rotation.
  Tensor<S> rope(const Tensor<S>& x, std::span<const int64_t> positions, int64_t n_heads,
                 double theta) {
    if (x.rank() != 2 && x.rank() != 3)
      throw std::invalid_argument("rope: input must be rank 2 or 3");
    const int64_t t = x.shape()[0];
    const int64_t width = x.size() / t;
    if (x.rank() == 3 && x.shape()[1] != n_heads)
      throw std::invalid_argument("rope: head extent mismatch");
    if (n_heads <= 0 || width % n_heads != 0)
      throw std::invalid_argument("rope: width not divisible by head count");
    const int64_t hd = width / n_heads;
    if (hd % 2 != 0) throw std::invalid_argument("rope: head dimension must be even");
    if (static_cast<int64_t>(positions.size()) != t)
      throw std::invalid_argument("rope: positions length " + std::to_string(positions.size()) +
                                  " != rows " + std::to_string(t));
    if (theta <= 1.0) throw std::invalid_argument("rope: theta must exceed 1");
    Tensor<S> out = make_output(x.shape(), {x});
    std::vector<int64_t> pos(positions.begin(), positions.end());
    apply_rope_kernel(x.values().data(), out.values().data(), pos, t, n_heads, hd, theta, false);
    if (out.requires_grad()) {
      record("rope", [x, out, pos, t, n_heads, hd, theta] {
        auto* on = out.node();
        if (on->grad.empty() || !x.requires_grad()) return;
        x.node()->ensure_grad();
        // inverse rotation of the output gradient, accumulated
        apply_rope_kernel(on->grad.data(), x.node()->grad.data(), pos, t, n_heads, hd, theta,
                          true);
      });
    }
    return out;
  }

  // Populates gradients for every requires_grad tensor reachable from loss.
  // Repeated use of a tensor accumulates additively, which is exactly the
  // per-recurrence parameter sum of weight-shared layers.
  void backward(const Tensor<S>& loss) {
    if (loss.size() != 1)
      throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                  shape_str(loss.shape()));
    run_backward(loss, {S(1)});
  }

  // Vector-Jacobian product entry point: seeds d(out) and sweeps the tape.
  void backward_from(const Tensor<S>& out, std::span<const S> seed) {
    if (static_cast<int64_t>(seed.size()) != out.size())
      throw std::invalid_argument("backward_from: seed size mismatch");
    run_backward(out, std::vector<S>(seed.begin(), seed.end()));
  }

 private:
  struct OpRecord {
    const char* name;
    std::function<void()> backward;
  };

  void run_backward(const Tensor<S>& root, std::vector<S> seed) {
    if (backward_done_) throw std::runtime_error("backward already run on this graph");
    backward_done_ = true;
    root.node()->ensure_grad();
    auto& g = root.node()->grad;
    for (size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward();
  }

  static void require_rank(const Tensor<S>& x, int64_t r, const char* what) {
    if (x.rank() != r)
      throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(r) +
                                  ", got shape " + shape_str(x.shape()));
  }

  Tensor<S> make_output(Shape shape, const std::vector<Tensor<S>>& inputs) {
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    return Tensor<S>::zeros(std::move(shape), rg);
  }

  Tensor<S> binary_pointwise(const Tensor<S>& a, const Tensor<S>& b, bool is_add) {
    const bool same = a.shape() == b.shape();
    const bool rowcast = !same && a.rank() == 2 && b.rank() == 1 && b.size() == a.shape()[1];
    if (!same && !rowcast)
      throw std::invalid_argument(std::string(is_add ? "add" : "mul") +
                                  ": incompatible shapes " + shape_str(a.shape()) + " and " +
                                  shape_str(b.shape()));
    Tensor<S> out = make_output(a.shape(), {a, b});
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    const int64_t n = rowcast ? b.size() : 0;
    for (size_t i = 0; i < av.size(); ++i) {
      const S bi = same ? bv[i] : bv[i % static_cast<size_t>(n)];
      ov[i] = is_add ? av[i] + bi : av[i] * bi;
    }
    if (out.requires_grad()) {
      record(is_add ? "add" : "mul", [a, b, out, same, is_add] {
        auto* on = out.node();
        if (on->grad.empty()) return;
        const auto& g = on->grad;
        const size_t bn = b.values().size();
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          auto& ag = a.node()->grad;
          if (is_add) {
            for (size_t i = 0; i < g.size(); ++i) ag[i] += g[i];
          } else {
            const auto& bv = b.values();
            for (size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * (same ? bv[i] : bv[i % bn]);
          }
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          auto& bg = b.node()->grad;
          const auto& av = a.values();
          if (same) {
            for (size_t i = 0; i < g.size(); ++i) bg[i] += is_add ? g[i] : g[i] * av[i];
          } else {
            for (size_t i = 0; i < g.size(); ++i)
              bg[i % bn] += is_add ? g[i] : g[i] * av[i];
          }
        }
      });
    }
    return out;
  }

  static void apply_rope_kernel(const S* src, S* dst, const std::vector<int64_t>& pos, int64_t t,
                                int64_t n_heads, int64_t hd, double theta, bool inverse_accum) {
    const int64_t half = hd / 2;
    std::vector<double> freq(static_cast<size_t>(half));
    for (int64_t i = 0; i < half; ++i)
      freq[static_cast<size_t>(i)] = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
    const int64_t width = n_heads * hd;
    for (int64_t r = 0; r < t; ++r) {
      const double m = static_cast<double>(pos[static_cast<size_t>(r)]);
      for (int64_t i = 0; i < half; ++i) {
        const double angle = m * freq[static_cast<size_t>(i)];
        const S c = static_cast<S>(std::cos(angle));
        const S s = static_cast<S>(std::sin(angle));
        for (int64_t h = 0; h < n_heads; ++h) {
          const int64_t base = r * width + h * hd + 2 * i;
          const S x0 = src[base], x1 = src[base + 1];
          if (!inverse_accum) {
            dst[base] = x0 * c - x1 * s;
            dst[base + 1] = x0 * s + x1 * c;
          } else {
            dst[base] += x0 * c + x1 * s;
            dst[base + 1] += -x0 * s + x1 * c;
          }
        }
      }
    }
  }

  void record(const char* name, std::function<void()> fn) {
    ops_.push_back(OpRecord{name, std::move(fn)});
  }

  std::vector<OpRecord> ops_;
  bool backward_done_ = false;
};

// Central finite differences (f(x+eps e_i) - f(x-eps e_i)) / 2eps per element
// of x. The verification oracle for every gradient claim; independent of the
// tape by construction (it only re-evaluates f).
template <typename S>
std::vector<S> finite_diff_grad(const std::function<S(const Tensor<S>&)>& f, Tensor<S>& x,
                                S step) {
  if (step <= S(0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  std::vector<S> out(x.values().size());
  auto& v = x.values();
  for (size_t i = 0; i < v.size(); ++i) {
    const S saved = v[i];
    v[i] = saved + step;
    const S up = f(x);
    v[i] = saved - step;
    const S down = f(x);
    v[i] = saved;
    out[i] = (up - down) / (S(2) * step);
  }
  return out;
}

}  // namespace ilr
