#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hskd/common.hpp"

namespace hskd {

// Thread-local switch that disables graph recording (teacher inference,
// dataset evaluation). Ops consult it through want_grad().
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---------------------------------------------------------------------------
// Dense row-major tensor with reverse-mode autodiff. TensorT is a cheap
// value-semantic handle onto a shared node; ops build the graph by linking
// nodes through parent pointers and a backprop closure.
//
// Scalar is float in the trained system; double instantiation exists for
// high-precision gradient verification.
// ---------------------------------------------------------------------------
template <typename Scalar>
class TensorT {
 public:
  struct Node {
    std::vector<int> shape;
    std::vector<Scalar> value;
    std::vector<Scalar> grad;  // sized on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // reads this grad, feeds parents

    size_t numel() const { return value.size(); }
    void ensure_grad() {
      if (grad.size() != value.size()) grad.assign(value.size(), Scalar(0));
    }
  };
  using NodePtr = std::shared_ptr<Node>;

  TensorT() = default;

  static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
    return filled(std::move(shape), Scalar(0), requires_grad);
  }

  static TensorT filled(std::vector<int> shape, Scalar v, bool requires_grad = false) {
    TensorT t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->value.assign(count(t.n_->shape), v);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static TensorT from(std::vector<int> shape, std::vector<Scalar> data,
                      bool requires_grad = false) {
    if (count(shape) != data.size())
      throw ContractError("tensor: shape does not match data length");
    TensorT t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static TensorT scalar(Scalar v) { return from({1}, {v}); }

  bool defined() const { return static_cast<bool>(n_); }
  const std::vector<int>& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int rows() const { return n_->shape.at(0); }
  int cols() const { return n_->shape.at(1); }
  size_t numel() const { return n_->numel(); }

  std::span<const Scalar> data() const { return n_->value; }
  std::span<Scalar> raw_data() { return n_->value; }  // parameter updates only

  Scalar at(int i, int j) const {
    return n_->value[static_cast<size_t>(i) * static_cast<size_t>(cols()) +
                     static_cast<size_t>(j)];
  }
  Scalar item() const {
    if (numel() != 1) throw ContractError("item: tensor is not a scalar");
    return n_->value[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }

  bool has_grad() const { return n_->grad.size() == n_->value.size(); }
  std::span<const Scalar> grad() const { return n_->grad; }
  std::span<Scalar> raw_grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), Scalar(0));
  }

  bool all_finite() const {
    for (Scalar v : n_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Reverse pass from a scalar loss. Visits each reachable node exactly once
  // in reverse topological order.
  void backward() const {
    if (numel() != 1) throw ContractError("backward: loss must be a scalar");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* p = node->parents[next++].get();
        if (seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->ensure_grad();
    n_->grad[0] = Scalar(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backprop && !node->grad.empty()) node->backprop(*node);
    }
  }

  NodePtr node() const { return n_; }

 private:
  static size_t count(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw ContractError("tensor: dimensions must be positive");
      n *= static_cast<size_t>(d);
    }
    return n;
  }

  NodePtr n_;
};

using Tensor = TensorT<float>;

namespace detail {

template <typename S>
bool want_grad(const TensorT<S>& a) {
  return grad_mode_flag() && a.requires_grad();
}
template <typename S, typename... Rest>
bool want_grad(const TensorT<S>& a, const Rest&... rest) {
  return want_grad(a) || want_grad(rest...);
}

template <typename S>
TensorT<S> make_out(std::vector<int> shape, bool track) {
  auto t = TensorT<S>::zeros(std::move(shape));
  t.set_requires_grad(track);
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape()) throw ContractError("add: shape mismatch");
  const bool track = detail::want_grad(a, b);
  auto out = detail::make_out<S>(a.shape(), track);
  auto od = out.raw_data();
  auto ad = a.data();
  auto bd = b.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
  if (track) {
    auto pa = a.node(), pb = b.node();
    auto n = out.node();
    n->parents = {pa, pb};
    n->backprop = [pa, pb](auto& o) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) pb->grad[i] += o.grad[i];
      }
    };
  }
  return out;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape()) throw ContractError("sub: shape mismatch");
  const bool track = detail::want_grad(a, b);
  auto out = detail::make_out<S>(a.shape(), track);
  auto od = out.raw_data();
  auto ad = a.data();
  auto bd = b.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] - bd[i];
  if (track) {
    auto pa = a.node(), pb = b.node();
    auto n = out.node();
    n->parents = {pa, pb};
    n->backprop = [pa, pb](auto& o) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) pb->grad[i] -= o.grad[i];
      }
    };
  }
  return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape()) throw ContractError("mul: shape mismatch");
  const bool track = detail::want_grad(a, b);
  auto out = detail::make_out<S>(a.shape(), track);
  auto od = out.raw_data();
  auto ad = a.data();
  auto bd = b.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
  if (track) {
    auto pa = a.node(), pb = b.node();
    auto n = out.node();
    n->parents = {pa, pb};
    n->backprop = [pa, pb](auto& o) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) pb->grad[i] += o.grad[i] * pa->value[i];
      }
    };
  }
  return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S s) {
  const bool track = detail::want_grad(a);
  auto out = detail::make_out<S>(a.shape(), track);
  auto od = out.raw_data();
  auto ad = a.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * s;
  if (track) {
    auto pa = a.node();
    auto n = out.node();
    n->parents = {pa};
    n->backprop = [pa, s](auto& o) {
      pa->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i] * s;
    };
  }
  return out;
}

// Broadcast-add a length-n row vector to every row of an m-by-n matrix.
template <typename S>
TensorT<S> add_rowvec(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape().size() != 2 || b.numel() != static_cast<size_t>(a.cols()))
    throw ContractError("add_rowvec: expected matrix plus matching row vector");
  const int m = a.rows(), n = a.cols();
  const bool track = detail::want_grad(a, b);
  auto out = detail::make_out<S>(a.shape(), track);
  auto od = out.raw_data();
  auto ad = a.data();
  auto bd = b.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      od[static_cast<size_t>(i) * n + j] = ad[static_cast<size_t>(i) * n + j] + bd[static_cast<size_t>(j)];
  if (track) {
    auto pa = a.node(), pb = b.node();
    auto nn = out.node();
    nn->parents = {pa, pb};
    nn->backprop = [pa, pb, m, n](auto& o) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            pb->grad[static_cast<size_t>(j)] += o.grad[static_cast<size_t>(i) * n + j];
      }
    };
  }
  return out;
}

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw ContractError("matmul: operands must be matrices");
  if (a.cols() != b.rows()) throw ContractError("matmul: inner dimensions disagree");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  const bool track = detail::want_grad(a, b);
  auto out = detail::make_out<S>({m, n}, track);
  auto od = out.raw_data();
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> acc(static_cast<size_t>(n));
  for (int i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int t = 0; t < k; ++t) {
      const double av = static_cast<double>(ad[static_cast<size_t>(i) * k + t]);
      const S* brow = &bd[static_cast<size_t>(t) * n];
      for (int j = 0; j < n; ++j) acc[static_cast<size_t>(j)] += av * static_cast<double>(brow[j]);
    }
    for (int j = 0; j < n; ++j) od[static_cast<size_t>(i) * n + j] = static_cast<S>(acc[static_cast<size_t>(j)]);
  }
  if (track) {
    auto pa = a.node(), pb = b.node();
    auto nn = out.node();
    nn->parents = {pa, pb};
    nn->backprop = [pa, pb, m, k, n](auto& o) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        // dA = G * B^T
        for (int i = 0; i < m; ++i)
          for (int t = 0; t < k; ++t) {
            double s = 0.0;
            const S* grow = &o.grad[static_cast<size_t>(i) * n];
            const S* brow = &pb->value[static_cast<size_t>(t) * n];
            for (int j = 0; j < n; ++j) s += static_cast<double>(grow[j]) * static_cast<double>(brow[j]);
            pa->grad[static_cast<size_t>(i) * k + t] += static_cast<S>(s);
          }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        // dB = A^T * G
        for (int i = 0; i < m; ++i) {
          const S* grow = &o.grad[static_cast<size_t>(i) * n];
          for (int t = 0; t < k; ++t) {
            const S av = pa->value[static_cast<size_t>(i) * k + t];
            S* brow = &pb->grad[static_cast<size_t>(t) * n];
            for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
          }
        }
      }
    };
  }
  return out;
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& a) {
  if (a.shape().size() != 2) throw ContractError("transpose: operand must be a matrix");
  const int m = a.rows(), n = a.cols();
  const bool track = detail::want_grad(a);
  auto out = detail::make_out<S>({n, m}, track);
  auto od = out.raw_data();
  auto ad = a.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      od[static_cast<size_t>(j) * m + i] = ad[static_cast<size_t>(i) * n + j];
  if (track) {
    auto pa = a.node();
    auto nn = out.node();
    nn->parents = {pa};
    nn->backprop = [pa, m, n](auto& o) {
      pa->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          pa->grad[static_cast<size_t>(i) * n + j] += o.grad[static_cast<size_t>(j) * m + i];
    };
  }
  return out;
}

// Row gather: out[r] = a[idx[r]]. Serves embedding lookup (table rows by id)
// and token selection; repeated indices accumulate on the way back.
template <typename S>
TensorT<S> gather_rows(const TensorT<S>& a, const std::vector<int>& idx) {
  if (a.shape().size() != 2) throw ContractError("gather_rows: operand must be a matrix");
  const int n = a.cols();
  for (int r : idx)
    if (r < 0 || r >= a.rows()) throw ContractError("gather_rows: row index out of range");
  const bool track = detail::want_grad(a);
  auto out = detail::make_out<S>({static_cast<int>(idx.size()), n}, track);
  auto od = out.raw_data();
  auto ad = a.data();
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy_n(&ad[static_cast<size_t>(idx[r]) * n], n, &od[r * static_cast<size_t>(n)]);
  if (track) {
    auto pa = a.node();
    auto nn = out.node();
    nn->parents = {pa};
    nn->backprop = [pa, idx, n](auto& o) {
      pa->ensure_grad();
      for (size_t r = 0; r < idx.size(); ++r)
        for (int j = 0; j < n; ++j)
          pa->grad[static_cast<size_t>(idx[r]) * n + j] += o.grad[r * static_cast<size_t>(n) + j];
    };
  }
  return out;
}

template <typename S>
TensorT<S> slice_cols(const TensorT<S>& a, int c0, int len) {
  if (a.shape().size() != 2) throw ContractError("slice_cols: operand must be a matrix");
  if (c0 < 0 || len <= 0 || c0 + len > a.cols()) throw ContractError("slice_cols: range out of bounds");
  const int m = a.rows(), n = a.cols();
  const bool track = detail::want_grad(a);
  auto out = detail::make_out<S>({m, len}, track);
  auto od = out.raw_data();
  auto ad = a.data();
  for (int i = 0; i < m; ++i)
    std::copy_n(&ad[static_cast<size_t>(i) * n + c0], len, &od[static_cast<size_t>(i) * len]);
  if (track) {
    auto pa = a.node();
    auto nn = out.node();
    nn->parents = {pa};
    nn->backprop = [pa, c0, len, m, n](auto& o) {
      pa->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < len; ++j)
          pa->grad[static_cast<size_t>(i) * n + c0 + j] += o.grad[static_cast<size_t>(i) * len + j];
    };
  }
  return out;
}

template <typename S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no operands");
  const int m = parts[0].rows();
  int total = 0;
  bool track = false;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.rows() != m)
      throw ContractError("concat_cols: row counts disagree");
    total += p.cols();
    track = track || detail::want_grad(p);
  }
  auto out = detail::make_out<S>({m, total}, track);
  auto od = out.raw_data();
  int off = 0;
  for (const auto& p : parts) {
    auto pd = p.data();
    const int w = p.cols();
    for (int i = 0; i < m; ++i)
      std::copy_n(&pd[static_cast<size_t>(i) * w], w, &od[static_cast<size_t>(i) * total + off]);
    off += w;
  }
  if (track) {
    auto nn = out.node();
    std::vector<typename TensorT<S>::NodePtr> ps;
    std::vector<int> widths;
    for (const auto& p : parts) {
      ps.push_back(p.node());
      widths.push_back(p.cols());
    }
    nn->parents = ps;
    nn->backprop = [ps, widths, m, total](auto& o) {
      int off2 = 0;
      for (size_t k = 0; k < ps.size(); ++k) {
        const int w = widths[k];
        if (ps[k]->requires_grad) {
          ps[k]->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
              ps[k]->grad[static_cast<size_t>(i) * w + j] +=
                  o.grad[static_cast<size_t>(i) * total + off2 + j];
        }
        off2 += w;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalizations
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> softmax_rows(const TensorT<S>& a) {
  if (a.shape().size() != 2) throw ContractError("softmax_rows: operand must be a matrix");
  const int m = a.rows(), n = a.cols();
  const bool track = detail::want_grad(a);
  auto out = detail::make_out<S>(a.shape(), track);
  auto od = out.raw_data();
  auto ad = a.data();
  for (int i = 0; i < m; ++i) {
    const S* row = &ad[static_cast<size_t>(i) * n];
    S* orow = &od[static_cast<size_t>(i) * n];
    S mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      const double e = std::exp(static_cast<double>(row[j] - mx));
      orow[j] = static_cast<S>(e);
      denom += e;
    }
    const double inv = 1.0 / denom;
    for (int j = 0; j < n; ++j) orow[j] = static_cast<S>(static_cast<double>(orow[j]) * inv);
  }
  if (track) {
    auto pa = a.node();
    auto nn = out.node();
    nn->parents = {pa};
    nn->backprop = [pa, m, n](auto& o) {
      pa->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const S* y = &o.value[static_cast<size_t>(i) * n];
        const S* g = &o.grad[static_cast<size_t>(i) * n];
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += static_cast<double>(g[j]) * static_cast<double>(y[j]);
        for (int j = 0; j < n; ++j)
          pa->grad[static_cast<size_t>(i) * n + j] +=
              static_cast<S>(static_cast<double>(y[j]) * (static_cast<double>(g[j]) - dot));
      }
    };
  }
  return out;
}

template <typename S>
TensorT<S> log_softmax_rows(const TensorT<S>& a) {
  if (a.shape().size() != 2) throw ContractError("log_softmax_rows: operand must be a matrix");
  const int m = a.rows(), n = a.cols();
  const bool track = detail::want_grad(a);
  auto out = detail::make_out<S>(a.shape(), track);
  auto od = out.raw_data();
  auto ad = a.data();
  for (int i = 0; i < m; ++i) {
    const S* row = &ad[static_cast<size_t>(i) * n];
    S* orow = &od[static_cast<size_t>(i) * n];
    S mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(denom);
    for (int j = 0; j < n; ++j) orow[j] = static_cast<S>(static_cast<double>(row[j]) - lse);
  }
  if (track) {
    auto pa = a.node();
    auto nn = out.node();
    nn->parents = {pa};
    nn->backprop = [pa, m, n](auto& o) {
      pa->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const S* lsm = &o.value[static_cast<size_t>(i) * n];
        const S* g = &o.grad[static_cast<size_t>(i) * n];
        double gsum = 0.0;
        for (int j = 0; j < n; ++j) gsum += static_cast<double>(g[j]);
        for (int j = 0; j < n; ++j)
          pa->grad[static_cast<size_t>(i) * n + j] += static_cast<S>(
              static_cast<double>(g[j]) - std::exp(static_cast<double>(lsm[j])) * gsum);
      }
    };
  }
  return out;
}

// Row-wise layer normalization with affine output. Vectors shorter than two
// elements have no meaningful variance.
template <typename S>
TensorT<S> layernorm(const TensorT<S>& a, const TensorT<S>& gain, const TensorT<S>& bias,
                     S eps = S(1e-5)) {
  if (a.shape().size() != 2) throw ContractError("layernorm: operand must be a matrix");
  const int m = a.rows(), d = a.cols();
  if (d < 2) throw ContractError("layernorm: vector size must be at least 2");
  if (gain.numel() != static_cast<size_t>(d) || bias.numel() != static_cast<size_t>(d))
    throw ContractError("layernorm: gain/bias size mismatch");
  const bool track = detail::want_grad(a, gain, bias);
  auto out = detail::make_out<S>(a.shape(), track);
  auto od = out.raw_data();
  auto ad = a.data();
  auto gd = gain.data();
  auto bd = bias.data();
  std::vector<S> means(static_cast<size_t>(m)), invstds(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    const S* row = &ad[static_cast<size_t>(i) * d];
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += static_cast<double>(row[j]);
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = static_cast<double>(row[j]) - mu;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    means[static_cast<size_t>(i)] = static_cast<S>(mu);
    invstds[static_cast<size_t>(i)] = static_cast<S>(inv);
    for (int j = 0; j < d; ++j) {
      const double xhat = (static_cast<double>(row[j]) - mu) * inv;
      od[static_cast<size_t>(i) * d + j] =
          static_cast<S>(xhat * static_cast<double>(gd[j]) + static_cast<double>(bd[j]));
    }
  }
  if (track) {
    auto pa = a.node();
    auto pg = gain.node();
    auto pb = bias.node();
    auto nn = out.node();
    nn->parents = {pa, pg, pb};
    nn->backprop = [pa, pg, pb, m, d, means, invstds](auto& o) {
      for (int i = 0; i < m; ++i) {
        const S* row = &pa->value[static_cast<size_t>(i) * d];
        const S* g = &o.grad[static_cast<size_t>(i) * d];
        const double mu = static_cast<double>(means[static_cast<size_t>(i)]);
        const double inv = static_cast<double>(invstds[static_cast<size_t>(i)]);
        if (pg->requires_grad || pb->requires_grad) {
          if (pg->requires_grad) pg->ensure_grad();
          if (pb->requires_grad) pb->ensure_grad();
          for (int j = 0; j < d; ++j) {
            const double xhat = (static_cast<double>(row[j]) - mu) * inv;
            if (pg->requires_grad) pg->grad[static_cast<size_t>(j)] += static_cast<S>(static_cast<double>(g[j]) * xhat);
            if (pb->requires_grad) pb->grad[static_cast<size_t>(j)] += g[j];
          }
        }
        if (pa->requires_grad) {
          pa->ensure_grad();
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int j = 0; j < d; ++j) {
            const double xhat = (static_cast<double>(row[j]) - mu) * inv;
            const double dxhat = static_cast<double>(g[j]) * static_cast<double>(pg->value[static_cast<size_t>(j)]);
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
          for (int j = 0; j < d; ++j) {
            const double xhat = (static_cast<double>(row[j]) - mu) * inv;
            const double dxhat = static_cast<double>(g[j]) * static_cast<double>(pg->value[static_cast<size_t>(j)]);
            pa->grad[static_cast<size_t>(i) * d + j] += static_cast<S>(
                inv * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d));
          }
        }
      }
    };
  }
  return out;
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

template <typename S>
TensorT<S> gelu(const TensorT<S>& a) {
  using detail::kGeluA;
  using detail::kGeluC;
  const bool track = detail::want_grad(a);
  auto out = detail::make_out<S>(a.shape(), track);
  auto od = out.raw_data();
  auto ad = a.data();
  for (size_t i = 0; i < od.size(); ++i) {
    const double x = static_cast<double>(ad[i]);
    const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    od[i] = static_cast<S>(0.5 * x * (1.0 + t));
  }
  if (track) {
    auto pa = a.node();
    auto nn = out.node();
    nn->parents = {pa};
    nn->backprop = [pa](auto& o) {
      pa->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) {
        const double x = static_cast<double>(pa->value[i]);
        const double u = kGeluC * (x + kGeluA * x * x * x);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        const double dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        pa->grad[i] += static_cast<S>(static_cast<double>(o.grad[i]) * dy);
      }
    };
  }
  return out;
}

template <typename S>
TensorT<S> relu(const TensorT<S>& a) {
  const bool track = detail::want_grad(a);
  auto out = detail::make_out<S>(a.shape(), track);
  auto od = out.raw_data();
  auto ad = a.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] > S(0) ? ad[i] : S(0);
  if (track) {
    auto pa = a.node();
    auto nn = out.node();
    nn->parents = {pa};
    nn->backprop = [pa](auto& o) {
      pa->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i)
        if (pa->value[i] > S(0)) pa->grad[i] += o.grad[i];
    };
  }
  return out;
}

// Inverted-scaling dropout; identity when rate is zero. The mask comes from
// the caller's RNG so a seeded run replays the exact masks.
template <typename S>
TensorT<S> dropout(const TensorT<S>& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ContractError("dropout: rate must be below 1");
  const bool track = detail::want_grad(a);
  auto out = detail::make_out<S>(a.shape(), track);
  auto od = out.raw_data();
  auto ad = a.data();
  auto mask = std::make_shared<std::vector<S>>(od.size());
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  for (size_t i = 0; i < od.size(); ++i) {
    const S m = rng.canonical() < rate ? S(0) : keep_scale;
    (*mask)[i] = m;
    od[i] = ad[i] * m;
  }
  if (track) {
    auto pa = a.node();
    auto nn = out.node();
    nn->parents = {pa};
    nn->backprop = [pa, mask](auto& o) {
      pa->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i] * (*mask)[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> sum_all(const TensorT<S>& a) {
  const bool track = detail::want_grad(a);
  double s = 0.0;
  for (S v : a.data()) s += static_cast<double>(v);
  auto out = TensorT<S>::from({1}, {static_cast<S>(s)});
  out.set_requires_grad(track);
  if (track) {
    auto pa = a.node();
    auto nn = out.node();
    nn->parents = {pa};
    nn->backprop = [pa](auto& o) {
      pa->ensure_grad();
      for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += o.grad[0];
    };
  }
  return out;
}

template <typename S>
TensorT<S> mean_all(const TensorT<S>& a) {
  return scale(sum_all(a), static_cast<S>(1.0 / static_cast<double>(a.numel())));
}

template <typename S>
TensorT<S> mse(const TensorT<S>& a, const TensorT<S>& b) {
  auto d = sub(a, b);
  return mean_all(mul(d, d));
}

}  // namespace hskd
