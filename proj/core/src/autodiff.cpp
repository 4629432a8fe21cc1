// SPDX-License-Identifier: Apache-2.0
#include "fans/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace fans {

// ---------------------------------------------------------------------------
// Var

template <typename T>
const Shape& Var<T>::shape() const {
  return graph->shape(id);
}

template <typename T>
std::size_t Var<T>::rows() const {
  const auto& s = shape();
  if (s.empty()) return 1;
  return s.size() == 1 ? 1 : s[0];
}

template <typename T>
std::size_t Var<T>::cols() const {
  const auto& s = shape();
  if (s.empty()) return 1;
  if (s.size() == 1) return s[0];
  std::size_t n = 1;
  for (std::size_t i = 1; i < s.size(); ++i) n *= s[i];
  return n;
}

template <typename T>
std::span<const T> Var<T>::values() const {
  return graph->value(id);
}

template <typename T>
Tensor<T> Var<T>::tensor() const {
  auto v = values();
  return Tensor<T>(shape(), std::vector<T>(v.begin(), v.end()));
}

// ---------------------------------------------------------------------------
// Graph

template <typename T>
Var<T> Graph<T>::push(Node node) {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) throw ContractError("graph node limit exceeded");
  nodes_.push_back(std::move(node));
  return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  Node n;
  n.shape = value.shape();
  auto v = value.values();
  n.value.assign(v.begin(), v.end());
  return push(std::move(n));
}

template <typename T>
Var<T> Graph<T>::input(Tensor<T> value) {
  Node n;
  n.shape = value.shape();
  auto v = value.values();
  n.value.assign(v.begin(), v.end());
  n.needs_grad = grad_enabled_;
  n.keep_grad = true;
  return push(std::move(n));
}

template <typename T>
Var<T> Graph<T>::param(Tensor<T>& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var<T>{this, it->second};
  Node n;
  n.shape = p.shape();
  n.param = &p;
  n.needs_grad = grad_enabled_ && p.requires_grad();
  auto v = push(std::move(n));
  bound_.emplace(&p, v.id);
  return v;
}

template <typename T>
std::span<const T> Graph<T>::value(std::uint32_t id) const {
  const Node& n = nodes_[id];
  if (n.param) return n.param->values();
  return n.value;
}

template <typename T>
std::span<T> Graph<T>::grad_mut(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(shape_size(n.shape), T(0));
  return n.grad;
}

template <typename T>
void Graph<T>::set_training(bool on, std::uint64_t dropout_seed) {
  training_ = on;
  rng_ = Rng(dropout_seed);
}

template <typename T>
Var<T> Graph<T>::record(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
  return record(std::move(shape), std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                std::move(fn));
}

template <typename T>
Var<T> Graph<T>::record(Shape shape, std::vector<T> value, std::span<const Var<T>> inputs, BackwardFn fn) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  for (const auto& in : inputs) {
    if (in.graph != this) throw ContractError("operation mixes values from different graphs");
    n.needs_grad = n.needs_grad || nodes_[in.id].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  if (loss.graph != this) throw ContractError("backward: loss belongs to another graph");
  if (shape_size(nodes_[loss.id].shape) != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_string(nodes_[loss.id].shape));
  }
  for (auto& n : nodes_) {
    if (!n.keep_grad) n.grad.clear();
  }
  grad_mut(loss.id)[0] += T(1);
  for (std::int64_t i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, static_cast<std::uint32_t>(i));
    if (n.param) {
      auto dst = n.param->grad();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
    }
  }
}

template struct Var<float>;
template struct Var<double>;
template class Graph<float>;
template class Graph<double>;

// ---------------------------------------------------------------------------
// Mask

Mask Mask::causal(std::size_t n) {
  Mask m;
  m.rows = n;
  m.cols = n;
  m.allowed.assign(n * n, 0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c <= r; ++c) m.allowed[r * n + c] = 1;
  return m;
}

// ---------------------------------------------------------------------------
// debug hooks

namespace debug {

namespace {
thread_local Fault current_fault = Fault::none;
}

ScopedFault::ScopedFault(Fault f) : previous_(current_fault) { current_fault = f; }
ScopedFault::~ScopedFault() { current_fault = previous_; }
Fault active_fault() { return current_fault; }

}  // namespace debug

// ---------------------------------------------------------------------------
// ops

namespace ops {

namespace {

template <typename T>
std::size_t rows_of(const Shape& s) {
  if (s.empty()) return 1;
  return s.size() == 1 ? 1 : s[0];
}

template <typename T>
std::size_t cols_of(const Shape& s) {
  if (s.empty()) return 1;
  if (s.size() == 1) return s[0];
  std::size_t n = 1;
  for (std::size_t i = 1; i < s.size(); ++i) n *= s[i];
  return n;
}

template <typename T>
void require_same_shape(const char* op, Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename T>
std::vector<T> copy_values(Var<T> a) {
  auto v = a.values();
  return std::vector<T>(v.begin(), v.end());
}

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += G[m x n] * B[k x n]^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    T* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[k x n] += A[m x k]^T * G[m x n]
template <typename T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<T> out(m * n, T(0));
  gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  const auto ia = a.id, ib = b.id;
  return a.graph->record(Shape{m, n}, std::move(out), {a, b}, [=](Graph<T>& g, std::uint32_t self) {
    const T* go = g.grad(self).data();
    if (g.needs_grad(ia)) gemm_nt(go, g.value(ib).data(), g.grad_mut(ia).data(), m, n, k);
    if (g.needs_grad(ib)) gemm_tn(g.value(ia).data(), go, g.grad_mut(ib).data(), m, k, n);
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const std::size_t m = rows_of<T>(a.shape()), n = cols_of<T>(a.shape());
  auto v = a.values();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  const auto ia = a.id;
  return a.graph->record(Shape{n, m}, std::move(out), {a}, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    auto ga = g.grad_mut(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape("add", a, b);
  auto out = copy_values(a);
  auto vb = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
  const auto ia = a.id, ib = b.id;
  return a.graph->record(a.shape(), std::move(out), {a, b}, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    for (auto id : {ia, ib}) {
      if (!g.needs_grad(id)) continue;
      auto gi = g.grad_mut(id);
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape("sub", a, b);
  auto out = copy_values(a);
  auto vb = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
  const auto ia = a.id, ib = b.id;
  return a.graph->record(a.shape(), std::move(out), {a, b}, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    if (g.needs_grad(ia)) {
      auto gi = g.grad_mut(ia);
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
    }
    if (g.needs_grad(ib)) {
      auto gi = g.grad_mut(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] -= go[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape("mul", a, b);
  auto out = copy_values(a);
  auto vb = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
  const auto ia = a.id, ib = b.id;
  return a.graph->record(a.shape(), std::move(out), {a, b}, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    if (g.needs_grad(ia)) {
      auto gi = g.grad_mut(ia);
      auto vb = g.value(ib);
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * vb[i];
    }
    if (g.needs_grad(ib)) {
      auto gi = g.grad_mut(ib);
      auto va = g.value(ia);
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * va[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  auto out = copy_values(a);
  for (auto& x : out) x *= factor;
  const auto ia = a.id;
  return a.graph->record(a.shape(), std::move(out), {a}, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    auto gi = g.grad_mut(ia);
    for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * factor;
  });
}

template <typename T>
Var<T> add_row(Var<T> x, Var<T> b) {
  const std::size_t m = rows_of<T>(x.shape()), n = cols_of<T>(x.shape());
  if (shape_size(b.shape()) != n) {
    throw ShapeError("add_row: bias " + shape_string(b.shape()) + " does not broadcast over " +
                     shape_string(x.shape()));
  }
  auto out = copy_values(x);
  auto vb = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += vb[j];
  const auto ix = x.id, ib = b.id;
  return x.graph->record(x.shape(), std::move(out), {x, b}, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    if (g.needs_grad(ix)) {
      auto gi = g.grad_mut(ix);
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
    }
    if (g.needs_grad(ib)) {
      auto gb = g.grad_mut(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  auto out = copy_values(a);
  for (auto& x : out) x = T(1) / (T(1) + std::exp(-x));
  const auto ia = a.id;
  return a.graph->record(a.shape(), std::move(out), {a}, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    auto y = g.value(self);
    auto gi = g.grad_mut(ia);
    for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  auto out = copy_values(a);
  for (auto& x : out) x = std::tanh(x);
  const auto ia = a.id;
  return a.graph->record(a.shape(), std::move(out), {a}, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    auto y = g.value(self);
    auto gi = g.grad_mut(ia);
    for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * (T(1) - y[i] * y[i]);
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  auto out = copy_values(a);
  for (auto& x : out) x = x > T(0) ? x : T(0);
  const auto ia = a.id;
  return a.graph->record(a.shape(), std::move(out), {a}, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    auto x = g.value(ia);
    auto gi = g.grad_mut(ia);
    for (std::size_t i = 0; i < go.size(); ++i)
      if (x[i] > T(0)) gi[i] += go[i];
  });
}

namespace {

// Softmax over `n` elements spaced `stride` apart.
template <typename T>
void softmax_strided(const T* in, T* out, std::size_t n, std::size_t stride) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[j * stride]);
  if (!std::isfinite(mx)) throw NumericError("softmax: non-finite input");
  T total = T(0);
  for (std::size_t j = 0; j < n; ++j) {
    const T e = std::exp(in[j * stride] - mx);
    out[j * stride] = e;
    total += e;
  }
  if (!std::isfinite(total)) throw NumericError("softmax: non-finite input");
  for (std::size_t j = 0; j < n; ++j) out[j * stride] /= total;
}

template <typename T>
void softmax_backward_strided(const T* y, const T* go, T* gi, std::size_t n, std::size_t stride) {
  T dot = T(0);
  for (std::size_t j = 0; j < n; ++j) dot += y[j * stride] * go[j * stride];
  for (std::size_t j = 0; j < n; ++j) gi[j * stride] += y[j * stride] * (go[j * stride] - dot);
}

}  // namespace

template <typename T>
Var<T> softmax(Var<T> a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) {
    throw ContractError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  auto in = a.values();
  std::vector<T> out(in.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      softmax_strided(in.data() + base, out.data() + base, n, inner);
    }
  const auto ia = a.id;
  return a.graph->record(s, std::move(out), {a}, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    auto y = g.value(self);
    auto gi = g.grad_mut(ia);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        softmax_backward_strided(y.data() + base, go.data() + base, gi.data() + base, n, inner);
      }
  });
}

template <typename T>
Var<T> masked_softmax_rows(Var<T> scores, const Mask& mask) {
  const std::size_t m = rows_of<T>(scores.shape()), n = cols_of<T>(scores.shape());
  if (mask.rows != m || mask.cols != n) {
    throw ShapeError("masked_softmax_rows: mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                     " vs scores " + shape_string(scores.shape()));
  }
  auto in = scores.values();
  std::vector<T> out(m * n, T(0));
  for (std::size_t r = 0; r < m; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < n; ++c)
      if (mask.at(r, c)) {
        mx = std::max(mx, in[r * n + c]);
        any = true;
      }
    if (!any) throw ContractError("attention: query row " + std::to_string(r) + " has every key masked");
    if (!std::isfinite(mx)) throw NumericError("softmax: non-finite input");
    T total = T(0);
    for (std::size_t c = 0; c < n; ++c)
      if (mask.at(r, c)) {
        const T e = std::exp(in[r * n + c] - mx);
        out[r * n + c] = e;
        total += e;
      }
    if (!std::isfinite(total)) throw NumericError("softmax: non-finite input");
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= total;
  }
  const auto ia = scores.id;
  return scores.graph->record(scores.shape(), std::move(out), {scores}, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    auto y = g.value(self);
    auto gi = g.grad_mut(ia);
    for (std::size_t r = 0; r < m; ++r) softmax_backward_strided(y.data() + r * n, go.data() + r * n, gi.data() + r * n, n, 1);
  });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t m = rows_of<T>(parts[0].shape());
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (rows_of<T>(p.shape()) != m) throw ShapeError("concat_cols: row count mismatch " + shape_string(p.shape()));
    widths.push_back(cols_of<T>(p.shape()));
    total += widths.back();
  }
  std::vector<T> out(m * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].values();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(v.data() + i * widths[k], widths[k], out.data() + i * total + off);
    off += widths[k];
  }
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return parts[0].graph->record(Shape{m, total}, std::move(out), parts, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (g.needs_grad(ids[k])) {
        auto gi = g.grad_mut(ids[k]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) gi[i * widths[k] + j] += go[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t n = cols_of<T>(parts[0].shape());
  std::size_t m = 0;
  std::vector<std::size_t> heights;
  for (const auto& p : parts) {
    if (cols_of<T>(p.shape()) != n) throw ShapeError("concat_rows: column count mismatch " + shape_string(p.shape()));
    heights.push_back(rows_of<T>(p.shape()));
    m += heights.back();
  }
  std::vector<T> out;
  out.reserve(m * n);
  for (const auto& p : parts) {
    auto v = p.values();
    out.insert(out.end(), v.begin(), v.end());
  }
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return parts[0].graph->record(Shape{m, n}, std::move(out), parts, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t len = heights[k] * n;
      if (g.needs_grad(ids[k])) {
        auto gi = g.grad_mut(ids[k]);
        for (std::size_t i = 0; i < len; ++i) gi[i] += go[off + i];
      }
      off += len;
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t start, std::size_t count) {
  const std::size_t m = rows_of<T>(a.shape()), n = cols_of<T>(a.shape());
  if (start + count > m) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of " + shape_string(a.shape()));
  }
  auto v = a.values();
  std::vector<T> out(v.begin() + start * n, v.begin() + (start + count) * n);
  const auto ia = a.id;
  return a.graph->record(Shape{count, n}, std::move(out), {a}, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    auto gi = g.grad_mut(ia);
    for (std::size_t i = 0; i < go.size(); ++i) gi[start * n + i] += go[i];
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t start, std::size_t count) {
  const std::size_t m = rows_of<T>(a.shape()), n = cols_of<T>(a.shape());
  if (start + count > n) {
    throw ShapeError("slice_cols: cols [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of " + shape_string(a.shape()));
  }
  auto v = a.values();
  std::vector<T> out(m * count);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(v.data() + i * n + start, count, out.data() + i * count);
  const auto ia = a.id;
  return a.graph->record(Shape{m, count}, std::move(out), {a}, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    auto gi = g.grad_mut(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) gi[i * n + start + j] += go[i * count + j];
  });
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::size_t> ids) {
  const std::size_t m = rows_of<T>(table.shape()), n = cols_of<T>(table.shape());
  auto v = table.values();
  std::vector<T> out(ids.size() * n);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= m) {
      throw ContractError("gather_rows: index " + std::to_string(ids[i]) + " out of range for " +
                          std::to_string(m) + " rows");
    }
    std::copy_n(v.data() + ids[i] * n, n, out.data() + i * n);
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  const auto it = table.id;
  return table.graph->record(Shape{ids.size(), n}, std::move(out), {table}, [=](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    auto gi = g.grad_mut(it);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) gi[idx[i] * n + j] += go[i * n + j];
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const std::size_t m = rows_of<T>(x.shape()), n = cols_of<T>(x.shape());
  if (shape_size(gamma.shape()) != n || shape_size(beta.shape()) != n) {
    throw ShapeError("layer_norm: gain/bias do not match width " + std::to_string(n));
  }
  auto vx = x.values();
  auto vg = gamma.values();
  auto vb = beta.values();
  std::vector<T> out(m * n), xhat(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = vx.data() + i * n;
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(n);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mean) * inv_std[i];
      out[i * n + j] = vg[j] * xhat[i * n + j] + vb[j];
    }
  }
  const auto ix = x.id, ig = gamma.id, ib = beta.id;
  return x.graph->record(x.shape(), std::move(out), {x, gamma, beta},
                         [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& g, std::uint32_t self) {
                           auto go = g.grad(self);
                           auto vg = g.value(ig);
                           if (g.needs_grad(ig)) {
                             auto gg = g.grad_mut(ig);
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) gg[j] += go[i * n + j] * xhat[i * n + j];
                           }
                           if (g.needs_grad(ib)) {
                             auto gb = g.grad_mut(ib);
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
                           }
                           if (g.needs_grad(ix)) {
                             auto gx = g.grad_mut(ix);
                             for (std::size_t i = 0; i < m; ++i) {
                               T mean_d = T(0), mean_dx = T(0);
                               for (std::size_t j = 0; j < n; ++j) {
                                 const T d = go[i * n + j] * vg[j];
                                 mean_d += d;
                                 mean_dx += d * xhat[i * n + j];
                               }
                               mean_d /= static_cast<T>(n);
                               mean_dx /= static_cast<T>(n);
                               for (std::size_t j = 0; j < n; ++j) {
                                 const T d = go[i * n + j] * vg[j];
                                 gx[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
                               }
                             }
                           }
                         });
}

template <typename T>
Var<T> dropout(Var<T> x, T rate) {
  Graph<T>& graph = *x.graph;
  if (!graph.training() || rate <= T(0)) return x;
  if (rate >= T(1)) throw ContractError("dropout: rate must be below 1");
  const T keep_scale = T(1) / (T(1) - rate);
  auto v = x.values();
  std::vector<T> mask(v.size());
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    mask[i] = graph.rng().uniform() < static_cast<double>(rate) ? T(0) : keep_scale;
    out[i] = v[i] * mask[i];
  }
  const auto ix = x.id;
  return graph.record(x.shape(), std::move(out), {x}, [=, mask = std::move(mask)](Graph<T>& g, std::uint32_t self) {
    auto go = g.grad(self);
    auto gi = g.grad_mut(ix);
    for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * mask[i];
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T total = T(0);
  for (T x : a.values()) total += x;
  const auto ia = a.id;
  return a.graph->record(Shape{1}, std::vector<T>{total}, {a}, [=](Graph<T>& g, std::uint32_t self) {
    const T go = g.grad(self)[0];
    auto gi = g.grad_mut(ia);
    for (auto& x : gi) x += go;
  });
}

template <typename T>
Var<T> cross_entropy_rows(Var<T> logits, std::span<const std::size_t> gold, std::span<const T> weight, T eps) {
  const std::size_t m = rows_of<T>(logits.shape()), v = cols_of<T>(logits.shape());
  if (v < 2) throw ContractError("cross_entropy: vocabulary must have at least 2 entries");
  if (gold.size() != m || weight.size() != m) {
    throw ShapeError("cross_entropy: " + std::to_string(m) + " logit rows but " + std::to_string(gold.size()) +
                     " labels and " + std::to_string(weight.size()) + " weights");
  }
  if (eps < T(0) || eps >= T(1)) throw ContractError("cross_entropy: smoothing must lie in [0, 1)");
  auto x = logits.values();
  std::vector<T> probs(m * v);
  T total = T(0);
  const T uniform = eps / static_cast<T>(v);
  for (std::size_t r = 0; r < m; ++r) {
    if (gold[r] >= v) {
      throw ContractError("cross_entropy: gold class " + std::to_string(gold[r]) + " out of range for " +
                          std::to_string(v) + " classes");
    }
    const T* row = x.data() + r * v;
    T mx = *std::max_element(row, row + v);
    if (!std::isfinite(mx)) throw NumericError("cross_entropy: non-finite logits");
    T z = T(0);
    for (std::size_t c = 0; c < v; ++c) z += std::exp(row[c] - mx);
    const T lse = mx + std::log(z);
    T loss = T(0);
    for (std::size_t c = 0; c < v; ++c) {
      const T logp = row[c] - lse;
      probs[r * v + c] = std::exp(logp);
      const T q = uniform + (c == gold[r] ? T(1) - eps : T(0));
      loss -= q * logp;
    }
    if (weight[r] != T(0)) total += weight[r] * loss;
  }
  std::vector<std::size_t> gold_copy(gold.begin(), gold.end());
  std::vector<T> w(weight.begin(), weight.end());
  const auto il = logits.id;
  return logits.graph->record(
      Shape{1}, std::vector<T>{total}, {logits},
      [=, probs = std::move(probs), gold_copy = std::move(gold_copy), w = std::move(w)](Graph<T>& g,
                                                                                        std::uint32_t self) {
        const T go = g.grad(self)[0];
        auto gi = g.grad_mut(il);
        for (std::size_t r = 0; r < m; ++r) {
          if (w[r] == T(0)) continue;
          const T s = go * w[r];
          for (std::size_t c = 0; c < v; ++c) {
            const T q = uniform + (c == gold_copy[r] ? T(1) - eps : T(0));
            gi[r * v + c] += s * (probs[r * v + c] - q);
          }
        }
      });
}

template <typename T>
Var<T> cross_entropy_smoothed(Var<T> logits, std::size_t gold, T eps) {
  const std::size_t golds[1] = {gold};
  const T weights[1] = {T(1)};
  const std::size_t v = shape_size(logits.shape());
  Var<T> row = logits;
  if (logits.shape().size() != 2 || logits.shape()[0] != 1) {
    row = logits.graph->record(Shape{1, v}, copy_values(logits), {logits}, [ia = logits.id](Graph<T>& g, std::uint32_t self) {
      auto go = g.grad(self);
      auto gi = g.grad_mut(ia);
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
    });
  }
  return cross_entropy_rows<T>(row, golds, weights, eps);
}

template <typename T>
Var<T> lstm_cell(Var<T> gates, Var<T> c_prev) {
  const std::size_t b = rows_of<T>(gates.shape());
  const std::size_t h = cols_of<T>(c_prev.shape());
  if (cols_of<T>(gates.shape()) != 4 * h || rows_of<T>(c_prev.shape()) != b) {
    throw ShapeError("lstm_cell: gates " + shape_string(gates.shape()) + " inconsistent with cell " +
                     shape_string(c_prev.shape()));
  }
  auto a = gates.values();
  auto cp = c_prev.values();
  // activations cached for backward: i, f, g, o, tanh(c)
  std::vector<T> act(b * 5 * h);
  std::vector<T> out(b * 2 * h);
  for (std::size_t r = 0; r < b; ++r) {
    const T* ar = a.data() + r * 4 * h;
    T* cache = act.data() + r * 5 * h;
    for (std::size_t j = 0; j < h; ++j) {
      const T ig = T(1) / (T(1) + std::exp(-ar[j]));
      const T fg = T(1) / (T(1) + std::exp(-ar[h + j]));
      const T gg = std::tanh(ar[2 * h + j]);
      const T og = T(1) / (T(1) + std::exp(-ar[3 * h + j]));
      const T c = fg * cp[r * h + j] + ig * gg;
      const T tc = std::tanh(c);
      cache[j] = ig;
      cache[h + j] = fg;
      cache[2 * h + j] = gg;
      cache[3 * h + j] = og;
      cache[4 * h + j] = tc;
      out[r * 2 * h + j] = og * tc;
      out[r * 2 * h + h + j] = c;
    }
  }
  const auto ia = gates.id, ic = c_prev.id;
  const T sign = debug::active_fault() == debug::Fault::lstm_backward_sign ? T(-1) : T(1);
  return gates.graph->record(
      Shape{b, 2 * h}, std::move(out), {gates, c_prev},
      [=, act = std::move(act)](Graph<T>& g, std::uint32_t self) {
        auto go = g.grad(self);
        auto cp = g.value(ic);
        std::span<T> ga = g.needs_grad(ia) ? g.grad_mut(ia) : std::span<T>{};
        std::span<T> gc = g.needs_grad(ic) ? g.grad_mut(ic) : std::span<T>{};
        for (std::size_t r = 0; r < b; ++r) {
          const T* cache = act.data() + r * 5 * h;
          for (std::size_t j = 0; j < h; ++j) {
            const T ig = cache[j], fg = cache[h + j], gg = cache[2 * h + j], og = cache[3 * h + j],
                    tc = cache[4 * h + j];
            const T dh = go[r * 2 * h + j];
            const T dc = go[r * 2 * h + h + j] + dh * og * (T(1) - tc * tc);
            if (!ga.empty()) {
              T* gr = ga.data() + r * 4 * h;
              gr[j] += sign * dc * gg * ig * (T(1) - ig);
              gr[h + j] += sign * dc * cp[r * h + j] * fg * (T(1) - fg);
              gr[2 * h + j] += sign * dc * ig * (T(1) - gg * gg);
              gr[3 * h + j] += sign * dh * tc * og * (T(1) - og);
            }
            if (!gc.empty()) gc[r * h + j] += dc * fg;
          }
        }
      });
}

#define FANS_INSTANTIATE_OPS(T)                                                                 \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                                   \
  template Var<T> transpose<T>(Var<T>);                                                        \
  template Var<T> add<T>(Var<T>, Var<T>);                                                      \
  template Var<T> sub<T>(Var<T>, Var<T>);                                                      \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                      \
  template Var<T> scale<T>(Var<T>, T);                                                         \
  template Var<T> add_row<T>(Var<T>, Var<T>);                                                  \
  template Var<T> sigmoid<T>(Var<T>);                                                          \
  template Var<T> tanh<T>(Var<T>);                                                             \
  template Var<T> relu<T>(Var<T>);                                                             \
  template Var<T> softmax<T>(Var<T>, std::size_t);                                             \
  template Var<T> masked_softmax_rows<T>(Var<T>, const Mask&);                                 \
  template Var<T> concat_cols<T>(std::span<const Var<T>>);                                     \
  template Var<T> concat_rows<T>(std::span<const Var<T>>);                                     \
  template Var<T> slice_rows<T>(Var<T>, std::size_t, std::size_t);                             \
  template Var<T> slice_cols<T>(Var<T>, std::size_t, std::size_t);                             \
  template Var<T> gather_rows<T>(Var<T>, std::span<const std::size_t>);                        \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                                    \
  template Var<T> dropout<T>(Var<T>, T);                                                       \
  template Var<T> sum<T>(Var<T>);                                                              \
  template Var<T> cross_entropy_rows<T>(Var<T>, std::span<const std::size_t>, std::span<const T>, T); \
  template Var<T> cross_entropy_smoothed<T>(Var<T>, std::size_t, T);                           \
  template Var<T> lstm_cell<T>(Var<T>, Var<T>);

FANS_INSTANTIATE_OPS(float)
FANS_INSTANTIATE_OPS(double)

#undef FANS_INSTANTIATE_OPS

}  // namespace ops

}  // namespace fans
