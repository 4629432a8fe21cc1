// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "fans/rng.hpp"
#include "fans/tensor.hpp"

namespace fans {

template <typename T>
class Graph;

/// Handle to a value recorded on a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::uint32_t id = 0;

  bool valid() const { return graph != nullptr; }
  const Shape& shape() const;
  std::size_t rows() const;
  std::size_t cols() const;
  std::span<const T> values() const;
  /// Copy of the current value as a standalone tensor.
  Tensor<T> tensor() const;
};

/// Tape of executed differentiable operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it and
/// a single reverse sweep visits each node once. Parameters bound with `param`
/// are referenced, not copied; `backward` adds their gradients into the bound
/// tensors' grad buffers. A Graph and its values belong to one thread.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::uint32_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf holding a copy of `value`; never receives gradient.
  Var<T> constant(Tensor<T> value);
  /// Leaf holding a copy of `value`; gradient is readable through `grad`.
  Var<T> input(Tensor<T> value);
  /// Leaf referencing an external parameter. Repeated binds return the same node.
  Var<T> param(Tensor<T>& p);

  /// Reverse sweep from a scalar loss.
  void backward(Var<T> loss);

  std::size_t size() const { return nodes_.size(); }
  const Shape& shape(std::uint32_t id) const { return nodes_[id].shape; }
  std::span<const T> value(std::uint32_t id) const;
  /// Gradient of a node after backward; empty if none reached it.
  std::span<const T> grad(std::uint32_t id) const { return nodes_[id].grad; }
  bool needs_grad(std::uint32_t id) const { return nodes_[id].needs_grad; }

  /// Training mode enables dropout.
  bool training() const { return training_; }
  void set_training(bool on, std::uint64_t dropout_seed = 0);
  Rng& rng() { return rng_; }

  /// When disabled, parameters are bound as constants and no closures are kept.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  /// Attention probability tables are appended here when recording is on.
  void set_record_attention(bool on) { record_attention_ = on; }
  bool record_attention() const { return record_attention_; }
  std::vector<Var<T>>& attention_log() { return attention_; }

  // Op-construction interface.
  Var<T> record(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn);
  Var<T> record(Shape shape, std::vector<T> value, std::span<const Var<T>> inputs, BackwardFn fn);
  /// Gradient buffer of a node, allocated on demand.
  std::span<T> grad_mut(std::uint32_t id);

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    Tensor<T>* param = nullptr;
    std::vector<T> grad;
    bool needs_grad = false;
    bool keep_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Node node);

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::uint32_t> bound_;
  std::vector<Var<T>> attention_;
  Rng rng_{0};
  bool training_ = false;
  bool grad_enabled_ = true;
  bool record_attention_ = false;
};

/// Additive boolean mask over a score matrix; `allowed(r, c)` false drops the entry.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  static Mask causal(std::size_t n);
  bool at(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }
};

namespace ops {

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> transpose(Var<T> a);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
/// x[m x n] + b, with b of n elements broadcast over rows.
template <typename T> Var<T> add_row(Var<T> x, Var<T> b);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> tanh(Var<T> a);
template <typename T> Var<T> relu(Var<T> a);
/// Numerically stable softmax along `axis`.
template <typename T> Var<T> softmax(Var<T> a, std::size_t axis);
/// Row softmax of `scores` with disallowed entries forced to probability 0.
template <typename T> Var<T> masked_softmax_rows(Var<T> scores, const Mask& mask);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
template <typename T> Var<T> slice_rows(Var<T> a, std::size_t start, std::size_t count);
template <typename T> Var<T> slice_cols(Var<T> a, std::size_t start, std::size_t count);
/// out[i] = table[ids[i]]; embedding lookup and row gathers.
template <typename T> Var<T> gather_rows(Var<T> table, std::span<const std::size_t> ids);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));
/// Inverted dropout; identity outside training mode or for rate 0.
template <typename T> Var<T> dropout(Var<T> x, T rate);
template <typename T> Var<T> sum(Var<T> a);

/// Sum over rows r of weight[r] * smoothed cross entropy of logits row r
/// against gold[r], with target q = (1 - eps) * onehot(gold) + eps / V.
template <typename T>
Var<T> cross_entropy_rows(Var<T> logits, std::span<const std::size_t> gold, std::span<const T> weight, T eps);

/// Smoothed cross entropy of a single logits vector.
template <typename T> Var<T> cross_entropy_smoothed(Var<T> logits, std::size_t gold, T eps);

/// Fused LSTM cell. `gates` holds pre-activations [B x 4H] ordered i, f, g, o.
/// Returns [B x 2H] with h in the first H columns and c in the last H.
template <typename T> Var<T> lstm_cell(Var<T> gates, Var<T> c_prev);

}  // namespace ops

namespace debug {

enum class Fault { none, lstm_backward_sign };

/// Test hook: flips a sign in a chosen backward pass for the current thread.
class ScopedFault {
 public:
  explicit ScopedFault(Fault f);
  ~ScopedFault();
  ScopedFault(const ScopedFault&) = delete;
  ScopedFault& operator=(const ScopedFault&) = delete;

 private:
  Fault previous_;
};

Fault active_fault();

}  // namespace debug

}  // namespace fans
