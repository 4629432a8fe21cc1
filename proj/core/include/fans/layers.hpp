// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <type_traits>
#include <string>
#include <vector>

#include "fans/autodiff.hpp"
#include "fans/rng.hpp"
#include "fans/tensor.hpp"

namespace fans {

/// Glorot-uniform fill in +-sqrt(6 / (fan_in + fan_out)).
template <typename T>
void glorot_uniform(Tensor<T>& w, Rng& rng);

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out], empty when bias-free

  static Linear make(std::size_t in, std::size_t out, bool with_bias = true);
  std::size_t in_dim() const { return weight.shape()[0]; }
  std::size_t out_dim() const { return weight.shape()[1]; }
  void init(Rng& rng);
  Var<T> forward(Graph<T>& g, Var<T> x);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "weight", weight);
    if (!bias.empty()) f(prefix + "bias", bias);
  }
};

template <typename T>
struct Embedding {
  Tensor<T> table;  // [vocab x dim]

  static Embedding make(std::size_t vocab, std::size_t dim);
  void init(Rng& rng) { glorot_uniform(table, rng); }
  Var<T> lookup(Graph<T>& g, std::span<const std::size_t> ids);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "table", table);
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  static LayerNorm make(std::size_t dim);
  void init(Rng&);
  Var<T> forward(Graph<T>& g, Var<T> x);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "gain", gain);
    f(prefix + "bias", bias);
  }
};

// ---------------------------------------------------------------------------
// LSTM

template <typename T>
struct LstmLayer {
  Tensor<T> w_input;      // [in x 4H], gate blocks ordered i, f, g, o
  Tensor<T> w_recurrent;  // [H x 4H]
  Tensor<T> bias;         // [4H]
};

template <typename T>
struct LstmParams {
  std::size_t input_dim = 0;
  std::size_t hidden = 0;
  std::vector<LstmLayer<T>> layers;

  static LstmParams make(std::size_t input_dim, std::size_t hidden, std::size_t num_layers);
  void init(Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = prefix + std::to_string(l) + ".";
      f(p + "w_input", layers[l].w_input);
      f(p + "w_recurrent", layers[l].w_recurrent);
      f(p + "bias", layers[l].bias);
    }
  }
};

/// Per-layer hidden and cell state, each [B x H].
template <typename T>
struct LstmState {
  std::vector<Var<T>> h;
  std::vector<Var<T>> c;
};

template <typename T>
struct LstmResult {
  Var<T> outputs;  // top-layer hidden states
  LstmState<T> state;
};

/// Unidirectional stacked LSTM over one sequence [T x input_dim].
template <typename T>
LstmResult<T> lstm_forward(Graph<T>& g, LstmParams<T>& p, Var<T> inputs,
                           const std::optional<std::type_identity_t<LstmState<T>>>& state0 = std::nullopt, T dropout = T(0));

/// Same recurrence over B sequences at once. `inputs` is time-major
/// [(steps * B) x input_dim]: row t * B + b is step t of sequence b. Sequences
/// shorter than `steps` are padded at the end; their padded steps never
/// influence earlier outputs.
template <typename T>
LstmResult<T> lstm_forward_batch(Graph<T>& g, LstmParams<T>& p, Var<T> inputs, std::size_t batch,
                                 const std::optional<std::type_identity_t<LstmState<T>>>& state0 = std::nullopt, T dropout = T(0));

/// Advances the stack by one step; `x` is [B x input_dim].
template <typename T>
LstmState<T> lstm_step(Graph<T>& g, LstmParams<T>& p, Var<T> x, const LstmState<T>& state, T dropout = T(0));

template <typename T>
LstmState<T> lstm_zero_state(Graph<T>& g, const LstmParams<T>& p, std::size_t batch);

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention. Each head projects queries, keys
/// and values into a head_dim space; heads are stored side by side so that
/// columns [h * head_dim, (h + 1) * head_dim) of each matrix belong to head h.
template <typename T>
struct MhaParams {
  std::size_t heads = 1;
  std::size_t head_dim = 64;
  Tensor<T> w_query;  // [query_dim x heads*head_dim]
  Tensor<T> w_key;    // [kv_dim x heads*head_dim]
  Tensor<T> w_value;  // [kv_dim x heads*head_dim]
  Linear<T> out;      // heads*head_dim -> model_dim

  static MhaParams make(std::size_t query_dim, std::size_t kv_dim, std::size_t model_dim, std::size_t heads,
                        std::size_t head_dim);
  std::size_t query_dim() const { return w_query.shape()[0]; }
  std::size_t kv_dim() const { return w_key.shape()[0]; }
  void init(Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "w_query", w_query);
    f(prefix + "w_key", w_key);
    f(prefix + "w_value", w_value);
    out.visit(prefix + "out.", f);
  }
};

/// softmax(q W_q (k W_k)^T / sqrt(head_dim)) v W_v per head, concatenated and
/// projected. Masked entries get zero weight; a query row with no visible key
/// is a contract error.
template <typename T>
Var<T> mha(Graph<T>& g, MhaParams<T>& p, Var<T> queries, Var<T> keys, Var<T> values,
           const Mask* mask = nullptr);

/// Feed-forward scorer g(state, frame) = v . tanh(W_s state + W_e frame + b).
template <typename T>
struct AdditiveParams {
  Tensor<T> w_state;  // [state_dim x A]
  Tensor<T> w_enc;    // [enc_dim x A]
  Tensor<T> bias;     // [A]
  Tensor<T> score;    // [A x 1]

  static AdditiveParams make(std::size_t state_dim, std::size_t enc_dim, std::size_t hidden);
  void init(Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "w_state", w_state);
    f(prefix + "w_enc", w_enc);
    f(prefix + "bias", bias);
    f(prefix + "score", score);
  }
};

/// Encoder-side half of the additive scorer, W_e h_j + b for all j; reusable
/// across decoder steps.
template <typename T>
Var<T> additive_project_encoder(Graph<T>& g, AdditiveParams<T>& p, Var<T> enc);

/// Convex combination of encoder rows weighted by softmax_j g(state, h_j).
template <typename T>
Var<T> additive_attend(Graph<T>& g, AdditiveParams<T>& p, Var<T> state, Var<T> enc,
                       std::optional<std::type_identity_t<Var<T>>> enc_projected = std::nullopt);

// ---------------------------------------------------------------------------
// Transformer sublayers (pre-norm residual wiring)

template <typename T>
struct FfnParams {
  LayerNorm<T> norm;
  Linear<T> up;    // d -> d_ff
  Linear<T> down;  // d_ff -> d

  static FfnParams make(std::size_t dim, std::size_t hidden);
  void init(Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(prefix + "norm.", f);
    up.visit(prefix + "up.", f);
    down.visit(prefix + "down.", f);
  }
};

/// x + dropout(W2 relu(W1 LN(x) + b1) + b2).
template <typename T>
Var<T> ffn(Graph<T>& g, FfnParams<T>& p, Var<T> x, T dropout = T(0));

template <typename T>
struct EncoderBlock {
  LayerNorm<T> attn_norm;
  MhaParams<T> self_attn;
  FfnParams<T> feed_forward;

  static EncoderBlock make(std::size_t dim, std::size_t heads, std::size_t head_dim, std::size_t ff_dim);
  void init(Rng& rng);
  Var<T> forward(Graph<T>& g, Var<T> x, T dropout);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    attn_norm.visit(prefix + "attn_norm.", f);
    self_attn.visit(prefix + "self_attn.", f);
    feed_forward.visit(prefix + "ffn.", f);
  }
};

template <typename T>
struct DecoderBlock {
  LayerNorm<T> self_norm;
  MhaParams<T> self_attn;
  LayerNorm<T> cross_norm;
  MhaParams<T> cross_attn;
  FfnParams<T> feed_forward;

  static DecoderBlock make(std::size_t dim, std::size_t enc_dim, std::size_t heads, std::size_t head_dim,
                           std::size_t ff_dim);
  void init(Rng& rng);
  /// Causal self-attention over `x`, then cross attention into `enc`.
  Var<T> forward(Graph<T>& g, Var<T> x, Var<T> enc, T dropout);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    self_norm.visit(prefix + "self_norm.", f);
    self_attn.visit(prefix + "self_attn.", f);
    cross_norm.visit(prefix + "cross_norm.", f);
    cross_attn.visit(prefix + "cross_attn.", f);
    feed_forward.visit(prefix + "ffn.", f);
  }
};

/// Sinusoidal table: pe[t][2i] = sin(t / 10000^(2i/d)), pe[t][2i+1] = cos(same).
template <typename T>
Tensor<T> positional_encode(std::size_t length, std::size_t dim);

}  // namespace fans
