// SPDX-License-Identifier: Apache-2.0
#include "fans/layers.hpp"

#include <cmath>

namespace fans {

template <typename T>
void glorot_uniform(Tensor<T>& w, Rng& rng) {
  const std::size_t fan_in = w.rows();
  const std::size_t fan_out = w.cols();
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& x : w.values()) x = static_cast<T>(rng.uniform(-limit, limit));
}

namespace {

template <typename T>
Tensor<T> param_tensor(Shape shape, T fill = T(0)) {
  Tensor<T> t(std::move(shape), fill);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Linear<T> Linear<T>::make(std::size_t in, std::size_t out, bool with_bias) {
  Linear l;
  l.weight = param_tensor<T>({in, out});
  if (with_bias) l.bias = param_tensor<T>({out});
  return l;
}

template <typename T>
void Linear<T>::init(Rng& rng) {
  glorot_uniform(weight, rng);
  for (auto& b : bias.values()) b = T(0);
}

template <typename T>
Var<T> Linear<T>::forward(Graph<T>& g, Var<T> x) {
  auto y = ops::matmul(x, g.param(weight));
  if (!bias.empty()) y = ops::add_row(y, g.param(bias));
  return y;
}

template <typename T>
Embedding<T> Embedding<T>::make(std::size_t vocab, std::size_t dim) {
  return Embedding{param_tensor<T>({vocab, dim})};
}

template <typename T>
Var<T> Embedding<T>::lookup(Graph<T>& g, std::span<const std::size_t> ids) {
  return ops::gather_rows(g.param(table), ids);
}

template <typename T>
LayerNorm<T> LayerNorm<T>::make(std::size_t dim) {
  return LayerNorm{param_tensor<T>({dim}, T(1)), param_tensor<T>({dim})};
}

template <typename T>
void LayerNorm<T>::init(Rng&) {
  for (auto& x : gain.values()) x = T(1);
  for (auto& x : bias.values()) x = T(0);
}

template <typename T>
Var<T> LayerNorm<T>::forward(Graph<T>& g, Var<T> x) {
  return ops::layer_norm(x, g.param(gain), g.param(bias));
}

// ---------------------------------------------------------------------------
// LSTM

template <typename T>
LstmParams<T> LstmParams<T>::make(std::size_t input_dim, std::size_t hidden, std::size_t num_layers) {
  LstmParams p;
  p.input_dim = input_dim;
  p.hidden = hidden;
  for (std::size_t l = 0; l < num_layers; ++l) {
    const std::size_t in = l == 0 ? input_dim : hidden;
    p.layers.push_back(LstmLayer<T>{param_tensor<T>({in, 4 * hidden}), param_tensor<T>({hidden, 4 * hidden}),
                                    param_tensor<T>({4 * hidden})});
  }
  return p;
}

template <typename T>
void LstmParams<T>::init(Rng& rng) {
  for (auto& layer : layers) {
    glorot_uniform(layer.w_input, rng);
    glorot_uniform(layer.w_recurrent, rng);
    for (auto& b : layer.bias.values()) b = T(0);
  }
}

template <typename T>
LstmState<T> lstm_zero_state(Graph<T>& g, const LstmParams<T>& p, std::size_t batch) {
  LstmState<T> s;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    s.h.push_back(g.constant(Tensor<T>({batch, p.hidden})));
    s.c.push_back(g.constant(Tensor<T>({batch, p.hidden})));
  }
  return s;
}

namespace {

template <typename T>
void check_state(const LstmParams<T>& p, const LstmState<T>& s, std::size_t batch) {
  if (s.h.size() != p.layers.size() || s.c.size() != p.layers.size()) {
    throw ShapeError("lstm: initial state has " + std::to_string(s.h.size()) + " layers, expected " +
                     std::to_string(p.layers.size()));
  }
  for (std::size_t l = 0; l < s.h.size(); ++l) {
    const Shape want{batch, p.hidden};
    if (s.h[l].shape() != want || s.c[l].shape() != want) {
      throw ShapeError("lstm: initial state of layer " + std::to_string(l) + " is not " + shape_string(want));
    }
  }
}

}  // namespace

template <typename T>
LstmResult<T> lstm_forward_batch(Graph<T>& g, LstmParams<T>& p, Var<T> inputs, std::size_t batch,
                                 const std::optional<std::type_identity_t<LstmState<T>>>& state0, T dropout) {
  if (p.layers.empty()) throw ContractError("lstm: no layers");
  if (inputs.cols() != p.input_dim) {
    throw ShapeError("lstm: input width " + std::to_string(inputs.cols()) + " does not match expected " +
                     std::to_string(p.input_dim));
  }
  if (batch == 0 || inputs.rows() % batch != 0) {
    throw ShapeError("lstm: " + std::to_string(inputs.rows()) + " input rows are not a multiple of batch " +
                     std::to_string(batch));
  }
  const std::size_t steps = inputs.rows() / batch;
  const std::size_t h = p.hidden;
  LstmState<T> state = state0 ? *state0 : lstm_zero_state(g, p, batch);
  check_state(p, state, batch);

  Var<T> layer_in = inputs;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    if (l > 0) layer_in = ops::dropout(layer_in, dropout);
    auto projected = ops::add_row(ops::matmul(layer_in, g.param(layer.w_input)), g.param(layer.bias));
    auto w_rec = g.param(layer.w_recurrent);
    Var<T> hs = state.h[l];
    Var<T> cs = state.c[l];
    std::vector<Var<T>> outputs;
    outputs.reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      auto gates = ops::add(ops::slice_rows(projected, t * batch, batch), ops::matmul(hs, w_rec));
      auto cell = ops::lstm_cell(gates, cs);
      hs = ops::slice_cols(cell, 0, h);
      cs = ops::slice_cols(cell, h, h);
      outputs.push_back(hs);
    }
    state.h[l] = hs;
    state.c[l] = cs;
    layer_in = steps == 1 ? outputs[0] : ops::concat_rows<T>(outputs);
  }
  return LstmResult<T>{layer_in, state};
}

template <typename T>
LstmResult<T> lstm_forward(Graph<T>& g, LstmParams<T>& p, Var<T> inputs, const std::optional<std::type_identity_t<LstmState<T>>>& state0,
                           T dropout) {
  if (inputs.rows() == 0) throw ContractError("lstm: empty input sequence");
  return lstm_forward_batch(g, p, inputs, 1, state0, dropout);
}

template <typename T>
LstmState<T> lstm_step(Graph<T>& g, LstmParams<T>& p, Var<T> x, const LstmState<T>& state, T dropout) {
  return lstm_forward_batch(g, p, x, x.rows(), state, dropout).state;
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
MhaParams<T> MhaParams<T>::make(std::size_t query_dim, std::size_t kv_dim, std::size_t model_dim,
                                std::size_t heads, std::size_t head_dim) {
  if (heads == 0 || head_dim == 0) throw ConfigError("attention: heads and head_dim must be positive");
  MhaParams p;
  p.heads = heads;
  p.head_dim = head_dim;
  const std::size_t inner = heads * head_dim;
  p.w_query = param_tensor<T>({query_dim, inner});
  p.w_key = param_tensor<T>({kv_dim, inner});
  p.w_value = param_tensor<T>({kv_dim, inner});
  p.out = Linear<T>::make(inner, model_dim);
  return p;
}

template <typename T>
void MhaParams<T>::init(Rng& rng) {
  glorot_uniform(w_query, rng);
  glorot_uniform(w_key, rng);
  glorot_uniform(w_value, rng);
  out.init(rng);
}

template <typename T>
Var<T> mha(Graph<T>& g, MhaParams<T>& p, Var<T> queries, Var<T> keys, Var<T> values, const Mask* mask) {
  if (queries.cols() != p.query_dim()) {
    throw ShapeError("mha: query width " + std::to_string(queries.cols()) + " vs " + std::to_string(p.query_dim()));
  }
  if (keys.cols() != p.kv_dim() || values.cols() != p.kv_dim()) {
    throw ShapeError("mha: key/value width does not match " + std::to_string(p.kv_dim()));
  }
  if (keys.rows() != values.rows()) throw ShapeError("mha: key and value counts differ");
  if (keys.rows() == 0) throw ContractError("mha: no keys to attend to");

  const std::size_t tq = queries.rows(), tk = keys.rows();
  Mask full;
  if (!mask) {
    full.rows = tq;
    full.cols = tk;
    full.allowed.assign(tq * tk, 1);
    mask = &full;
  }
  auto q = ops::matmul(queries, g.param(p.w_query));
  auto k = ops::matmul(keys, g.param(p.w_key));
  auto v = ops::matmul(values, g.param(p.w_value));
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(p.head_dim));
  std::vector<Var<T>> contexts;
  contexts.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    auto qh = p.heads == 1 ? q : ops::slice_cols(q, h * p.head_dim, p.head_dim);
    auto kh = p.heads == 1 ? k : ops::slice_cols(k, h * p.head_dim, p.head_dim);
    auto vh = p.heads == 1 ? v : ops::slice_cols(v, h * p.head_dim, p.head_dim);
    auto scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt);
    auto weights = ops::masked_softmax_rows(scores, *mask);
    if (g.record_attention()) g.attention_log().push_back(weights);
    contexts.push_back(ops::matmul(weights, vh));
  }
  auto joined = p.heads == 1 ? contexts[0] : ops::concat_cols<T>(contexts);
  return p.out.forward(g, joined);
}

template <typename T>
AdditiveParams<T> AdditiveParams<T>::make(std::size_t state_dim, std::size_t enc_dim, std::size_t hidden) {
  return AdditiveParams{param_tensor<T>({state_dim, hidden}), param_tensor<T>({enc_dim, hidden}),
                        param_tensor<T>({hidden}), param_tensor<T>({hidden, 1})};
}

template <typename T>
void AdditiveParams<T>::init(Rng& rng) {
  glorot_uniform(w_state, rng);
  glorot_uniform(w_enc, rng);
  for (auto& b : bias.values()) b = T(0);
  glorot_uniform(score, rng);
}

template <typename T>
Var<T> additive_project_encoder(Graph<T>& g, AdditiveParams<T>& p, Var<T> enc) {
  if (enc.cols() != p.w_enc.shape()[0]) {
    throw ShapeError("additive attention: encoder width " + std::to_string(enc.cols()) + " vs " +
                     std::to_string(p.w_enc.shape()[0]));
  }
  return ops::add_row(ops::matmul(enc, g.param(p.w_enc)), g.param(p.bias));
}

template <typename T>
Var<T> additive_attend(Graph<T>& g, AdditiveParams<T>& p, Var<T> state, Var<T> enc, std::optional<std::type_identity_t<Var<T>>> enc_projected) {
  if (enc.rows() == 0) throw ContractError("additive attention: empty encoder sequence");
  if (state.rows() != 1 || state.cols() != p.w_state.shape()[0]) {
    throw ShapeError("additive attention: state " + shape_string(state.shape()) + " vs width " +
                     std::to_string(p.w_state.shape()[0]));
  }
  Var<T> keys = enc_projected ? *enc_projected : additive_project_encoder(g, p, enc);
  auto query = ops::matmul(state, g.param(p.w_state));
  auto hidden = ops::tanh(ops::add_row(keys, query));
  auto scores = ops::transpose(ops::matmul(hidden, g.param(p.score)));  // [1 x T]
  auto weights = ops::softmax(scores, 1);
  if (g.record_attention()) g.attention_log().push_back(weights);
  return ops::matmul(weights, enc);
}

// ---------------------------------------------------------------------------
// Transformer sublayers

template <typename T>
FfnParams<T> FfnParams<T>::make(std::size_t dim, std::size_t hidden) {
  return FfnParams{LayerNorm<T>::make(dim), Linear<T>::make(dim, hidden), Linear<T>::make(hidden, dim)};
}

template <typename T>
void FfnParams<T>::init(Rng& rng) {
  norm.init(rng);
  up.init(rng);
  down.init(rng);
}

template <typename T>
Var<T> ffn(Graph<T>& g, FfnParams<T>& p, Var<T> x, T dropout) {
  if (x.cols() != p.up.in_dim()) {
    throw ShapeError("ffn: input width " + std::to_string(x.cols()) + " vs " + std::to_string(p.up.in_dim()));
  }
  auto inner = ops::relu(p.up.forward(g, p.norm.forward(g, x)));
  return ops::add(x, ops::dropout(p.down.forward(g, inner), dropout));
}

template <typename T>
EncoderBlock<T> EncoderBlock<T>::make(std::size_t dim, std::size_t heads, std::size_t head_dim, std::size_t ff_dim) {
  return EncoderBlock{LayerNorm<T>::make(dim), MhaParams<T>::make(dim, dim, dim, heads, head_dim),
                      FfnParams<T>::make(dim, ff_dim)};
}

template <typename T>
void EncoderBlock<T>::init(Rng& rng) {
  attn_norm.init(rng);
  self_attn.init(rng);
  feed_forward.init(rng);
}

template <typename T>
Var<T> EncoderBlock<T>::forward(Graph<T>& g, Var<T> x, T dropout) {
  auto normed = attn_norm.forward(g, x);
  x = ops::add(x, ops::dropout(mha(g, self_attn, normed, normed, normed), dropout));
  return ffn(g, feed_forward, x, dropout);
}

template <typename T>
DecoderBlock<T> DecoderBlock<T>::make(std::size_t dim, std::size_t enc_dim, std::size_t heads, std::size_t head_dim,
                                      std::size_t ff_dim) {
  return DecoderBlock{LayerNorm<T>::make(dim), MhaParams<T>::make(dim, dim, dim, heads, head_dim),
                      LayerNorm<T>::make(dim), MhaParams<T>::make(dim, enc_dim, dim, heads, head_dim),
                      FfnParams<T>::make(dim, ff_dim)};
}

template <typename T>
void DecoderBlock<T>::init(Rng& rng) {
  self_norm.init(rng);
  self_attn.init(rng);
  cross_norm.init(rng);
  cross_attn.init(rng);
  feed_forward.init(rng);
}

template <typename T>
Var<T> DecoderBlock<T>::forward(Graph<T>& g, Var<T> x, Var<T> enc, T dropout) {
  const Mask causal = Mask::causal(x.rows());
  auto normed = self_norm.forward(g, x);
  x = ops::add(x, ops::dropout(mha(g, self_attn, normed, normed, normed, &causal), dropout));
  auto query = cross_norm.forward(g, x);
  x = ops::add(x, ops::dropout(mha(g, cross_attn, query, enc, enc), dropout));
  return ffn(g, feed_forward, x, dropout);
}

template <typename T>
Tensor<T> positional_encode(std::size_t length, std::size_t dim) {
  if (dim % 2 != 0) throw ContractError("positional_encode: dimension must be even, got " + std::to_string(dim));
  Tensor<T> pe({length, dim});
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      const double angle = static_cast<double>(t) * freq;
      pe.at(t, 2 * i) = static_cast<T>(std::sin(angle));
      pe.at(t, 2 * i + 1) = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

#define FANS_INSTANTIATE_LAYERS(T)                                                                             \
  template void glorot_uniform<T>(Tensor<T>&, Rng&);                                                           \
  template struct Linear<T>;                                                                                   \
  template struct Embedding<T>;                                                                                \
  template struct LayerNorm<T>;                                                                                \
  template struct LstmParams<T>;                                                                               \
  template struct MhaParams<T>;                                                                                \
  template struct AdditiveParams<T>;                                                                           \
  template struct FfnParams<T>;                                                                                \
  template struct EncoderBlock<T>;                                                                             \
  template struct DecoderBlock<T>;                                                                             \
  template LstmState<T> lstm_zero_state<T>(Graph<T>&, const LstmParams<T>&, std::size_t);                      \
  template LstmResult<T> lstm_forward_batch<T>(Graph<T>&, LstmParams<T>&, Var<T>, std::size_t,                 \
                                               const std::optional<LstmState<T>>&, T);                         \
  template LstmResult<T> lstm_forward<T>(Graph<T>&, LstmParams<T>&, Var<T>, const std::optional<LstmState<T>>&, \
                                         T);                                                                   \
  template LstmState<T> lstm_step<T>(Graph<T>&, LstmParams<T>&, Var<T>, const LstmState<T>&, T);              \
  template Var<T> mha<T>(Graph<T>&, MhaParams<T>&, Var<T>, Var<T>, Var<T>, const Mask*);                       \
  template Var<T> additive_project_encoder<T>(Graph<T>&, AdditiveParams<T>&, Var<T>);                          \
  template Var<T> additive_attend<T>(Graph<T>&, AdditiveParams<T>&, Var<T>, Var<T>, std::optional<Var<T>>);    \
  template Var<T> ffn<T>(Graph<T>&, FfnParams<T>&, Var<T>, T);                                                 \
  template Tensor<T> positional_encode<T>(std::size_t, std::size_t);

FANS_INSTANTIATE_LAYERS(float)
FANS_INSTANTIATE_LAYERS(double)

}  // namespace fans
