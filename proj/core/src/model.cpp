// SPDX-License-Identifier: Apache-2.0
#include "fans/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fans {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::fans_a: return "fans_a";
    case Variant::fans_b: return "fans_b";
    case Variant::fans_c: return "fans_c";
    case Variant::serialized_direct: return "serialized_direct";
  }
  return "?";
}

std::string to_string(NetKind k) { return k == NetKind::lstm ? "lstm" : "self_attention"; }
std::string to_string(AttenderKind k) { return k == AttenderKind::additive ? "additive" : "cross"; }

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::enc: return "enc";
    case ParamGroup::dec_value: return "dec_value";
    case ParamGroup::dec_tag: return "dec_tag";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "fans_a") return Variant::fans_a;
  if (s == "fans_b") return Variant::fans_b;
  if (s == "fans_c") return Variant::fans_c;
  if (s == "serialized_direct") return Variant::serialized_direct;
  throw ConfigError("unknown variant '" + s + "'");
}

NetKind parse_net_kind(const std::string& s) {
  if (s == "lstm") return NetKind::lstm;
  if (s == "self_attention") return NetKind::self_attention;
  throw ConfigError("unknown network kind '" + s + "' (expected lstm or self_attention)");
}

AttenderKind parse_attender(const std::string& s) {
  if (s == "additive") return AttenderKind::additive;
  if (s == "cross") return AttenderKind::cross;
  throw ConfigError("unknown attender '" + s + "' (expected additive or cross)");
}

// ---------------------------------------------------------------------------
// ModelConfig

ModelConfig ModelConfig::preset(Variant variant, Scale scale) {
  ModelConfig c;
  c.variant = variant;
  const bool large = scale == Scale::large;
  c.d_model = large ? 256 : 128;
  c.head_dim = 64;
  switch (variant) {
    case Variant::fans_a:
      c.encoder = NetKind::lstm;
      c.decoder = NetKind::lstm;
      c.attender = AttenderKind::additive;
      c.enc_layers = c.value_dec_layers = c.tag_dec_layers = large ? 3 : 1;
      c.enc_width = c.dec_width = large ? 612 : 256;
      break;
    case Variant::fans_b:
      c.encoder = NetKind::lstm;
      c.decoder = NetKind::self_attention;
      c.attender = AttenderKind::cross;
      c.enc_layers = large ? 4 : 2;
      c.enc_width = large ? 768 : 232;
      c.value_dec_layers = c.tag_dec_layers = large ? 3 : 2;
      c.heads = large ? 4 : 1;
      c.d_ff = large ? 2048 : 800;
      break;
    case Variant::fans_c:
      c.encoder = NetKind::self_attention;
      c.decoder = NetKind::self_attention;
      c.attender = AttenderKind::cross;
      c.enc_layers = large ? 12 : 2;
      c.value_dec_layers = large ? 5 : 1;
      c.tag_dec_layers = large ? 3 : 1;
      c.heads = 4;
      c.d_ff = large ? 2048 : 1024;
      break;
    case Variant::serialized_direct:
      c.encoder = NetKind::lstm;
      c.decoder = NetKind::lstm;
      c.attender = AttenderKind::additive;
      c.enc_layers = large ? 3 : 1;
      c.enc_width = large ? 612 : 256;
      c.serial_dec_layers = large ? 4 : 1;
      c.dec_width = large ? 612 : 350;
      break;
  }
  return c;
}

std::vector<std::string> ModelConfig::violations() const {
  std::vector<std::string> v;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) v.push_back(msg);
  };
  auto layout = [&](NetKind e, NetKind d, AttenderKind a) {
    need(encoder == e, to_string(variant) + " requires a " + to_string(e) + " encoder");
    need(decoder == d, to_string(variant) + " requires " + to_string(d) + " decoders");
    need(attender == a, to_string(variant) + " requires the " + to_string(a) + " attender");
  };
  switch (variant) {
    case Variant::fans_a: layout(NetKind::lstm, NetKind::lstm, AttenderKind::additive); break;
    case Variant::fans_b: layout(NetKind::lstm, NetKind::self_attention, AttenderKind::cross); break;
    case Variant::fans_c: layout(NetKind::self_attention, NetKind::self_attention, AttenderKind::cross); break;
    case Variant::serialized_direct:
      need((decoder == NetKind::lstm) == (attender == AttenderKind::additive),
           "lstm decoders pair with the additive attender and self-attention decoders with cross attention");
      break;
  }
  need(enc_layers >= 1, "enc_layers must be >= 1");
  need(input_dim >= 1, "input_dim must be >= 1");
  if (encoder == NetKind::lstm) need(enc_width >= 1, "enc_width must be >= 1");
  if (variant == Variant::serialized_direct) {
    need(serial_dec_layers >= 1, "serial_dec_layers must be >= 1");
  } else {
    need(value_dec_layers >= 1, "value_dec_layers must be >= 1");
    need(tag_dec_layers >= 1, "tag_dec_layers must be >= 1");
  }
  need(d_model >= 2, "d_model must be >= 2");
  const bool uses_sa = encoder == NetKind::self_attention || decoder == NetKind::self_attention;
  if (uses_sa) {
    need(d_model % 2 == 0, "d_model must be even for positional encodings");
    need(heads >= 1, "heads must be >= 1");
    need(head_dim >= 1, "head_dim must be >= 1");
    need(d_ff >= 1, "d_ff must be >= 1");
  }
  if (decoder == NetKind::lstm) {
    need(dec_width >= 1, "dec_width must be >= 1");
    need(additive_dim >= 1, "additive_dim must be >= 1");
  }
  need(num_words >= 1, "num_words must be >= 1");
  need(num_intents >= 1, "num_intents must be >= 1");
  need(num_tags >= 1, "num_tags must be >= 1");
  need(max_decode_len >= 1, "max_decode_len must be >= 1");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  need(label_smoothing >= 0.0 && label_smoothing < 1.0, "label_smoothing must lie in [0, 1)");
  return v;
}

void ModelConfig::validate() const {
  auto v = violations();
  if (v.empty()) return;
  std::ostringstream os;
  os << "invalid model configuration:";
  for (const auto& s : v) os << "\n  - " << s;
  throw ConfigError(os.str());
}

// ---------------------------------------------------------------------------
// Model

namespace {

template <typename T>
void visit_decoder(DecoderParams<T>& d, const ModelConfig& c, const std::string& prefix, auto&& f) {
  d.embed.visit(prefix + "embed.", f);
  if (c.decoder == NetKind::lstm) {
    d.lstm.visit(prefix + "lstm.", f);
    d.attender.visit(prefix + "attender.", f);
  } else {
    for (std::size_t i = 0; i < d.blocks.size(); ++i) d.blocks[i].visit(prefix + "block." + std::to_string(i) + ".", f);
    d.final_norm.visit(prefix + "final_norm.", f);
  }
  d.out.visit(prefix + "out.", f);
  if (d.intent_out) d.intent_out->visit(prefix + "intent_out.", f);
}

template <typename T>
void visit_model(Model<T>& m, auto&& f) {
  const ModelConfig& c = m.config;
  auto enc = [&](const std::string& name, Tensor<T>& t) { f(name, t, ParamGroup::enc); };
  if (c.encoder == NetKind::lstm) {
    m.encoder.lstm.visit("enc.lstm.", enc);
  } else {
    m.encoder.input_proj.visit("enc.input_proj.", enc);
    for (std::size_t i = 0; i < m.encoder.blocks.size(); ++i)
      m.encoder.blocks[i].visit("enc.block." + std::to_string(i) + ".", enc);
    m.encoder.final_norm.visit("enc.final_norm.", enc);
  }
  if (!m.serialized()) {
    visit_decoder(m.value_decoder, c, "dec_value.",
                  [&](const std::string& name, Tensor<T>& t) { f(name, t, ParamGroup::dec_value); });
  }
  visit_decoder(m.tag_decoder, c, "dec_tag.",
                [&](const std::string& name, Tensor<T>& t) { f(name, t, ParamGroup::dec_tag); });
}

template <typename T>
DecoderParams<T> make_decoder(const ModelConfig& c, std::size_t vocab, std::size_t layers, bool intent_head) {
  DecoderParams<T> d;
  d.vocab = vocab;
  const std::size_t enc_dim = c.encoder_width();
  d.embed = Embedding<T>::make(vocab, c.d_model);
  std::size_t hidden;
  if (c.decoder == NetKind::lstm) {
    d.lstm = LstmParams<T>::make(c.d_model + enc_dim, c.dec_width, layers);
    d.attender = AdditiveParams<T>::make(c.dec_width, enc_dim, c.additive_dim);
    hidden = c.dec_width;
  } else {
    for (std::size_t i = 0; i < layers; ++i)
      d.blocks.push_back(DecoderBlock<T>::make(c.d_model, enc_dim, c.heads, c.head_dim, c.d_ff));
    d.final_norm = LayerNorm<T>::make(c.d_model);
    hidden = c.d_model;
  }
  d.out = Linear<T>::make(hidden, vocab);
  if (intent_head) d.intent_out = Linear<T>::make(hidden, vocab);
  return d;
}

template <typename T>
void init_decoder(DecoderParams<T>& d, const ModelConfig& c, Rng& rng) {
  d.embed.init(rng);
  if (c.decoder == NetKind::lstm) {
    d.lstm.init(rng);
    d.attender.init(rng);
  } else {
    for (auto& b : d.blocks) b.init(rng);
    d.final_norm.init(rng);
  }
  d.out.init(rng);
  if (d.intent_out) d.intent_out->init(rng);
}

}  // namespace

template <typename T>
std::vector<NamedParam<T>> Model<T>::named_parameters() {
  std::vector<NamedParam<T>> out;
  visit_model(*this, [&](const std::string& name, Tensor<T>& t, ParamGroup g) { out.push_back({name, &t, g}); });
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (auto& p : const_cast<Model*>(this)->named_parameters()) n += p.tensor->size();
  return n;
}

template <typename T>
std::size_t Model<T>::parameter_count(ParamGroup group) const {
  std::size_t n = 0;
  for (auto& p : const_cast<Model*>(this)->named_parameters())
    if (p.group == group) n += p.tensor->size();
  return n;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : named_parameters()) p.tensor->zero_grad();
}

template <typename T>
Model<T> build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const ModelConfig& c = config;
  Model<T> m;
  m.config = config;
  if (c.encoder == NetKind::lstm) {
    m.encoder.lstm = LstmParams<T>::make(c.input_dim, c.enc_width, c.enc_layers);
  } else {
    m.encoder.input_proj = Linear<T>::make(c.input_dim, c.d_model);
    for (std::size_t i = 0; i < c.enc_layers; ++i)
      m.encoder.blocks.push_back(EncoderBlock<T>::make(c.d_model, c.heads, c.head_dim, c.d_ff));
    m.encoder.final_norm = LayerNorm<T>::make(c.d_model);
  }
  if (m.serialized()) {
    m.tag_decoder = make_decoder<T>(c, c.serialized_vocab_size(), c.serial_dec_layers, true);
  } else {
    m.value_decoder = make_decoder<T>(c, c.value_vocab_size(), c.value_dec_layers, false);
    m.tag_decoder = make_decoder<T>(c, c.tag_vocab_size(), c.tag_dec_layers, true);
  }

  Rng rng(seed);
  if (c.encoder == NetKind::lstm) {
    m.encoder.lstm.init(rng);
  } else {
    m.encoder.input_proj.init(rng);
    for (auto& b : m.encoder.blocks) b.init(rng);
    m.encoder.final_norm.init(rng);
  }
  if (!m.serialized()) init_decoder(m.value_decoder, c, rng);
  init_decoder(m.tag_decoder, c, rng);
  return m;
}

template <typename T>
Model<T> build_serialized_baseline(ModelConfig config, std::uint64_t seed) {
  config.variant = Variant::serialized_direct;
  return build<T>(config, seed);
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  c.validate();
  const std::size_t k = c.encoder_width();
  auto lstm = [](std::size_t in, std::size_t h, std::size_t layers) {
    std::size_t n = 0;
    for (std::size_t l = 0; l < layers; ++l) n += ((l == 0 ? in : h) + h) * 4 * h + 4 * h;
    return n;
  };
  auto mha = [&](std::size_t q, std::size_t kv) {
    const std::size_t inner = c.heads * c.head_dim;
    return q * inner + 2 * kv * inner + inner * c.d_model + c.d_model;
  };
  const std::size_t norm = 2 * c.d_model;
  const std::size_t ffn = norm + c.d_model * c.d_ff + c.d_ff + c.d_ff * c.d_model + c.d_model;
  std::size_t n = 0;
  if (c.encoder == NetKind::lstm) {
    n += lstm(c.input_dim, c.enc_width, c.enc_layers);
  } else {
    n += c.input_dim * c.d_model + c.d_model;
    n += c.enc_layers * (norm + mha(c.d_model, c.d_model) + ffn);
    n += norm;
  }
  auto decoder = [&](std::size_t vocab, std::size_t layers, bool intent) {
    std::size_t d = vocab * c.d_model;
    std::size_t hidden;
    if (c.decoder == NetKind::lstm) {
      d += lstm(c.d_model + k, c.dec_width, layers);
      d += c.dec_width * c.additive_dim + k * c.additive_dim + c.additive_dim + c.additive_dim;
      hidden = c.dec_width;
    } else {
      d += layers * (2 * norm + mha(c.d_model, c.d_model) + mha(c.d_model, k) + ffn) + norm;
      hidden = c.d_model;
    }
    d += (hidden * vocab + vocab) * (intent ? 2 : 1);
    return d;
  };
  if (c.variant == Variant::serialized_direct) {
    n += decoder(c.serialized_vocab_size(), c.serial_dec_layers, true);
  } else {
    n += decoder(c.value_vocab_size(), c.value_dec_layers, false);
    n += decoder(c.tag_vocab_size(), c.tag_dec_layers, true);
  }
  return n;
}

// ---------------------------------------------------------------------------
// Encoder

namespace {

template <typename T>
Var<T> encode_self_attention(Graph<T>& g, Model<T>& m, Var<T> x) {
  const auto& c = m.config;
  const T drop = static_cast<T>(c.dropout);
  auto h = m.encoder.input_proj.forward(g, x);
  h = ops::add(h, g.constant(positional_encode<T>(x.rows(), c.d_model)));
  h = ops::dropout(h, drop);
  for (auto& block : m.encoder.blocks) h = block.forward(g, h, drop);
  return m.encoder.final_norm.forward(g, h);
}

template <typename T>
void check_features(const Model<T>& m, Var<T> x) {
  if (x.rows() == 0) throw ContractError("encode: empty input (T = 0)");
  if (x.cols() != m.config.input_dim) {
    throw ShapeError("encode: feature width " + std::to_string(x.cols()) + " does not match input_dim " +
                     std::to_string(m.config.input_dim));
  }
}

}  // namespace

template <typename T>
std::vector<Var<T>> encode_batch(Graph<T>& g, Model<T>& m, std::span<const Var<T>> features) {
  for (const auto& x : features) check_features(m, x);
  std::vector<Var<T>> out;
  if (features.empty()) return out;
  if (m.config.encoder == NetKind::self_attention) {
    for (const auto& x : features) out.push_back(encode_self_attention(g, m, x));
    return out;
  }
  const T drop = static_cast<T>(m.config.dropout);
  if (features.size() == 1) {
    out.push_back(ops::dropout(lstm_forward(g, m.encoder.lstm, features[0], std::nullopt, drop).outputs, drop));
    return out;
  }
  // Time-major interleave; the trailing zero row pads short sequences.
  const std::size_t b = features.size();
  std::size_t steps = 0, total = 0;
  std::vector<std::size_t> offsets;
  for (const auto& x : features) {
    offsets.push_back(total);
    total += x.rows();
    steps = std::max(steps, x.rows());
  }
  std::vector<Var<T>> parts(features.begin(), features.end());
  parts.push_back(g.constant(Tensor<T>({1, m.config.input_dim})));
  auto stacked = ops::concat_rows<T>(parts);
  std::vector<std::size_t> order(steps * b);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < b; ++i) order[t * b + i] = t < features[i].rows() ? offsets[i] + t : total;
  auto inputs = ops::gather_rows(stacked, std::span<const std::size_t>(order));
  auto outputs = lstm_forward_batch(g, m.encoder.lstm, inputs, b, std::nullopt, drop).outputs;
  outputs = ops::dropout(outputs, drop);
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<std::size_t> rows(features[i].rows());
    for (std::size_t t = 0; t < rows.size(); ++t) rows[t] = t * b + i;
    out.push_back(ops::gather_rows(outputs, std::span<const std::size_t>(rows)));
  }
  return out;
}

template <typename T>
Var<T> encode(Graph<T>& g, Model<T>& m, Var<T> features) {
  const Var<T> one[1] = {features};
  return encode_batch<T>(g, m, one)[0];
}

template <typename T>
Tensor<T> encode(Model<T>& m, const Tensor<T>& features) {
  Graph<T> g;
  g.set_grad_enabled(false);
  if (features.rank() != 2) throw ShapeError("encode: features must be [T x D], got " + shape_string(features.shape()));
  return encode(g, m, g.constant(features)).tensor();
}

// ---------------------------------------------------------------------------
// Decoders

template <typename T>
Var<T> decoder_forward(Graph<T>& g, Model<T>& m, Stream which, Var<T> enc, std::span<const std::size_t> inputs) {
  if (!m.has_stream(which)) throw ContractError("serialized model has no separate value decoder");
  auto& d = m.decoder(which);
  const auto& c = m.config;
  if (inputs.empty() || inputs[0] != kSosId) throw ContractError("decoder input must begin with <sos>");
  for (auto id : inputs) {
    if (id >= d.vocab) {
      throw ContractError("unknown token id " + std::to_string(id) + " for a decoder of " + std::to_string(d.vocab) +
                          " tokens");
    }
  }
  if (enc.cols() != c.encoder_width()) {
    throw ShapeError("decoder: encoder width " + std::to_string(enc.cols()) + " vs " +
                     std::to_string(c.encoder_width()));
  }
  const T drop = static_cast<T>(c.dropout);
  const std::size_t n = inputs.size();
  Var<T> hidden;
  if (c.decoder == NetKind::self_attention) {
    auto x = ops::scale(d.embed.lookup(g, inputs), std::sqrt(static_cast<T>(c.d_model)));
    x = ops::add(x, g.constant(positional_encode<T>(n, c.d_model)));
    x = ops::dropout(x, drop);
    for (auto& block : d.blocks) x = block.forward(g, x, enc, drop);
    hidden = d.final_norm.forward(g, x);
  } else {
    auto keys = additive_project_encoder(g, d.attender, enc);
    auto embedded = ops::dropout(d.embed.lookup(g, inputs), drop);
    LstmState<T> state = lstm_zero_state(g, d.lstm, 1);
    std::vector<Var<T>> states;
    states.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto context = additive_attend(g, d.attender, state.h.back(), enc, keys);
      const Var<T> parts[2] = {ops::slice_rows(embedded, i, 1), context};
      state = lstm_step(g, d.lstm, ops::concat_cols<T>(parts), state, drop);
      states.push_back(state.h.back());
    }
    hidden = n == 1 ? states[0] : ops::concat_rows<T>(states);
    hidden = ops::dropout(hidden, drop);
  }
  if (!d.intent_out) return d.out.forward(g, hidden);
  auto first = d.intent_out->forward(g, ops::slice_rows(hidden, 0, 1));
  if (n == 1) return first;
  const Var<T> parts[2] = {first, d.out.forward(g, ops::slice_rows(hidden, 1, n - 1))};
  return ops::concat_rows<T>(parts);
}

template <typename T>
std::vector<T> decode_step(Model<T>& m, Stream which, const Tensor<T>& enc, std::span<const std::size_t> prefix) {
  Graph<T> g;
  g.set_grad_enabled(false);
  auto logits = decoder_forward(g, m, which, g.constant(enc), prefix);
  auto v = logits.values();
  const std::size_t vocab = logits.cols();
  return std::vector<T>(v.end() - static_cast<std::ptrdiff_t>(vocab), v.end());
}

template <typename T>
TeacherForced<T> forward_teacher_forced(Graph<T>& g, Model<T>& m, std::span<const Example<T>> batch) {
  if (batch.empty()) throw ContractError("forward_teacher_forced: empty batch");
  const bool serial = m.serialized();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& t = batch[b].target;
    if (t.tag.empty()) throw DataError("utterance " + std::to_string(b) + " of batch has no intent");
    if (serial) {
      if (!t.value.empty() || t.tag.size() % 2 == 0) {
        throw DataError("utterance " + std::to_string(b) + ": serialized target is not [intent, (tag, value)*]");
      }
    } else if (t.value.size() + 1 != t.tag.size()) {
      throw DataError("utterance " + std::to_string(b) + ": " + std::to_string(t.value.size()) + " slot values but " +
                      std::to_string(t.tag.size() - 1) + " slot tags");
    }
  }
  std::vector<Var<T>> xs;
  xs.reserve(batch.size());
  for (const auto& ex : batch) xs.push_back(g.constant(ex.features));
  auto encs = encode_batch<T>(g, m, xs);

  auto run = [&](Stream which, auto target_of) {
    auto& d = m.decoder(which);
    PaddedLogits<T> out;
    out.batch = batch.size();
    out.vocab = d.vocab;
    for (const auto& ex : batch) out.length = std::max(out.length, target_of(ex).size() + 1);
    std::vector<Var<T>> rows;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& target = target_of(batch[b]);
      std::vector<std::size_t> inputs{kSosId};
      inputs.insert(inputs.end(), target.begin(), target.end());
      rows.push_back(decoder_forward(g, m, which, encs[b], inputs));
      for (auto id : target) out.gold.push_back(id);
      out.gold.push_back(kEosId);
      out.mask.insert(out.mask.end(), inputs.size(), T(1));
      const std::size_t pad = out.length - inputs.size();
      if (pad > 0) {
        rows.push_back(g.constant(Tensor<T>({pad, d.vocab})));
        out.gold.insert(out.gold.end(), pad, kPadId);
        out.mask.insert(out.mask.end(), pad, T(0));
      }
    }
    out.logits = ops::concat_rows<T>(rows);
    return out;
  };

  TeacherForced<T> result;
  if (!serial) result.value = run(Stream::value, [](const Example<T>& ex) -> const auto& { return ex.target.value; });
  result.tag = run(Stream::tag, [](const Example<T>& ex) -> const auto& { return ex.target.tag; });
  return result;
}

#define FANS_INSTANTIATE_MODEL(T)                                                                                 \
  template class Model<T>;                                                                                        \
  template Model<T> build<T>(const ModelConfig&, std::uint64_t);                                                  \
  template Model<T> build_serialized_baseline<T>(ModelConfig, std::uint64_t);                                     \
  template Var<T> encode<T>(Graph<T>&, Model<T>&, Var<T>);                                                        \
  template std::vector<Var<T>> encode_batch<T>(Graph<T>&, Model<T>&, std::span<const Var<T>>);                    \
  template Tensor<T> encode<T>(Model<T>&, const Tensor<T>&);                                                      \
  template Var<T> decoder_forward<T>(Graph<T>&, Model<T>&, Stream, Var<T>, std::span<const std::size_t>);         \
  template std::vector<T> decode_step<T>(Model<T>&, Stream, const Tensor<T>&, std::span<const std::size_t>);      \
  template TeacherForced<T> forward_teacher_forced<T>(Graph<T>&, Model<T>&, std::span<const Example<T>>);

FANS_INSTANTIATE_MODEL(float)
FANS_INSTANTIATE_MODEL(double)

}  // namespace fans
