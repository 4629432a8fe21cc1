// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fans/autodiff.hpp"
#include "fans/layers.hpp"
#include "fans/tensor.hpp"
#include "fans/vocab.hpp"

namespace fans {

enum class Variant { fans_a, fans_b, fans_c, serialized_direct };
enum class NetKind { lstm, self_attention };
enum class AttenderKind { additive, cross };

std::string to_string(Variant v);
std::string to_string(NetKind k);
std::string to_string(AttenderKind k);
Variant parse_variant(const std::string& s);
NetKind parse_net_kind(const std::string& s);
AttenderKind parse_attender(const std::string& s);

/// Architecture description. Table sizes of the decoders follow from the three
/// content vocabulary counts:
///   value decoder:      reserved + words
///   tag decoder:        reserved + intents + tags      (intents first)
///   serialized decoder: reserved + intents + tags + words
struct ModelConfig {
  Variant variant = Variant::fans_b;
  NetKind encoder = NetKind::lstm;
  std::size_t enc_layers = 2;
  std::size_t enc_width = 232;  // LSTM hidden size; self-attention encoders use d_model
  NetKind decoder = NetKind::self_attention;
  std::size_t value_dec_layers = 2;
  std::size_t tag_dec_layers = 2;
  std::size_t serial_dec_layers = 4;  // serialized_direct only
  std::size_t dec_width = 256;        // LSTM decoder hidden size
  AttenderKind attender = AttenderKind::cross;
  std::size_t input_dim = 192;
  std::size_t d_model = 128;
  std::size_t heads = 1;
  std::size_t d_ff = 800;
  std::size_t head_dim = 64;
  std::size_t additive_dim = 128;
  std::size_t num_words = 0;
  std::size_t num_intents = 0;
  std::size_t num_tags = 0;
  std::size_t max_decode_len = 32;
  double dropout = 0.1;
  double label_smoothing = 0.1;

  enum class Scale { large, small };
  /// Layer layouts of the published large (~30M) and small (~3M) models.
  static ModelConfig preset(Variant variant, Scale scale);

  std::vector<std::string> violations() const;
  /// Throws ConfigError listing every violation.
  void validate() const;

  std::size_t encoder_width() const { return encoder == NetKind::lstm ? enc_width : d_model; }
  std::size_t value_vocab_size() const { return kNumReserved + num_words; }
  std::size_t tag_vocab_size() const { return kNumReserved + num_intents + num_tags; }
  std::size_t serialized_vocab_size() const { return kNumReserved + num_intents + num_tags + num_words; }
  std::size_t first_intent_id() const { return kNumReserved; }
  std::size_t first_tag_id() const { return kNumReserved + num_intents; }
  std::size_t first_serialized_word_id() const { return kNumReserved + num_intents + num_tags; }
};

enum class ParamGroup { enc, dec_value, dec_tag };
std::string to_string(ParamGroup g);

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor;
  ParamGroup group;
};

template <typename T>
struct EncoderParams {
  LstmParams<T> lstm;
  Linear<T> input_proj;
  std::vector<EncoderBlock<T>> blocks;
  LayerNorm<T> final_norm;
};

template <typename T>
struct DecoderParams {
  std::size_t vocab = 0;
  Embedding<T> embed;
  LstmParams<T> lstm;
  AdditiveParams<T> attender;
  std::vector<DecoderBlock<T>> blocks;
  LayerNorm<T> final_norm;
  Linear<T> out;
  /// Position-0 head predicting the intent; present on tag and serialized decoders.
  std::optional<Linear<T>> intent_out;
};

/// Which decoder a call addresses. For serialized_direct models `tag` is the
/// single serialized-stream decoder.
enum class Stream { value, tag };

/// FANS model: shared encoder, slot-value decoder and slot-tag decoder whose
/// first output position carries the intent.
template <typename T>
class Model {
 public:
  ModelConfig config;
  EncoderParams<T> encoder;
  DecoderParams<T> value_decoder;  // unused by serialized_direct
  DecoderParams<T> tag_decoder;

  bool serialized() const { return config.variant == Variant::serialized_direct; }
  bool has_stream(Stream s) const { return s == Stream::tag || !serialized(); }
  DecoderParams<T>& decoder(Stream s) { return s == Stream::value ? value_decoder : tag_decoder; }
  const DecoderParams<T>& decoder(Stream s) const { return s == Stream::value ? value_decoder : tag_decoder; }

  std::vector<NamedParam<T>> named_parameters();
  std::size_t parameter_count() const;
  std::size_t parameter_count(ParamGroup group) const;
  void zero_grad();
};

template <typename T>
Model<T> build(const ModelConfig& config, std::uint64_t seed);

/// Single-decoder baseline over the interleaved [intent, tag1, value1, ...] stream.
/// Forces variant = serialized_direct.
template <typename T>
Model<T> build_serialized_baseline(ModelConfig config, std::uint64_t seed);

/// Parameter count computed from the configuration alone.
std::size_t expected_parameter_count(const ModelConfig& config);

/// h_enc [T x K] for one utterance of features [T x input_dim].
template <typename T>
Var<T> encode(Graph<T>& g, Model<T>& model, Var<T> features);

/// Encodes several utterances in one pass (LSTM encoders batch across utterances).
template <typename T>
std::vector<Var<T>> encode_batch(Graph<T>& g, Model<T>& model, std::span<const Var<T>> features);

template <typename T>
Tensor<T> encode(Model<T>& model, const Tensor<T>& features);

/// Logits [n x V] for every position of a decoder fed `inputs` (starting with <sos>).
template <typename T>
Var<T> decoder_forward(Graph<T>& g, Model<T>& model, Stream which, Var<T> enc, std::span<const std::size_t> inputs);

/// Next-token logits given a prefix that begins with <sos>.
template <typename T>
std::vector<T> decode_step(Model<T>& model, Stream which, const Tensor<T>& enc, std::span<const std::size_t> prefix);

/// Target ids for one utterance. `tag` holds z = [intent, tags...]; for the
/// serialized baseline it holds [intent, tag1, value1, ...] and `value` is empty.
struct TargetIds {
  std::vector<std::size_t> value;
  std::vector<std::size_t> tag;
};

template <typename T>
struct Example {
  Tensor<T> features;
  TargetIds target;
};

/// Decoder logits over a padded batch, row b * length + i.
template <typename T>
struct PaddedLogits {
  Var<T> logits;  // [(batch * length) x vocab]
  std::size_t batch = 0;
  std::size_t length = 0;
  std::size_t vocab = 0;
  std::vector<std::size_t> gold;  // next-token targets incl. <eos>; <pad> on padding
  std::vector<T> mask;            // 1 on real positions, 0 on padding
};

template <typename T>
struct TeacherForced {
  std::optional<PaddedLogits<T>> value;
  PaddedLogits<T> tag;
};

template <typename T>
TeacherForced<T> forward_teacher_forced(Graph<T>& g, Model<T>& model, std::span<const Example<T>> batch);

}  // namespace fans
