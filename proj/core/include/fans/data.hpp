// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fans/tensor.hpp"
#include "fans/vocab.hpp"

namespace fans {

inline constexpr std::string_view kNullTag = "Null";

/// One annotated utterance: raw frames plus per-word transcript annotation.
struct Utterance {
  std::string id;
  Tensor<float> frames;  // [T_raw x frame_dim]
  std::vector<std::string> words;
  std::vector<std::string> tags;  // same length as words; "Null" for non-slot words
  std::string intent;
  std::string features_path;  // relative to the manifest directory
};

/// Decoder targets: slot values y and z = [intent, slot tags...].
struct SluTarget {
  std::vector<std::string> values;
  std::vector<std::string> tags;  // tags[0] is the intent

  const std::string& intent() const { return tags.front(); }
  bool operator==(const SluTarget&) const = default;
};

/// Drops Null-tagged words and prefixes the tag sequence with the intent.
SluTarget construct_targets(std::span<const std::string> words, std::span<const std::string> tags,
                            const std::string& intent);

/// Interleaved [tag1, word1, tag2, word2, ...] over non-Null positions.
std::vector<std::string> serialize_semantics(std::span<const std::string> words, std::span<const std::string> tags);

/// Row i = concat(frames[skip*i], ..., frames[skip*i + stack - 1]); trailing
/// frames that do not fill a stack are dropped.
Tensor<float> stack_frames(const Tensor<float>& frames, std::size_t stack = 3, std::size_t skip = 3);

/// Per-dimension mean and (population) variance over every row of a feature set.
struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> var;

  static FeatureStats estimate(std::span<const Tensor<float>> features);
};

inline constexpr double kVarianceFloor = 1e-8;

/// (x - mean) / sqrt(max(var, 1e-8)) per dimension.
Tensor<float> normalize_global(const Tensor<float>& features, std::span<const double> mean, std::span<const double> var);

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Line-oriented description of a synthetic SLU domain:
///
///   # comment
///   noise 0.1
///   intent PlayMusic := play {ArtistName} in the {DeviceLocation}
///   tag ArtistName : Depeche_Mode Madonna
///
/// Underscores join the words of a multi-word slot value.
struct Grammar {
  struct PatternToken {
    bool slot = false;
    std::string text;  // literal word, or tag name for a slot
  };
  struct Template {
    std::string intent;
    std::vector<PatternToken> pattern;
  };

  std::vector<Template> templates;
  std::map<std::string, std::vector<std::vector<std::string>>> tag_values;
  double noise = 0.1;
  std::size_t frame_dim = 64;
  std::size_t min_duration = 4;
  std::size_t max_duration = 8;

  static Grammar parse(std::string_view text);
  static Grammar load(const std::filesystem::path& path);

  /// Sorted unique intents, tags and words (literals and slot-value words).
  std::vector<std::string> intents() const;
  std::vector<std::string> tags() const;
  std::vector<std::string> words() const;
};

/// Per-word unit-norm prototype frame and duration, derived from a seed.
struct Acoustics {
  std::map<std::string, std::vector<float>> prototype;
  std::map<std::string, std::size_t> duration;

  static Acoustics make(const Grammar& grammar, std::uint64_t seed);
};

/// Samples `n` utterances: uniform template, uniform slot fillers, and for each
/// word `duration` frames of prototype + N(0, noise^2).
std::vector<Utterance> generate_corpus(const Grammar& grammar, std::size_t n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Files

/// "FANSFEAT", u32 version, u32 T, u32 D, T*D f32 LE, u64 CRC-64.
void write_features(const std::filesystem::path& path, const Tensor<float>& features);
Tensor<float> read_features(const std::filesystem::path& path);

struct ManifestLoad {
  std::vector<Utterance> utterances;
  std::size_t unknown_words = 0;
};

/// Parses `id<TAB>intent<TAB>word/tag ...<TAB>features-path` lines and loads the
/// referenced features. With a word vocabulary, unknown words become <unk>.
ManifestLoad load_manifest(const std::filesystem::path& path, const Vocab* words = nullptr, bool load_frames = true);

/// Writes manifest lines; feature files are not written.
void write_manifest(const std::filesystem::path& path, std::span<const Utterance> utterances);

/// The three label inventories and the decoder vocabularies derived from them.
class Vocabularies {
 public:
  Vocabularies() = default;
  Vocabularies(std::vector<std::string> words, std::vector<std::string> intents, std::vector<std::string> tags);

  static Vocabularies from_grammar(const Grammar& grammar);
  /// Reads words.vocab, intents.vocab and tags.vocab from a directory.
  static Vocabularies read_dir(const std::filesystem::path& dir);
  void write_dir(const std::filesystem::path& dir) const;

  const std::vector<std::string>& words() const { return words_; }
  const std::vector<std::string>& intents() const { return intents_; }
  const std::vector<std::string>& tags() const { return tags_; }

  /// reserved + words
  const Vocab& value_vocab() const { return value_; }
  /// reserved + intents + tags
  const Vocab& tag_vocab() const { return tag_; }
  /// reserved + intents + tags + words; a DataError when a word collides with
  /// an intent or tag name.
  const Vocab& serialized_vocab() const;

  bool operator==(const Vocabularies& o) const {
    return words_ == o.words_ && intents_ == o.intents_ && tags_ == o.tags_;
  }

 private:
  std::vector<std::string> words_, intents_, tags_;
  Vocab value_, tag_;
  std::optional<Vocab> serialized_;
  std::string serialized_error_;
};

}  // namespace fans
