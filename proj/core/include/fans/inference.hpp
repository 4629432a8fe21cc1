// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fans/data.hpp"
#include "fans/model.hpp"

namespace fans {

/// Decoded semantics of one utterance.
struct Interpretation {
  std::string intent;
  std::vector<std::pair<std::string, std::string>> pairs;  // (tag, value)
  bool length_mismatch = false;

  bool operator==(const Interpretation&) const = default;
};

/// Zips tags and values to the shorter length; flags unequal lengths.
Interpretation pair_outputs(std::span<const std::string> tags, std::span<const std::string> values,
                            const std::string& intent);

/// Token ids produced by greedy decoding. `tag` starts with the intent; for a
/// serialized model it is the whole [intent, tag1, value1, ...] stream.
struct DecodedIds {
  std::vector<std::size_t> value;
  std::vector<std::size_t> tag;
};

/// Half-open id range [first, last) allowed at a decoding step, plus <eos>.
struct StepConstraint {
  std::size_t first = kNumReserved;
  std::size_t last = 0;  // 0 means "to the end of the vocabulary"
  bool allow_eos = true;
};

using LogitsFn = std::function<std::vector<float>(std::span<const std::size_t> prefix)>;
using ConstraintFn = std::function<StepConstraint(std::size_t step)>;

/// Argmax decoding from <sos> until <eos> or `max_len` tokens. Ties resolve to
/// the lowest id. The returned sequence excludes <sos> and <eos>.
std::vector<std::size_t> greedy_search(const LogitsFn& logits, const ConstraintFn& allowed, std::size_t max_len);

/// Encodes once and runs each decoder of the model greedily.
template <typename T>
DecodedIds greedy_decode(Model<T>& model, const Tensor<T>& features, std::size_t max_len);

/// Maps decoded ids to tokens and pairs tags with values.
Interpretation interpret(const DecodedIds& ids, const Vocabularies& vocab, bool serialized);

/// `id<TAB>intent<TAB>tag/value ...`
std::string format_decode_line(const std::string& id, const Interpretation& interp);

}  // namespace fans
