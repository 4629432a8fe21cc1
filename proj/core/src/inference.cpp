// SPDX-License-Identifier: Apache-2.0
#include "fans/inference.hpp"

#include <algorithm>

#include "fans/errors.hpp"

namespace fans {

Interpretation pair_outputs(std::span<const std::string> tags, std::span<const std::string> values,
                            const std::string& intent) {
  Interpretation out;
  out.intent = intent;
  const std::size_t n = std::min(tags.size(), values.size());
  for (std::size_t i = 0; i < n; ++i) out.pairs.emplace_back(tags[i], values[i]);
  out.length_mismatch = tags.size() != values.size();
  return out;
}

std::vector<std::size_t> greedy_search(const LogitsFn& logits, const ConstraintFn& allowed, std::size_t max_len) {
  if (max_len == 0) throw ContractError("greedy_search: max_len must be >= 1");
  std::vector<std::size_t> prefix{kSosId};
  for (std::size_t step = 0; step < max_len; ++step) {
    const auto scores = logits(prefix);
    const StepConstraint c = allowed(step);
    const std::size_t last = c.last == 0 ? scores.size() : std::min(c.last, scores.size());
    std::size_t best = scores.size();
    auto consider = [&](std::size_t id) {
      if (best == scores.size() || scores[id] > scores[best]) best = id;
    };
    // ids are visited in increasing order so ties keep the lowest id
    if (c.allow_eos && kEosId < c.first) consider(kEosId);
    for (std::size_t id = c.first; id < last; ++id) consider(id);
    if (best == scores.size()) throw ContractError("greedy_search: no token allowed at step " + std::to_string(step));
    if (best == kEosId) break;
    prefix.push_back(best);
  }
  return {prefix.begin() + 1, prefix.end()};
}

template <typename T>
DecodedIds greedy_decode(Model<T>& model, const Tensor<T>& features, std::size_t max_len) {
  const Tensor<T> enc = encode(model, features);
  const auto& cfg = model.config;
  auto logits_for = [&](Stream s) {
    return [&model, &enc, s](std::span<const std::size_t> prefix) {
      auto v = decode_step(model, s, enc, prefix);
      return std::vector<float>(v.begin(), v.end());
    };
  };
  DecodedIds out;
  if (model.serialized()) {
    const std::size_t intents = cfg.first_intent_id(), tags = cfg.first_tag_id(),
                      words = cfg.first_serialized_word_id();
    out.tag = greedy_search(
        logits_for(Stream::tag),
        [&](std::size_t step) -> StepConstraint {
          if (step == 0) return {intents, tags, false};
          if (step % 2 == 1) return {tags, words, true};
          return {words, 0, false};
        },
        max_len);
    return out;
  }
  out.tag = greedy_search(
      logits_for(Stream::tag),
      [&](std::size_t step) -> StepConstraint {
        if (step == 0) return {cfg.first_intent_id(), cfg.first_tag_id(), false};
        return {cfg.first_tag_id(), 0, true};
      },
      max_len);
  out.value = greedy_search(
      logits_for(Stream::value), [](std::size_t) { return StepConstraint{kEosId, 0, true}; }, max_len);
  return out;
}

Interpretation interpret(const DecodedIds& ids, const Vocabularies& vocab, bool serialized) {
  const Vocab& tv = serialized ? vocab.serialized_vocab() : vocab.tag_vocab();
  std::string intent = ids.tag.empty() ? std::string() : tv.token(ids.tag.front());
  std::vector<std::string> tags, values;
  if (serialized) {
    for (std::size_t i = 1; i < ids.tag.size(); ++i) (i % 2 == 1 ? tags : values).push_back(tv.token(ids.tag[i]));
  } else {
    for (std::size_t i = 1; i < ids.tag.size(); ++i) tags.push_back(tv.token(ids.tag[i]));
    for (auto id : ids.value) values.push_back(vocab.value_vocab().token(id));
  }
  return pair_outputs(tags, values, intent);
}

std::string format_decode_line(const std::string& id, const Interpretation& interp) {
  std::string line = id + "\t" + interp.intent + "\t";
  for (std::size_t i = 0; i < interp.pairs.size(); ++i) {
    if (i) line += ' ';
    line += interp.pairs[i].first + "/" + interp.pairs[i].second;
  }
  return line;
}

template DecodedIds greedy_decode<float>(Model<float>&, const Tensor<float>&, std::size_t);
template DecodedIds greedy_decode<double>(Model<double>&, const Tensor<double>&, std::size_t);

}  // namespace fans
