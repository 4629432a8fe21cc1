// SPDX-License-Identifier: Apache-2.0
#include "fans/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>

#include "fans/errors.hpp"
#include "fans/inference.hpp"
#include "fans/rng.hpp"

namespace fans {

std::vector<std::string> TrainHyper::violations() const {
  std::vector<std::string> v;
  auto need = [&](bool ok, const char* msg) {
    if (!ok) v.emplace_back(msg);
  };
  need(lambda1 >= 0.0, "lambda1 must be >= 0");
  need(lambda2 >= 0.0, "lambda2 must be >= 0");
  need(beta1 >= 0.0 && beta1 < 1.0, "beta1 must lie in [0, 1)");
  need(beta2 >= 0.0 && beta2 < 1.0, "beta2 must lie in [0, 1)");
  need(adam_eps > 0.0, "adam_eps must be > 0");
  need(lr_factor > 0.0, "lr_factor must be > 0");
  need(warmup >= 1, "warmup must be >= 1");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(max_steps >= 1, "max_steps must be >= 1");
  need(eval_interval >= 1, "eval_interval must be >= 1");
  need(patience >= 1, "patience must be >= 1");
  need(clip_norm >= 0.0, "clip_norm must be >= 0");
  return v;
}

void TrainHyper::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid training settings:";
  for (const auto& s : v) msg += "\n  " + s;
  throw ConfigError(msg);
}

// ---------------------------------------------------------------------------
// Loss

template <typename T>
LossTerms<T> compute_loss(const TeacherForced<T>& tf, const LossWeights& w) {
  if (w.lambda1 < 0.0 || w.lambda2 < 0.0) throw ContractError("compute_loss: loss weights must be non-negative");
  const T eps = static_cast<T>(w.label_smoothing);
  auto check = [](const PaddedLogits<T>& p, const char* which) {
    const std::size_t rows = p.batch * p.length;
    if (p.logits.rows() != rows || p.logits.cols() != p.vocab || p.gold.size() != rows || p.mask.size() != rows) {
      throw ShapeError(std::string("compute_loss: inconsistent ") + which + " logits " +
                       shape_string(p.logits.shape()) + " for batch " + std::to_string(p.batch) + " x length " +
                       std::to_string(p.length));
    }
  };
  LossTerms<T> out;
  std::vector<Var<T>> parts;

  if (tf.value) {
    const auto& p = *tf.value;
    check(p, "value");
    const T count = std::accumulate(p.mask.begin(), p.mask.end(), T(0));
    std::vector<T> weight(p.mask.size());
    for (std::size_t r = 0; r < weight.size(); ++r) weight[r] = p.mask[r] / count;
    auto lv = ops::cross_entropy_rows<T>(p.logits, p.gold, weight, eps);
    out.value = lv.values()[0];
    parts.push_back(lv);
  }

  const auto& p = tf.tag;
  check(p, "tag");
  std::vector<T> tag_w(p.mask.size(), T(0)), intent_w(p.mask.size(), T(0));
  T count = 0;
  for (std::size_t r = 0; r < p.mask.size(); ++r)
    if (r % p.length != 0) count += p.mask[r];
  for (std::size_t r = 0; r < p.mask.size(); ++r) {
    if (r % p.length == 0) {
      intent_w[r] = T(1) / static_cast<T>(p.batch);
    } else {
      tag_w[r] = p.mask[r] / count;
    }
  }
  auto lt = ops::cross_entropy_rows<T>(p.logits, p.gold, tag_w, eps);
  auto li = ops::cross_entropy_rows<T>(p.logits, p.gold, intent_w, eps);
  out.tag = lt.values()[0];
  out.intent = li.values()[0];
  parts.push_back(ops::scale(lt, static_cast<T>(w.lambda1)));
  parts.push_back(ops::scale(li, static_cast<T>(w.lambda2)));

  out.total = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out.total = ops::add(out.total, parts[i]);
  return out;
}

double noam_lr(std::size_t step, double k, std::size_t warmup, std::size_t d_model) {
  if (step == 0) throw ContractError("noam_lr: step must be >= 1");
  if (warmup == 0 || d_model == 0) throw ContractError("noam_lr: warmup and d_model must be >= 1");
  const double t = static_cast<double>(step), w = static_cast<double>(warmup);
  return k / std::sqrt(static_cast<double>(d_model)) * std::min(1.0 / std::sqrt(t), t * std::pow(w, -1.5));
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state, double lr, const AdamConfig& cfg) {
  if (state.m.empty() && state.t == 0) {
    for (auto* p : params) {
      state.m.emplace_back(p->size(), T(0));
      state.v.emplace_back(p->size(), T(0));
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ContractError("adam: optimizer state holds " + std::to_string(state.m.size()) + " moments for " +
                        std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->has_grad()) throw ContractError("adam: parameter " + std::to_string(i) + " has no gradient");
    if (state.m[i].size() != params[i]->size()) throw ContractError("adam: moment shape mismatch");
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto value = params[i]->values();
    const auto grad = std::as_const(*params[i]).grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double gj = grad[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double step = lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
      if (step != 0.0) value[j] = static_cast<T>(value[j] - step);
    }
  }
}

template <typename T>
double clip_grad_norm(std::span<Tensor<T>* const> params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params)
    if (p->has_grad())
      for (T x : std::as_const(*p).grad()) sq += static_cast<double>(x) * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto* p : params)
      if (p->has_grad())
        for (T& x : p->grad()) x *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Data preparation

TargetIds target_ids(const Utterance& u, const Vocabularies& vocab, bool serialized) {
  const SluTarget t = construct_targets(u.words, u.tags, u.intent);
  const Vocab& tv = serialized ? vocab.serialized_vocab() : vocab.tag_vocab();
  auto label = [&](const std::string& tok, std::size_t first, std::size_t last, const char* kind) {
    auto id = tv.find(tok);
    if (!id || *id < first || *id >= last) {
      throw DataError("utterance " + u.id + ": unknown " + kind + " '" + tok + "'");
    }
    return *id;
  };
  const std::size_t first_intent = kNumReserved, first_tag = kNumReserved + vocab.intents().size(),
                    end_tag = first_tag + vocab.tags().size();
  TargetIds ids;
  ids.tag.push_back(label(t.intent(), first_intent, first_tag, "intent"));
  for (std::size_t i = 0; i < t.values.size(); ++i) {
    const std::size_t tag = label(t.tags[i + 1], first_tag, end_tag, "tag");
    if (serialized) {
      ids.tag.push_back(tag);
      auto w = tv.find(t.values[i]);
      ids.tag.push_back(w && *w >= end_tag ? *w : kUnkId);
    } else {
      ids.tag.push_back(tag);
      ids.value.push_back(vocab.value_vocab().id_or_unk(t.values[i]));
    }
  }
  return ids;
}

std::vector<LabeledExample> prepare_examples(std::span<const Utterance> utterances, const Vocabularies& vocab,
                                             const FeatureStats& stats, bool serialized) {
  std::vector<LabeledExample> out;
  out.reserve(utterances.size());
  for (const auto& u : utterances) {
    LabeledExample ex;
    ex.id = u.id;
    ex.example.features = normalize_global(stack_frames(u.frames), stats.mean, stats.var);
    ex.example.target = target_ids(u, vocab, serialized);
    ex.reference = construct_targets(u.words, u.tags, u.intent);
    out.push_back(std::move(ex));
  }
  return out;
}

FeatureStats stacked_feature_stats(std::span<const Utterance> utterances) {
  std::vector<Tensor<float>> stacked;
  stacked.reserve(utterances.size());
  for (const auto& u : utterances) stacked.push_back(stack_frames(u.frames));
  FeatureStats s = FeatureStats::estimate(stacked);
  for (auto& x : s.mean) x = static_cast<float>(x);
  for (auto& x : s.var) x = static_cast<float>(x);
  return s;
}

// ---------------------------------------------------------------------------
// Loop

namespace {

std::vector<Example<float>> gather(std::span<const LabeledExample> data, std::span<const std::size_t> idx) {
  std::vector<Example<float>> batch;
  batch.reserve(idx.size());
  for (auto i : idx) batch.push_back(data[i].example);
  return batch;
}

LossWeights weights_for(const Model<float>& model, const TrainHyper& h) {
  return {h.lambda1, h.lambda2, model.config.label_smoothing};
}

std::string format_point(const EvalPoint& p) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\t%.4f\t%.4f", p.step, p.train_loss, p.eval_loss, p.icer, p.irer);
  return buf;
}

}  // namespace

double evaluate_loss(Model<float>& model, std::span<const LabeledExample> data, const LossWeights& w,
                     std::size_t batch_size) {
  if (data.empty()) throw DataError("evaluation set is empty");
  double total = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const auto batch = gather(data, idx);
    Graph<float> g;
    g.set_grad_enabled(false);
    auto tf = forward_teacher_forced<float>(g, model, batch);
    auto loss = compute_loss(tf, w);
    total += static_cast<double>(loss.total.values()[0]) * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(data.size());
}

std::vector<EvalRecord> decode_records(Model<float>& model, std::span<const LabeledExample> data,
                                       const Vocabularies& vocab) {
  std::vector<EvalRecord> records;
  records.reserve(data.size());
  for (const auto& ex : data) {
    const auto ids = greedy_decode(model, ex.example.features, model.config.max_decode_len);
    records.push_back({ex.id, ex.reference, interpret(ids, vocab, model.serialized())});
  }
  return records;
}

TrainResult train(Model<float>& model, std::span<const LabeledExample> train_set,
                  std::span<const LabeledExample> eval_set, const Vocabularies& vocab, const TrainHyper& hyper,
                  std::ostream* metrics_log, const CheckpointFn& checkpoint) {
  hyper.validate();
  if (train_set.empty()) throw DataError("training set is empty");
  if (eval_set.empty()) throw DataError("evaluation set is empty");

  const LossWeights weights = weights_for(model, hyper);
  const AdamConfig adam{hyper.beta1, hyper.beta2, hyper.adam_eps};
  std::vector<Tensor<float>*> params;
  for (auto& p : model.named_parameters()) params.push_back(p.tensor);
  AdamState<float> state;

  Rng order_rng = Rng::derive(hyper.seed, 0x5eed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  result.best_eval_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  std::size_t last_eval = 0;
  bool stop = false;

  if (metrics_log) *metrics_log << kMetricsHeader << '\n';

  auto evaluate = [&](std::size_t step) {
    EvalPoint pt;
    pt.step = step;
    pt.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    pt.eval_loss = evaluate_loss(model, eval_set, weights, hyper.batch_size);
    const auto records = decode_records(model, eval_set, vocab);
    pt.icer = icer(records);
    pt.irer = irer(records);
    result.log.push_back(pt);
    if (metrics_log) *metrics_log << format_point(pt) << '\n' << std::flush;
    loss_sum = 0.0;
    loss_count = 0;
    last_eval = step;
    if (checkpoint) checkpoint("last", model);
    if (pt.eval_loss < result.best_eval_loss) {
      result.best_eval_loss = pt.eval_loss;
      result.best_step = step;
      since_best = 0;
      if (checkpoint) checkpoint("best", model);
    } else if (++since_best >= hyper.patience) {
      result.early_stopped = true;
      stop = true;
    }
  };

  std::size_t step = 0;
  std::vector<std::size_t> idx;
  while (!stop && (hyper.max_epochs == 0 || result.epochs < hyper.max_epochs)) {
    order_rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size() && !stop; start += hyper.batch_size) {
      idx.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                 order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + hyper.batch_size)));
      ++step;
      const auto batch = gather(train_set, idx);
      Graph<float> g;
      g.set_training(true, Rng::derive(hyper.seed, step).next());
      auto where = [&] {
        std::string ids;
        for (auto i : idx) ids += (ids.empty() ? "" : ",") + train_set[i].id;
        return " at step " + std::to_string(step) + " (batch: " + ids + ")";
      };
      std::optional<LossTerms<float>> loss;
      try {
        auto tf = forward_teacher_forced<float>(g, model, batch);
        loss = compute_loss(tf, weights);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + where());
      }
      const double value = loss->total.values()[0];
      if (!std::isfinite(value)) throw NumericError("non-finite loss" + where());
      model.zero_grad();
      g.backward(loss->total);
      if (hyper.clip_norm > 0.0) clip_grad_norm<float>(params, hyper.clip_norm);
      adam_step<float>(params, state, noam_lr(step, hyper.lr_factor, hyper.warmup, model.config.d_model), adam);
      loss_sum += value;
      ++loss_count;
      if (step % hyper.eval_interval == 0) evaluate(step);
      if (step >= hyper.max_steps) stop = true;
    }
    ++result.epochs;
  }
  if (last_eval != step) evaluate(step);
  result.steps = step;
  return result;
}

#define FANS_INSTANTIATE_TRAINING(T)                                                                       \
  template LossTerms<T> compute_loss<T>(const TeacherForced<T>&, const LossWeights&);          \
  template void adam_step<T>(std::span<Tensor<T>* const>, AdamState<T>&, double, const AdamConfig&);      \
  template double clip_grad_norm<T>(std::span<Tensor<T>* const>, double);

FANS_INSTANTIATE_TRAINING(float)
FANS_INSTANTIATE_TRAINING(double)

}  // namespace fans
