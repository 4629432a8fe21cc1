// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fans/autodiff.hpp"
#include "fans/data.hpp"
#include "fans/metrics.hpp"
#include "fans/model.hpp"

namespace fans {

/// Optimisation and loop settings. Dropout and label smoothing live in ModelConfig.
struct TrainHyper {
  double lambda1 = 1.0;  // slot-tag sequence weight
  double lambda2 = 1.0;  // intent weight
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  double lr_factor = 0.99;  // k
  std::size_t warmup = 1000;  // w
  std::size_t batch_size = 16;
  std::size_t max_steps = 100000;
  std::size_t max_epochs = 0;  // 0: unlimited
  std::size_t eval_interval = 1000;
  std::size_t patience = 5;
  double clip_norm = 5.0;  // 0 disables clipping
  std::uint64_t seed = 1;

  std::vector<std::string> violations() const;
  void validate() const;
};

// ---------------------------------------------------------------------------
// Loss

struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double label_smoothing = 0.1;
};

template <typename T>
struct LossTerms {
  Var<T> total;
  T value = 0;   // mean over value positions incl. <eos>; 0 for serialized models
  T tag = 0;     // mean over tag (or serialized-stream) positions after the intent, incl. <eos>
  T intent = 0;  // mean over the batch of the position-0 term
};

/// L = L_value + lambda1 * L_tag + lambda2 * L_intent over a padded batch.
template <typename T>
LossTerms<T> compute_loss(const TeacherForced<T>& logits, const LossWeights& w);

/// k * d^-0.5 * min(t^-0.5, t * w^-1.5); t >= 1.
double noam_lr(std::size_t step, double k, std::size_t warmup, std::size_t d_model);

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::size_t t = 0;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

/// One bias-corrected Adam update. Every parameter must carry a gradient.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state, double lr, const AdamConfig& cfg);

/// Scales all gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
template <typename T>
double clip_grad_norm(std::span<Tensor<T>* const> params, double max_norm);

// ---------------------------------------------------------------------------
// Data preparation

struct LabeledExample {
  std::string id;
  Example<float> example;
  SluTarget reference;
};

/// Maps an annotated utterance to decoder target ids.
TargetIds target_ids(const Utterance& u, const Vocabularies& vocab, bool serialized);

/// Stacks, normalizes and labels utterances.
std::vector<LabeledExample> prepare_examples(std::span<const Utterance> utterances, const Vocabularies& vocab,
                                             const FeatureStats& stats, bool serialized);

/// Statistics of the stacked training features, rounded to float so that stored
/// checkpoints reproduce them exactly.
FeatureStats stacked_feature_stats(std::span<const Utterance> utterances);

// ---------------------------------------------------------------------------
// Loop

struct EvalPoint {
  std::size_t step = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double icer = 0.0;
  double irer = 0.0;
};

struct TrainResult {
  std::vector<EvalPoint> log;
  std::size_t steps = 0;
  std::size_t epochs = 0;
  std::size_t best_step = 0;
  double best_eval_loss = 0.0;
  bool early_stopped = false;
};

/// Called with "last" after every evaluation and "best" when eval loss improves.
using CheckpointFn = std::function<void(const std::string& kind, Model<float>& model)>;

/// Mean eval loss (dropout off) over a labeled set.
double evaluate_loss(Model<float>& model, std::span<const LabeledExample> data, const LossWeights& w,
                     std::size_t batch_size);

/// Greedy-decodes every example and scores it.
std::vector<EvalRecord> decode_records(Model<float>& model, std::span<const LabeledExample> data,
                                       const Vocabularies& vocab);

/// Teacher-forced mini-batch training with periodic evaluation, checkpointing and
/// early stopping. Writes the tab-separated metrics log to `metrics_log` when given.
TrainResult train(Model<float>& model, std::span<const LabeledExample> train_set,
                  std::span<const LabeledExample> eval_set, const Vocabularies& vocab, const TrainHyper& hyper,
                  std::ostream* metrics_log = nullptr, const CheckpointFn& checkpoint = {});

inline constexpr std::string_view kMetricsHeader = "step\ttrain_loss\teval_loss\ticer\tirer";

}  // namespace fans
