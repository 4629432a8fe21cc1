// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "fans/layers.hpp"
#include "fans/model.hpp"
#include "fans/rng.hpp"
#include "fans/training.hpp"

using namespace fans;

namespace {

Tensor<float> random(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t(std::move(shape));
  for (auto& x : t.values()) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

ModelConfig desk_config() {
  ModelConfig c = ModelConfig::preset(Variant::fans_b, ModelConfig::Scale::small);
  c.enc_layers = 1;
  c.enc_width = 128;
  c.d_model = 64;
  c.d_ff = 256;
  c.num_words = 42;
  c.num_intents = 5;
  c.num_tags = 6;
  return c;
}

Example<float> desk_example(const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  Example<float> ex;
  ex.features = random({12, c.input_dim}, seed);
  ex.target.tag.push_back(c.first_intent_id() + rng.below(c.num_intents));
  for (int i = 0; i < 3; ++i) {
    ex.target.tag.push_back(c.first_tag_id() + rng.below(c.num_tags));
    ex.target.value.push_back(kNumReserved + rng.below(c.num_words));
  }
  return ex;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = random({n, n}, 1), b = random({n, n}, 2);
  for (auto _ : state) {
    Graph<float> g;
    g.set_grad_enabled(false);
    benchmark::DoNotOptimize(ops::matmul(g.constant(a), g.constant(b)).values().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

static void BM_LstmForward(benchmark::State& state) {
  const auto hidden = static_cast<std::size_t>(state.range(0));
  auto p = LstmParams<float>::make(192, hidden, 1);
  Rng rng(3);
  p.init(rng);
  auto x = random({40, 192}, 4);
  for (auto _ : state) {
    Graph<float> g;
    g.set_grad_enabled(false);
    benchmark::DoNotOptimize(lstm_forward<float>(g, p, g.constant(x)).outputs.values().data());
  }
}
BENCHMARK(BM_LstmForward)->Arg(128)->Arg(232);

static void BM_SelfAttention(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  auto p = MhaParams<float>::make(128, 128, 128, 4, 32);
  Rng rng(5);
  p.init(rng);
  auto x = random({len, 128}, 6);
  const Mask causal = Mask::causal(len);
  for (auto _ : state) {
    Graph<float> g;
    g.set_grad_enabled(false);
    auto v = g.constant(x);
    benchmark::DoNotOptimize(mha<float>(g, p, v, v, v, &causal).values().data());
  }
}
BENCHMARK(BM_SelfAttention)->Arg(16)->Arg(64);

static void BM_TrainStep(benchmark::State& state) {
  const auto c = desk_config();
  auto model = build<float>(c, 1);
  std::vector<Example<float>> batch;
  for (std::uint64_t i = 0; i < 16; ++i) batch.push_back(desk_example(c, i));
  std::vector<Tensor<float>*> params;
  for (auto& p : model.named_parameters()) params.push_back(p.tensor);
  AdamState<float> adam;
  std::size_t step = 0;
  for (auto _ : state) {
    Graph<float> g;
    g.set_training(true, ++step);
    auto loss = compute_loss(forward_teacher_forced<float>(g, model, batch), {});
    model.zero_grad();
    g.backward(loss.total);
    clip_grad_norm<float>(params, 5.0);
    adam_step<float>(params, adam, noam_lr(step, 0.99, 1000, c.d_model), {});
  }
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
