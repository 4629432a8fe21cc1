// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "fans/errors.hpp"
#include "fans/layers.hpp"
#include "test_support.hpp"

using namespace fans;
using fans::testing::random_tensor;

namespace {

template <typename P>
void fill(P& params, double value) {
  params.visit("", [&](const std::string&, Tensor<double>& t) {
    for (auto& x : t.values()) x = value;
  });
}

template <typename P>
void randomize(P& params, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  params.visit("", [&](const std::string&, Tensor<double>& t) {
    for (auto& x : t.values()) x = scale * rng.uniform(-1.0, 1.0);
  });
}

Tensor<double> identity(std::size_t n) {
  Tensor<double> t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// LSTM

TEST(LstmTest, ZeroWeightsGiveZeroOutputs) {
  auto p = LstmParams<double>::make(3, 4, 2);
  fill(p, 0.0);
  Graph<double> g;
  auto r = lstm_forward<double>(g, p, g.constant(random_tensor({6, 3}, 1)));
  for (double v : r.outputs.values()) EXPECT_EQ(v, 0.0);
  for (double v : r.state.c.back().values()) EXPECT_EQ(v, 0.0);
}

TEST(LstmTest, PaperEncoderShape) {
  auto p = LstmParams<float>::make(192, 612, 3);
  Rng rng(1);
  p.init(rng);
  Graph<float> g;
  auto r = lstm_forward<float>(g, p, g.constant(fans::testing::random_tensor_f({5, 192}, 2)));
  EXPECT_EQ(r.outputs.shape(), (Shape{5, 612}));
  EXPECT_EQ(r.state.h.size(), 3u);
}

TEST(LstmTest, WidthMismatchIsShapeError) {
  auto p = LstmParams<double>::make(3, 4, 1);
  Graph<double> g;
  EXPECT_THROW(lstm_forward<double>(g, p, g.constant(Tensor<double>({5, 2}))), ShapeError);
  EXPECT_THROW(lstm_forward<double>(g, p, g.constant(Tensor<double>({0, 3}))), ContractError);
}

TEST(LstmTest, MatchesHandUnrolledRecurrence) {
  auto p = LstmParams<double>::make(2, 3, 1);
  randomize(p, 5, 0.8);
  auto x = random_tensor({4, 2}, 6);
  Graph<double> g;
  auto out = lstm_forward<double>(g, p, g.constant(x)).outputs.tensor();
  const auto& L = p.layers[0];
  std::vector<double> h(3, 0.0), c(3, 0.0);
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (std::size_t t = 0; t < 4; ++t) {
    std::vector<double> a(12);
    for (std::size_t j = 0; j < 12; ++j) {
      a[j] = L.bias[j];
      for (std::size_t k = 0; k < 2; ++k) a[j] += x.at(t, k) * L.w_input.at(k, j);
      for (std::size_t k = 0; k < 3; ++k) a[j] += h[k] * L.w_recurrent.at(k, j);
    }
    for (std::size_t j = 0; j < 3; ++j) {
      c[j] = sig(a[3 + j]) * c[j] + sig(a[j]) * std::tanh(a[6 + j]);
      h[j] = sig(a[9 + j]) * std::tanh(c[j]);
      EXPECT_NEAR(out.at(t, j), h[j], 1e-14);
    }
  }
}

TEST(LstmTest, BatchedEqualsPerSequence) {
  auto p = LstmParams<double>::make(3, 4, 2);
  randomize(p, 7);
  auto a = random_tensor({5, 3}, 8), b = random_tensor({3, 3}, 9);
  Graph<double> g;
  auto ra = lstm_forward<double>(g, p, g.constant(a)).outputs.tensor();
  auto rb = lstm_forward<double>(g, p, g.constant(b)).outputs.tensor();
  // time-major interleave, b padded with zeros after its last step
  Tensor<double> inter({10, 3});
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t k = 0; k < 3; ++k) {
      inter.at(2 * t, k) = a.at(t, k);
      if (t < 3) inter.at(2 * t + 1, k) = b.at(t, k);
    }
  auto out = lstm_forward_batch<double>(g, p, g.constant(inter), 2).outputs.tensor();
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_NEAR(out.at(2 * t, j), ra.at(t, j), 1e-14);
      if (t < 3) EXPECT_NEAR(out.at(2 * t + 1, j), rb.at(t, j), 1e-14);
    }
}

// ---------------------------------------------------------------------------
// Multi-head attention

TEST(MhaTest, SingleKeyReturnsProjectedValue) {
  auto p = MhaParams<double>::make(4, 4, 4, 1, 4);
  randomize(p, 3);
  p.w_value = identity(4);
  p.out.weight = identity(4);
  for (auto& x : p.out.bias.values()) x = 0.0;
  Graph<double> g;
  auto kv = random_tensor({1, 4}, 4);
  auto q = random_tensor({3, 4}, 5);
  auto out = mha<double>(g, p, g.constant(q), g.constant(kv), g.constant(kv)).tensor();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.at(r, c), kv.at(0, c), 1e-14);
}

TEST(MhaTest, IdenticalKeysAverageValues) {
  auto p = MhaParams<double>::make(3, 3, 3, 2, 3);
  randomize(p, 11);
  Graph<double> g;
  auto q = random_tensor({2, 3}, 12);
  auto k = random_tensor({1, 3}, 13);
  Tensor<double> keys({2, 3});
  for (std::size_t c = 0; c < 3; ++c) keys.at(0, c) = keys.at(1, c) = k.at(0, c);
  auto values = random_tensor({2, 3}, 14);
  auto out = mha<double>(g, p, g.constant(q), g.constant(keys), g.constant(values)).tensor();
  Tensor<double> mean({1, 3});
  for (std::size_t c = 0; c < 3; ++c) mean.at(0, c) = 0.5 * (values.at(0, c) + values.at(1, c));
  auto single = mha<double>(g, p, g.constant(q), g.constant(k), g.constant(mean)).tensor();
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], single[i], 1e-12);
}

TEST(MhaTest, CausalMaskIgnoresFutureValues) {
  auto p = MhaParams<double>::make(4, 4, 4, 2, 3);
  randomize(p, 15);
  auto x = random_tensor({5, 4}, 16);
  const Mask causal = Mask::causal(5);
  Graph<double> g;
  auto base = mha<double>(g, p, g.constant(x), g.constant(x), g.constant(x), &causal).tensor();
  for (std::size_t j = 1; j < 5; ++j) {
    auto v = x;
    for (std::size_t c = 0; c < 4; ++c) v.at(j, c) += 3.0;
    auto out = mha<double>(g, p, g.constant(x), g.constant(x), g.constant(v), &causal).tensor();
    for (std::size_t r = 0; r < j; ++r)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out.at(r, c), base.at(r, c));
  }
}

TEST(MhaTest, FullyMaskedRowIsContractError) {
  auto p = MhaParams<double>::make(2, 2, 2, 1, 2);
  Graph<double> g;
  Mask m{2, 2, {1, 0, 0, 0}};
  auto x = g.constant(random_tensor({2, 2}, 1));
  EXPECT_THROW(mha<double>(g, p, x, x, x, &m), ContractError);
}

TEST(MhaTest, AttentionRowsAreDistributions) {
  auto p = MhaParams<double>::make(4, 6, 4, 3, 2);
  randomize(p, 17, 2.0);
  Graph<double> g;
  g.set_record_attention(true);
  mha<double>(g, p, g.constant(random_tensor({3, 4}, 18)), g.constant(random_tensor({7, 6}, 19)),
              g.constant(random_tensor({7, 6}, 19)));
  ASSERT_EQ(g.attention_log().size(), 3u);
  for (auto w : g.attention_log()) {
    ASSERT_EQ(w.cols(), 7u);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double sum = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(w.values()[r * 7 + c], 0.0);
        sum += w.values()[r * 7 + c];
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

// ---------------------------------------------------------------------------
// Additive attention

TEST(AdditiveTest, SingleFrameReturnsIt) {
  auto p = AdditiveParams<double>::make(3, 4, 5);
  randomize(p, 21);
  Graph<double> g;
  auto enc = random_tensor({1, 4}, 22);
  auto out = additive_attend<double>(g, p, g.constant(random_tensor({1, 3}, 23)), g.constant(enc)).tensor();
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out[c], enc[c], 1e-15);
}

TEST(AdditiveTest, ConstantScorerGivesColumnMean) {
  auto p = AdditiveParams<double>::make(3, 4, 5);
  randomize(p, 25);
  for (auto& x : p.w_enc.values()) x = 0.0;
  Graph<double> g;
  auto enc = random_tensor({6, 4}, 26);
  auto out = additive_attend<double>(g, p, g.constant(random_tensor({1, 3}, 27)), g.constant(enc)).tensor();
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0;
    for (std::size_t r = 0; r < 6; ++r) mean += enc.at(r, c);
    EXPECT_NEAR(out[c], mean / 6.0, 1e-14);
  }
}

TEST(AdditiveTest, DominantScoreSelectsFrame) {
  // scores g_j = 20 * tanh(h_j) with h = [atanh(0.5), -atanh(0.5)] are [10, -10]
  auto p = AdditiveParams<double>::make(1, 1, 1);
  p.w_state[0] = 0.0;
  p.w_enc[0] = 1.0;
  p.bias[0] = 0.0;
  p.score[0] = 20.0;
  const double a = std::atanh(0.5);
  auto enc = Tensor<double>::from_rows({{a}, {-a}});
  Graph<double> g;
  auto out = additive_attend<double>(g, p, g.constant(Tensor<double>({1, 1}, 0.3)), g.constant(enc)).tensor();
  EXPECT_NEAR(out[0], a, 1e-4);
}

TEST(AdditiveTest, OutputInConvexHull) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto p = AdditiveParams<double>::make(3, 4, 5);
    randomize(p, seed, 3.0);
    auto enc = random_tensor({5, 4}, seed + 50);
    Graph<double> g;
    auto out = additive_attend<double>(g, p, g.constant(random_tensor({1, 3}, seed + 60)), g.constant(enc)).tensor();
    for (std::size_t c = 0; c < 4; ++c) {
      double lo = 1e9, hi = -1e9;
      for (std::size_t r = 0; r < 5; ++r) {
        lo = std::min(lo, enc.at(r, c));
        hi = std::max(hi, enc.at(r, c));
      }
      EXPECT_GE(out[c], lo - 1e-12);
      EXPECT_LE(out[c], hi + 1e-12);
    }
  }
}

TEST(AdditiveTest, EmptyEncoderIsContractError) {
  auto p = AdditiveParams<double>::make(2, 2, 2);
  Graph<double> g;
  EXPECT_THROW(additive_attend<double>(g, p, g.constant(Tensor<double>({1, 2})), g.constant(Tensor<double>({0, 2}))),
               ContractError);
}

// ---------------------------------------------------------------------------
// Feed-forward, embeddings, positions

TEST(FfnTest, ZeroWeightsReturnInput) {
  auto p = FfnParams<double>::make(6, 10);
  randomize(p, 30);
  fill(p.up, 0.0);
  fill(p.down, 0.0);
  Graph<double> g;
  auto x = random_tensor({4, 6}, 31);
  EXPECT_EQ(ffn<double>(g, p, g.constant(x)).tensor(), x);
}

TEST(FfnTest, PreservesShape) {
  auto p = FfnParams<float>::make(256, 2048);
  Rng rng(2);
  p.init(rng);
  Graph<float> g;
  auto y = ffn<float>(g, p, g.constant(fans::testing::random_tensor_f({7, 256}, 3)));
  EXPECT_EQ(y.shape(), (Shape{7, 256}));
}

TEST(EmbeddingTest, LookupCopiesRows) {
  auto e = Embedding<double>::make(5, 3);
  Rng rng(4);
  e.init(rng);
  Graph<double> g;
  const std::vector<std::size_t> ids{4, 0, 4};
  auto out = e.lookup(g, ids).tensor();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out.at(i, c), e.table.at(ids[i], c));
  const std::vector<std::size_t> bad{5};
  EXPECT_THROW(e.lookup(g, bad), ContractError);
}

TEST(PositionalTest, RowZeroAlternates) {
  auto pe = positional_encode<double>(4, 8);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(pe.at(0, c), c % 2 == 0 ? 0.0 : 1.0);
}

TEST(PositionalTest, FirstChannelIsSine) {
  auto pe = positional_encode<double>(50, 16);
  for (std::size_t t = 0; t < 50; ++t) EXPECT_NEAR(pe.at(t, 0), std::sin(static_cast<double>(t)), 1e-12);
  EXPECT_EQ(pe, positional_encode<double>(50, 16));
  EXPECT_THROW(positional_encode<double>(3, 5), ContractError);
}

TEST(GlorotTest, WithinBound) {
  Tensor<double> w({30, 50});
  Rng rng(1);
  glorot_uniform(w, rng);
  const double bound = std::sqrt(6.0 / 80.0);
  double maxabs = 0;
  for (double x : w.values()) maxabs = std::max(maxabs, std::abs(x));
  EXPECT_LE(maxabs, bound);
  EXPECT_GT(maxabs, 0.9 * bound);
}
