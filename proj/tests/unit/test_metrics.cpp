// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>

#include "fans/errors.hpp"
#include "fans/metrics.hpp"
#include "fans/rng.hpp"

using namespace fans;

namespace {

EvalRecord record(const std::string& ref_intent, const std::string& hyp_intent) {
  EvalRecord r;
  r.reference.tags = {ref_intent};
  r.hypothesis.intent = hyp_intent;
  return r;
}

// Direct reading of the definitions: I / N and E / N.
struct Oracle {
  static bool wrong(const EvalRecord& r) {
    if (r.hypothesis.intent != r.reference.tags[0]) return true;
    if (r.hypothesis.length_mismatch) return true;
    std::vector<std::string> tags, values;
    for (const auto& [t, v] : r.hypothesis.pairs) {
      tags.push_back(t);
      values.push_back(v);
    }
    std::vector<std::string> ref_tags(r.reference.tags.begin() + 1, r.reference.tags.end());
    return tags != ref_tags || values != r.reference.values;
  }
  static std::pair<double, double> rates(const std::vector<EvalRecord>& rs) {
    double i = 0, e = 0;
    for (const auto& r : rs) {
      i += r.hypothesis.intent != r.reference.tags[0];
      e += wrong(r);
    }
    return {i / rs.size(), e / rs.size()};
  }
};

std::vector<EvalRecord> random_records(Rng& rng) {
  const std::vector<std::string> intents{"A", "B"}, tags{"T", "U"}, words{"x", "y", "z"};
  std::vector<EvalRecord> out(1 + rng.below(12));
  for (auto& r : out) {
    r.reference.tags = {intents[rng.below(2)]};
    const std::size_t m = rng.below(3);
    for (std::size_t k = 0; k < m; ++k) {
      r.reference.tags.push_back(tags[rng.below(2)]);
      r.reference.values.push_back(words[rng.below(3)]);
    }
    r.hypothesis.intent = rng.below(4) == 0 ? intents[rng.below(2)] : r.reference.tags[0];
    for (std::size_t k = 0; k < m; ++k) {
      const bool flip = rng.below(6) == 0;
      r.hypothesis.pairs.emplace_back(flip ? tags[rng.below(2)] : r.reference.tags[k + 1],
                                      rng.below(6) == 0 ? words[rng.below(3)] : r.reference.values[k]);
    }
    if (rng.below(8) == 0 && !r.hypothesis.pairs.empty()) r.hypothesis.pairs.pop_back();
    r.hypothesis.length_mismatch = rng.below(10) == 0;
  }
  return out;
}

}  // namespace

TEST(IcerTest, Examples) {
  std::vector<EvalRecord> rs{record("A", "A"), record("B", "B"), record("C", "C"), record("D", "C")};
  EXPECT_DOUBLE_EQ(icer(rs), 0.25);
  rs[3].hypothesis.intent = "D";
  EXPECT_DOUBLE_EQ(icer(rs), 0.0);
  for (auto& r : rs) r.hypothesis.intent = "Z";
  EXPECT_DOUBLE_EQ(icer(rs), 1.0);
  EXPECT_THROW(icer(std::vector<EvalRecord>{}), ContractError);
  EXPECT_THROW(irer(std::vector<EvalRecord>{}), ContractError);
}

TEST(IrerTest, OneWrongEntityOfTwentyOne) {
  EvalRecord r = record("I", "I");
  for (int k = 0; k < 10; ++k) {
    r.reference.tags.push_back("T" + std::to_string(k));
    r.reference.values.push_back("w" + std::to_string(k));
    r.hypothesis.pairs.emplace_back("T" + std::to_string(k), "w" + std::to_string(k));
  }
  std::vector<EvalRecord> rs{r, r};
  EXPECT_DOUBLE_EQ(irer(rs), 0.0);
  rs[0].hypothesis.pairs[6].second = "oops";
  EXPECT_DOUBLE_EQ(irer(rs), 0.5);
  EXPECT_DOUBLE_EQ(icer(rs), 0.0);
  rs[1].hypothesis.length_mismatch = true;
  EXPECT_DOUBLE_EQ(irer(rs), 1.0);
}

TEST(MetricsProperty, MatchesOracleAndOrdering) {
  Rng rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    auto rs = random_records(rng);
    const auto [oi, oe] = Oracle::rates(rs);
    EXPECT_DOUBLE_EQ(icer(rs), oi);
    EXPECT_DOUBLE_EQ(irer(rs), oe);
    EXPECT_LE(icer(rs), irer(rs));
    std::reverse(rs.begin(), rs.end());
    rng.shuffle(std::span<EvalRecord>(rs));
    EXPECT_DOUBLE_EQ(icer(rs), oi);
    EXPECT_DOUBLE_EQ(irer(rs), oe);
  }
}

TEST(RelativeIncreaseTest, Examples) {
  EXPECT_NEAR(*relative_increase(0.10, 0.13), 30.0, 1e-9);
  EXPECT_DOUBLE_EQ(*relative_increase(0.2, 0.2), 0.0);
  EXPECT_FALSE(relative_increase(0.0, 0.3).has_value());
  EXPECT_THROW(relative_increase(-0.1, 0.3), ContractError);
}

TEST(ReportTest, TextRoundTrip) {
  std::vector<EvalRecord> rs{record("A", "A"), record("B", "A"), record("C", "C")};
  auto rep = EvalReport::score(rs);
  EXPECT_EQ(rep.n, 3u);
  EXPECT_EQ(rep.to_text(), "ICER=0.3333\nIRER=0.3333\nN=3\n");

  EvalReport base;
  base.icer = 0.25;
  base.irer = 0.0;
  base.n = 3;
  rep.compare_to(base);
  const auto text = rep.to_text();
  EXPECT_NE(text.find("RI-ICER=33.3333"), std::string::npos) << text;
  EXPECT_NE(text.find("RI-IRER=n/a"), std::string::npos) << text;
  auto back = EvalReport::parse(text);
  EXPECT_TRUE(back.has_baseline);
  EXPECT_NEAR(back.icer, 0.3333, 1e-12);
  EXPECT_EQ(back.n, 3u);
  EXPECT_FALSE(back.ri_irer.has_value());
  EXPECT_THROW(EvalReport::parse("ICER=0.1\nbogus\n"), FormatError);
  EXPECT_THROW(EvalReport::parse("ICER=0.1\n"), FormatError);
}
