// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "fans/errors.hpp"
#include "fans/data.hpp"
#include "fans/rng.hpp"

using namespace fans;
namespace fs = std::filesystem;

namespace {

using Words = std::vector<std::string>;

const Words kFigureWords{"play", "Depeche", "Mode", "in", "Downstairs"};
const Words kFigureTags{"Null", "ArtistName", "ArtistName", "Null", "DeviceLocation"};

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("fans_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Tensor<float> random_frames(std::size_t t, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> x({t, d});
  for (auto& v : x.values()) v = static_cast<float>(rng.normal());
  return x;
}

constexpr const char* kSmallGrammar = R"(# tiny
noise 0.1
intent PlayMusic := play {ArtistName} in the {DeviceLocation}
intent Stop := stop
tag ArtistName : Depeche_Mode Madonna
tag DeviceLocation : kitchen Downstairs
)";

}  // namespace

// ---------------------------------------------------------------------------
// Targets

TEST(TargetsTest, FigureExample) {
  auto t = construct_targets(kFigureWords, kFigureTags, "PlayMusic");
  EXPECT_EQ(t.values, (Words{"Depeche", "Mode", "Downstairs"}));
  EXPECT_EQ(t.tags, (Words{"PlayMusic", "ArtistName", "ArtistName", "DeviceLocation"}));
  EXPECT_EQ(t.intent(), "PlayMusic");
}

TEST(TargetsTest, AllNullAndNoNull) {
  Words w{"a", "b"};
  auto none = construct_targets(w, Words{"Null", "Null"}, "X");
  EXPECT_TRUE(none.values.empty());
  EXPECT_EQ(none.tags, Words{"X"});
  auto all = construct_targets(w, Words{"T1", "T2"}, "X");
  EXPECT_EQ(all.values, w);
  EXPECT_EQ(all.tags, (Words{"X", "T1", "T2"}));
  EXPECT_THROW(construct_targets(w, Words{"Null"}, "X"), DataError);
}

TEST(TargetsTest, MatchesZipFilterOracle) {
  Rng rng(3);
  const Words vocab{"a", "b", "c", "d"};
  const Words tagset{"Null", "Null", "T1", "T2"};
  for (int trial = 0; trial < 200; ++trial) {
    Words w, t;
    const std::size_t n = rng.below(8);
    for (std::size_t i = 0; i < n; ++i) {
      w.push_back(vocab[rng.below(4)]);
      t.push_back(tagset[rng.below(4)]);
    }
    Words ov, ot{"I"};
    for (std::size_t i = 0; i < n; ++i)
      if (t[i] != "Null") {
        ov.push_back(w[i]);
        ot.push_back(t[i]);
      }
    auto got = construct_targets(w, t, "I");
    EXPECT_EQ(got.values, ov);
    EXPECT_EQ(got.tags, ot);

    // de-interleaving the serialized form reproduces the targets
    auto s = serialize_semantics(w, t);
    ASSERT_EQ(s.size(), 2 * ov.size());
    for (std::size_t i = 0; i < ov.size(); ++i) {
      EXPECT_EQ(s[2 * i], ot[i + 1]);
      EXPECT_EQ(s[2 * i + 1], ov[i]);
    }
  }
}

TEST(SerializeTest, FigureExample) {
  EXPECT_EQ(serialize_semantics(kFigureWords, kFigureTags),
            (Words{"ArtistName", "Depeche", "ArtistName", "Mode", "DeviceLocation", "Downstairs"}));
  EXPECT_TRUE(serialize_semantics(Words{"a"}, Words{"Null"}).empty());
  EXPECT_THROW(serialize_semantics(Words{"a"}, Words{}), DataError);
}

// ---------------------------------------------------------------------------
// Frames

TEST(StackTest, ShapesAndContent) {
  auto x = random_frames(9, 2, 1);
  auto s = stack_frames(x);
  EXPECT_EQ(s.shape(), (Shape{3, 6}));
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(s.at(0, 2 * k + c), x.at(k, c));
  EXPECT_EQ(stack_frames(random_frames(10, 2, 1)).rows(), 3u);
  EXPECT_EQ(stack_frames(random_frames(7, 64, 1)).cols(), 192u);
  EXPECT_THROW(stack_frames(random_frames(2, 2, 1)), DataError);
}

TEST(NormalizeTest, IdentityAndSelfStatistics) {
  auto x = random_frames(5, 3, 2);
  std::vector<double> zero(3, 0.0), one(3, 1.0);
  EXPECT_EQ(normalize_global(x, zero, one), x);

  std::vector<Tensor<float>> set;
  for (std::uint64_t s = 0; s < 4; ++s) {
    auto f = random_frames(20 + s, 3, 10 + s);
    for (std::size_t r = 0; r < f.rows(); ++r) {
      f.at(r, 0) = 5.0f + 3.0f * f.at(r, 0);
      f.at(r, 2) = 7.0f;
    }
    set.push_back(f);
  }
  auto st = FeatureStats::estimate(set);
  std::vector<double> sum(3, 0.0), sq(3, 0.0);
  std::size_t n = 0;
  for (const auto& f : set) {
    auto y = normalize_global(f, st.mean, st.var);
    for (std::size_t r = 0; r < y.rows(); ++r, ++n)
      for (std::size_t c = 0; c < 3; ++c) {
        sum[c] += y.at(r, c);
        sq[c] += static_cast<double>(y.at(r, c)) * y.at(r, c);
      }
  }
  for (std::size_t c = 0; c < 2; ++c) {
    const double mean = sum[c] / n;
    EXPECT_LT(std::abs(mean), 1e-5);
    EXPECT_NEAR(sq[c] / n - mean * mean, 1.0, 1e-3);
  }
  EXPECT_EQ(sum[2], 0.0);
  EXPECT_EQ(sq[2], 0.0);
  EXPECT_THROW(normalize_global(x, std::vector<double>(2), std::vector<double>(2, 1.0)), ShapeError);
}

// ---------------------------------------------------------------------------
// Grammar and corpus

TEST(GrammarTest, ParsesRecords) {
  auto g = Grammar::parse(kSmallGrammar);
  EXPECT_DOUBLE_EQ(g.noise, 0.1);
  ASSERT_EQ(g.templates.size(), 2u);
  EXPECT_EQ(g.intents(), (Words{"PlayMusic", "Stop"}));
  EXPECT_EQ(g.tags(), (Words{"ArtistName", "DeviceLocation"}));
  EXPECT_EQ(g.tag_values.at("ArtistName")[0], (Words{"Depeche", "Mode"}));
  EXPECT_EQ(g.words(), (Words{"Depeche", "Downstairs", "Madonna", "Mode", "in", "kitchen", "play", "stop", "the"}));
}

TEST(GrammarTest, ErrorsNameTheLine) {
  try {
    Grammar::parse("noise 0.1\nbogus record\n");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(Grammar::parse("intent A := go {Missing}\n"), FormatError);
  EXPECT_THROW(Grammar::parse("noise -1\n"), FormatError);
  EXPECT_THROW(generate_corpus(Grammar::parse("# nothing\n"), 3, 1), DataError);
}

TEST(CorpusTest, DeterministicAndWellFormed) {
  auto g = Grammar::parse(kSmallGrammar);
  auto a = generate_corpus(g, 30, 5);
  auto b = generate_corpus(g, 30, 5);
  auto c = generate_corpus(g, 30, 6);
  ASSERT_EQ(a.size(), 30u);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].words, b[i].words);
    EXPECT_EQ(a[i].frames, b[i].frames);
    EXPECT_EQ(a[i].words.size(), a[i].tags.size());
    if (!(a[i].frames == c[i].frames)) differs = true;
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(a[7].id, "utt000007");
  EXPECT_THROW(generate_corpus(g, 0, 1), ContractError);
}

TEST(CorpusTest, NearestPrototypeRecoversWords) {
  auto g = Grammar::parse(kSmallGrammar);
  auto ac = Acoustics::make(g, 17);
  for (const auto& [w, p] : ac.prototype) {
    double norm = 0;
    for (float x : p) norm += x * x;
    EXPECT_NEAR(norm, 1.0, 1e-5) << w;
  }
  auto corpus = generate_corpus(g, 200, 17);
  std::size_t right = 0, total = 0;
  for (const auto& u : corpus) {
    std::size_t row = 0;
    for (const auto& w : u.words) {
      for (std::size_t k = 0; k < ac.duration.at(w); ++k, ++row) {
        std::string best;
        double best_d = std::numeric_limits<double>::infinity();
        for (const auto& [cand, proto] : ac.prototype) {
          double d = 0;
          for (std::size_t c = 0; c < proto.size(); ++c) {
            const double diff = u.frames.at(row, c) - proto[c];
            d += diff * diff;
          }
          if (d < best_d) {
            best_d = d;
            best = cand;
          }
        }
        right += best == w;
        ++total;
      }
    }
    EXPECT_EQ(row, u.frames.rows());
  }
  EXPECT_GT(static_cast<double>(right) / total, 0.99);
}

// ---------------------------------------------------------------------------
// Files

TEST(FeatureFileTest, RoundTripAndCorruption) {
  auto dir = scratch("feat");
  auto x = random_frames(11, 7, 3);
  write_features(dir / "a.feat", x);
  EXPECT_EQ(read_features(dir / "a.feat"), x);

  auto bytes = slurp(dir / "a.feat");
  auto put = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir / name, std::ios::binary) << content;
    return dir / name;
  };
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(read_features(put("m.feat", bad_magic)), FormatError);
  EXPECT_THROW(read_features(put("t.feat", bytes.substr(0, bytes.size() - 5))), FormatError);
  auto flipped = bytes;
  flipped[30] ^= 0x10;
  EXPECT_THROW(read_features(put("c.feat", flipped)), FormatError);
  EXPECT_THROW(write_features(dir / "e.feat", Tensor<float>({0, 7})), DataError);
}

TEST(ManifestTest, RoundTripAndErrors) {
  auto dir = scratch("manifest");
  auto corpus = generate_corpus(Grammar::parse(kSmallGrammar), 3, 2);
  fs::create_directories(dir / "feats");
  for (const auto& u : corpus) write_features(dir / u.features_path, u.frames);
  write_manifest(dir / "x.manifest", corpus);
  auto loaded = load_manifest(dir / "x.manifest");
  ASSERT_EQ(loaded.utterances.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(loaded.utterances[i].id, corpus[i].id);
    EXPECT_EQ(loaded.utterances[i].intent, corpus[i].intent);
    EXPECT_EQ(loaded.utterances[i].words, corpus[i].words);
    EXPECT_EQ(loaded.utterances[i].tags, corpus[i].tags);
    EXPECT_EQ(loaded.utterances[i].frames, corpus[i].frames);
  }

  Vocab small(Words{"play", "in", "the", "stop"});
  auto unk = load_manifest(dir / "x.manifest", &small);
  EXPECT_GT(unk.unknown_words, 0u);
  for (const auto& u : unk.utterances)
    for (const auto& w : u.words) EXPECT_TRUE(small.contains(w));

  std::ofstream(dir / "bad.manifest") << "u1\tStop\tstop/Null\tfeats/a.feat\n"
                                      << "u2\tStop\tstop/Null go\tfeats/a.feat\n";
  try {
    load_manifest(dir / "bad.manifest", nullptr, false);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.manifest:2"), std::string::npos) << e.what();
  }
}

TEST(VocabTest, ReservedIdsAndFiles) {
  Vocab v(Words{"x", "y"});
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.token(kPadId), kPadToken);
  EXPECT_EQ(v.token(kUnkId), kUnkToken);
  EXPECT_EQ(*v.find("y"), 5u);
  EXPECT_EQ(v.id_or_unk("zzz"), kUnkId);
  EXPECT_THROW(Vocab(Words{"x", "x"}), DataError);
  EXPECT_THROW(v.token(6), ContractError);

  auto dir = scratch("vocab");
  Vocabularies vs(Words{"a", "b"}, Words{"I1"}, Words{"T1", "T2"});
  vs.write_dir(dir);
  auto back = Vocabularies::read_dir(dir);
  EXPECT_EQ(back, vs);
  EXPECT_EQ(back.tag_vocab().size(), kNumReserved + 3);
  EXPECT_EQ(*back.serialized_vocab().find("a"), kNumReserved + 3);

  Vocabularies clash(Words{"T1"}, Words{"I1"}, Words{"T1"});
  EXPECT_THROW(clash.serialized_vocab(), DataError);
}
