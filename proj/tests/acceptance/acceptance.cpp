// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fails.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fans/config_file.hpp"
#include "fans/data.hpp"
#include "fans/metrics.hpp"
#include "fans/model.hpp"
#include "fans/rng.hpp"
#include "fans/training.hpp"

namespace fs = std::filesystem;
using namespace fans;

namespace {

// Tolerances and thresholds.
constexpr double kGradcheckSeconds = 120.0;
constexpr double kAttentionRowTol = 1e-6;
constexpr std::size_t kTargetTrials = 1000;
constexpr std::size_t kMetricTrials = 100;
constexpr std::size_t kParamLow = 1'800'000, kParamHigh = 2'800'000;
constexpr std::size_t kCorpusSize = 2400;
constexpr const char* kCorpusSplit = "2000/200/200";
constexpr std::uint64_t kCorpusSeed = 11;
constexpr double kMaxTestIcer = 0.02;
constexpr double kMaxTestIrer = 0.10;
constexpr std::size_t kMaxEpochs = 20;
constexpr double kMaxTrainMinutes = 30.0;
constexpr double kBudgetTolerance = 0.10;
constexpr double kLossSumTol = 1e-10;
const std::vector<std::uint64_t> kBaselineSeeds{1, 2, 3};

const fs::path kWork = FANS_WORK_DIR;
const fs::path kConfigs = FANS_CONFIG_DIR;

struct Run {
  int code = -1;
  std::string out;
  double seconds = 0;
};

Run cli(const std::string& args) {
  const auto start = std::chrono::steady_clock::now();
  Run r;
  FILE* p = popen((std::string(FANS_CLI) + " " + args + " 2>&1").c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    if (slurp(e.path()) != slurp(b / fs::relative(e.path(), a))) return false;
  }
  return files > 0;
}

// Copies a config file, replacing the given keys.
fs::path derive_config(const fs::path& base, const std::string& name,
                       const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::ifstream in(base);
  std::ostringstream out;
  for (std::string line; std::getline(in, line);) {
    bool replaced = false;
    for (const auto& [k, v] : overrides)
      if (line.rfind(k + "=", 0) == 0) replaced = true;
    if (!replaced) out << line << '\n';
  }
  for (const auto& [k, v] : overrides) out << k << '=' << v << '\n';
  const fs::path p = kWork / name;
  std::ofstream(p) << out.str();
  return p;
}

std::size_t parse_count(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (line.rfind(key, 0) == 0) return std::stoull(line.substr(line.find_last_of(' ') + 1));
  return 0;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int number, const std::string& title, const std::function<Outcome()>& check) {
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::printf("criterion %d %-28s %s  %s\n", number, title.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
  std::fflush(stdout);
}

char buf[512];
template <typename... A>
std::string fmt(const char* f, A... a) {
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

ModelConfig small_config(Variant v) {
  ModelConfig c = ModelConfig::preset(v, ModelConfig::Scale::small);
  c.input_dim = 6;
  c.enc_layers = 2;
  c.enc_width = 10;
  c.d_model = 8;
  c.heads = 2;
  c.head_dim = 4;
  c.d_ff = 12;
  c.dec_width = 10;
  c.additive_dim = 6;
  c.value_dec_layers = c.tag_dec_layers = c.serial_dec_layers = 2;
  c.num_words = 9;
  c.num_intents = 3;
  c.num_tags = 4;
  c.dropout = 0.0;
  return c;
}

Example<double> random_example(const ModelConfig& c, Rng& rng) {
  Example<double> ex;
  ex.features = Tensor<double>({3 + rng.below(6), c.input_dim});
  for (auto& x : ex.features.values()) x = rng.uniform(-1.0, 1.0);
  const bool serial = c.variant == Variant::serialized_direct;
  ex.target.tag.push_back(c.first_intent_id() + rng.below(c.num_intents));
  const std::size_t m = rng.below(4);
  for (std::size_t i = 0; i < m; ++i) {
    ex.target.tag.push_back(c.first_tag_id() + rng.below(c.num_tags));
    if (serial) {
      ex.target.tag.push_back(c.first_serialized_word_id() + rng.below(c.num_words));
    } else {
      ex.target.value.push_back(kNumReserved + rng.below(c.num_words));
    }
  }
  return ex;
}

Model<double> build_variant(const ModelConfig& c, std::uint64_t seed) {
  return c.variant == Variant::serialized_direct ? build_serialized_baseline<double>(c, seed) : build<double>(c, seed);
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const Run r = cli("gradcheck");
  std::size_t rows = 0;
  std::istringstream in(r.out);
  for (std::string l; std::getline(in, l);) rows += l.find("max_rel_err=") != std::string::npos;
  const bool ok = r.code == 0 && rows >= 14 && r.seconds < kGradcheckSeconds;
  return {ok, fmt("%zu components, exit %d, %.1fs", rows, r.code, r.seconds)};
}

Outcome attention_and_causality() {
  double worst_row = 0;
  std::size_t rows = 0, causal_checks = 0, causal_breaks = 0;
  Rng rng(2024);
  for (Variant v : {Variant::fans_a, Variant::fans_b, Variant::fans_c, Variant::serialized_direct}) {
    const auto c = small_config(v);
    auto m = build_variant(c, 5);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Example<double>> batch{random_example(c, rng), random_example(c, rng)};
      Graph<double> g;
      g.set_record_attention(true);
      auto base = forward_teacher_forced(g, m, std::span<const Example<double>>(batch));
      for (const auto& w : g.attention_log()) {
        const auto vals = w.values();
        for (std::size_t r = 0; r < w.rows(); ++r, ++rows) {
          double s = 0;
          for (std::size_t k = 0; k < w.cols(); ++k) s += vals[r * w.cols() + k];
          worst_row = std::max(worst_row, std::abs(s - 1.0));
        }
      }
      // perturb one target after position i; logits up to i must not move
      auto check_stream = [&](bool value_stream) {
        const auto& seq = value_stream ? batch[0].target.value : batch[0].target.tag;
        for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
          auto mod = batch;
          auto& s = value_stream ? mod[0].target.value : mod[0].target.tag;
          const std::size_t j = i + 1 + rng.below(seq.size() - i - 1);
          const bool serial_word = v == Variant::serialized_direct && j % 2 == 0;
          const bool serial_tag = v == Variant::serialized_direct && j % 2 == 1;
          const std::size_t lo = value_stream ? kNumReserved : serial_word ? c.first_serialized_word_id() : c.first_tag_id();
          const std::size_t hi = value_stream  ? c.value_vocab_size()
                                 : serial_tag  ? c.first_serialized_word_id()
                                 : serial_word ? c.serialized_vocab_size()
                                               : c.tag_vocab_size();
          s[j] = lo + (s[j] - lo + 1 + rng.below(hi - lo - 1)) % (hi - lo);
          Graph<double> g2;
          auto pert = forward_teacher_forced(g2, m, std::span<const Example<double>>(mod));
          const auto& a = value_stream ? *base.value : base.tag;
          const auto& b = value_stream ? *pert.value : pert.tag;
          const auto av = a.logits.values(), bv = b.logits.values();
          ++causal_checks;
          for (std::size_t r = 0; r <= i; ++r)
            for (std::size_t k = 0; k < a.vocab; ++k)
              if (av[r * a.vocab + k] != bv[r * b.vocab + k]) {
                ++causal_breaks;
                r = i + 1;
                break;
              }
        }
      };
      check_stream(false);
      if (!m.serialized()) check_stream(true);
    }
  }
  const bool ok = worst_row <= kAttentionRowTol && causal_breaks == 0 && causal_checks > 0 && rows > 0;
  return {ok, fmt("%zu rows, max |sum-1|=%.2e; %zu/%zu perturbations leave earlier logits bit-identical", rows,
                  worst_row, causal_checks - causal_breaks, causal_checks)};
}

Outcome target_oracle() {
  Rng rng(77);
  const std::vector<std::string> words{"play", "the", "Depeche", "Mode", "in", "kitchen", "at", "seven"};
  const std::vector<std::string> tags{"Null", "Null", "ArtistName", "DeviceLocation", "Time"};
  std::size_t bad = 0;
  for (std::size_t trial = 0; trial < kTargetTrials; ++trial) {
    const std::size_t n = rng.below(12);
    std::vector<std::string> w, t;
    for (std::size_t i = 0; i < n; ++i) {
      w.push_back(words[rng.below(words.size())]);
      t.push_back(tags[rng.below(tags.size())]);
    }
    std::vector<std::string> y, z{"Intent"}, s;
    for (std::size_t i = 0; i < n; ++i) {
      if (t[i] == "Null") continue;
      y.push_back(w[i]);
      z.push_back(t[i]);
      s.push_back(t[i]);
      s.push_back(w[i]);
    }
    const auto got = construct_targets(w, t, "Intent");
    if (got.values != y || got.tags != z || serialize_semantics(w, t) != s || got.values.size() + 1 != got.tags.size())
      ++bad;
  }
  return {bad == 0, fmt("%zu/%zu utterances match the filter and interleave oracles", kTargetTrials - bad, kTargetTrials)};
}

Outcome metric_oracle() {
  Rng rng(31);
  std::size_t bad = 0;
  const std::vector<std::string> intents{"A", "B", "C"}, tags{"T", "U"}, words{"x", "y", "z"};
  for (std::size_t trial = 0; trial < kMetricTrials; ++trial) {
    std::vector<EvalRecord> rs(1 + rng.below(20));
    double oi = 0, oe = 0;
    for (auto& r : rs) {
      r.reference.tags = {intents[rng.below(3)]};
      const std::size_t m = rng.below(4);
      for (std::size_t k = 0; k < m; ++k) {
        r.reference.tags.push_back(tags[rng.below(2)]);
        r.reference.values.push_back(words[rng.below(3)]);
      }
      r.hypothesis.intent = rng.below(5) == 0 ? intents[rng.below(3)] : r.reference.tags[0];
      std::vector<std::string> ht, hv;
      for (std::size_t k = 0; k < m; ++k) {
        ht.push_back(rng.below(8) == 0 ? tags[rng.below(2)] : r.reference.tags[k + 1]);
        hv.push_back(rng.below(8) == 0 ? words[rng.below(3)] : r.reference.values[k]);
      }
      if (rng.below(8) == 0) hv.push_back(words[rng.below(3)]);
      r.hypothesis = pair_outputs(ht, hv, r.hypothesis.intent);
      // independent scoring from the raw decoder outputs
      const bool ie = r.hypothesis.intent != r.reference.tags[0];
      const std::vector<std::string> rt(r.reference.tags.begin() + 1, r.reference.tags.end());
      oi += ie;
      oe += ie || ht != rt || hv != r.reference.values;
    }
    const double ic = icer(rs), ir = irer(rs);
    if (ic != oi / rs.size() || ir != oe / rs.size() || ir < ic) ++bad;
  }
  EvalRecord big;
  big.reference.tags = {"I"};
  big.hypothesis.intent = "I";
  for (int k = 0; k < 10; ++k) {
    big.reference.tags.push_back("T" + std::to_string(k));
    big.reference.values.push_back("v" + std::to_string(k));
    big.hypothesis.pairs.emplace_back("T" + std::to_string(k), k == 4 ? "wrong" : "v" + std::to_string(k));
  }
  EvalRecord clean = big;
  clean.hypothesis.pairs[4].second = "v4";
  std::vector<EvalRecord> pair{big, clean};
  const bool entity_case = irer(pair) == 0.5 && icer(pair) == 0.0;
  return {bad == 0 && entity_case,
          fmt("%zu/%zu record sets match the brute-force scorer; 21-entity case %s", kMetricTrials - bad, kMetricTrials,
              entity_case ? "scores one error" : "wrong")};
}

Outcome parameter_bracket(const fs::path& corpus) {
  const auto cfg = kWork / "small_fans_b.cfg";
  std::ofstream(cfg) << "variant=fans_b\nscale=small\n";
  const Run r = cli("paramcount --config " + cfg.string() + " --data " + corpus.string());
  const std::size_t total = parse_count(r.out, "total");
  const auto vocab = Vocabularies::read_dir(corpus);
  const std::size_t largest = std::max({vocab.words().size(), vocab.intents().size(), vocab.tags().size()});
  const bool ok = r.code == 0 && total >= kParamLow && total <= kParamHigh && largest <= 150;
  return {ok, fmt("total %zu (enc %zu, dec_value %zu, dec_tag %zu)", total, parse_count(r.out, "enc"),
                  parse_count(r.out, "dec_value"), parse_count(r.out, "dec_tag"))};
}

Outcome determinism() {
  const std::string gen = "gen-data --grammar " + std::string(FANS_GRAMMAR) + " --n 120 --seed 9 --out ";
  const fs::path a = kWork / "det_a", b = kWork / "det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  if (cli(gen + a.string()).code || cli(gen + b.string()).code) return {false, "gen-data failed"};
  const bool data_same = same_tree(a, b);

  const auto cfg = derive_config(kConfigs / "desk_fans_b.cfg", "det.cfg",
                                 {{"max_epochs", "2"}, {"eval_interval", "4"}, {"batch_size", "8"}});
  const fs::path ta = kWork / "det_train_a", tb = kWork / "det_train_b";
  fs::remove_all(ta);
  fs::remove_all(tb);
  for (const auto& out : {ta, tb})
    if (cli("train --config " + cfg.string() + " --data " + a.string() + " --out " + out.string()).code)
      return {false, "train failed"};
  const bool train_same = same_tree(ta, tb);

  bool decode_same = true;
  for (const auto& name : {"d1.txt", "d2.txt"})
    if (cli("decode --ckpt " + (ta / "model.ckpt").string() + " --data " + (a / "test.manifest").string() + " --out " +
            (kWork / name).string())
            .code)
      return {false, "decode failed"};
  decode_same = slurp(kWork / "d1.txt") == slurp(kWork / "d2.txt") && !slurp(kWork / "d1.txt").empty();
  return {data_same && train_same && decode_same,
          fmt("gen-data %s, train %s, decode %s", data_same ? "identical" : "differs",
              train_same ? "identical" : "differs", decode_same ? "identical" : "differs")};
}

struct TrainedRun {
  bool ok = false;
  double icer = 1, irer = 1, minutes = 0;
  std::size_t steps = 0;
  std::string error;
};

TrainedRun train_and_test(const fs::path& corpus, const fs::path& base_cfg, const std::string& name, std::uint64_t seed) {
  TrainedRun t;
  const auto cfg = derive_config(base_cfg, name + ".cfg", {{"seed", std::to_string(seed)}});
  const fs::path out = kWork / name;
  fs::remove_all(out);
  const Run r = cli("train --config " + cfg.string() + " --data " + corpus.string() + " --out " + out.string());
  t.minutes = r.seconds / 60.0;
  if (r.code) {
    t.error = "train exit " + std::to_string(r.code) + ": " + r.out.substr(0, 300);
    return t;
  }
  std::ifstream log(out / "metrics.tsv");
  for (std::string line; std::getline(log, line);)
    if (!line.empty() && std::isdigit(static_cast<unsigned char>(line[0]))) t.steps = std::stoull(line);
  const Run e = cli("eval --ckpt " + (out / "model.ckpt").string() + " --data " + (corpus / "test.manifest").string() +
                    " --out " + (out / "test").string());
  if (e.code) {
    t.error = "eval exit " + std::to_string(e.code);
    return t;
  }
  const auto rep = EvalReport::parse(slurp(out / "test" / "report.txt"));
  t.icer = rep.icer;
  t.irer = rep.irer;
  t.ok = true;
  return t;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

std::vector<TrainedRun> fans_runs;

Outcome learnability(const fs::path& corpus) {
  const auto t = train_and_test(corpus, kConfigs / "desk_fans_b.cfg", "fans_b_seed1", kBaselineSeeds[0]);
  fans_runs.push_back(t);
  if (!t.ok) return {false, t.error};
  const std::size_t train_n = std::stoul(std::string(kCorpusSplit).substr(0, 4));
  const auto rc = load_run_config(kConfigs / "desk_fans_b.cfg");
  const std::size_t steps_per_epoch = (train_n + rc.train.batch_size - 1) / rc.train.batch_size;
  const bool ok = t.icer <= kMaxTestIcer && t.irer <= kMaxTestIrer && t.steps <= kMaxEpochs * steps_per_epoch &&
                  t.minutes < kMaxTrainMinutes;
  return {ok, fmt("test ICER %.4f IRER %.4f after %zu steps (%.1f epochs) in %.1f min", t.icer, t.irer, t.steps,
                  static_cast<double>(t.steps) / steps_per_epoch, t.minutes)};
}

Outcome baseline_ordering(const fs::path& corpus) {
  auto count = [&](const std::string& cfg) {
    return parse_count(cli("paramcount --config " + (kConfigs / cfg).string() + " --data " + corpus.string()).out,
                       "total");
  };
  const double pf = static_cast<double>(count("desk_fans_b.cfg"));
  const double ps = static_cast<double>(count("desk_serialized.cfg"));
  const double gap = std::abs(ps - pf) / pf;

  std::vector<double> fans_irer, base_irer;
  for (std::size_t i = 0; i < kBaselineSeeds.size(); ++i) {
    const auto seed = kBaselineSeeds[i];
    if (i >= fans_runs.size())
      fans_runs.push_back(
          train_and_test(corpus, kConfigs / "desk_fans_b.cfg", "fans_b_seed" + std::to_string(seed), seed));
    const auto s = train_and_test(corpus, kConfigs / "desk_serialized.cfg", "serial_seed" + std::to_string(seed), seed);
    if (!fans_runs[i].ok) return {false, fans_runs[i].error};
    if (!s.ok) return {false, s.error};
    fans_irer.push_back(fans_runs[i].irer);
    base_irer.push_back(s.irer);
  }
  const double mf = median(fans_irer), mb = median(base_irer);
  std::string per_seed;
  for (std::size_t i = 0; i < fans_irer.size(); ++i) per_seed += fmt(" %.3f/%.3f", fans_irer[i], base_irer[i]);
  return {gap <= kBudgetTolerance && mf <= mb,
          fmt("median IRER FANS %.4f vs serialized %.4f (per seed%s); params %.0f vs %.0f (%.1f%%)", mf, mb,
              per_seed.c_str(), pf, ps, 100.0 * gap)};
}

Outcome loss_weights(const fs::path& corpus) {
  const auto cfg = derive_config(kConfigs / "desk_fans_b.cfg", "no_intent.cfg",
                                 {{"lambda2", "0"}, {"max_epochs", "1"}, {"eval_interval", "50"}});
  const fs::path out = kWork / "no_intent";
  fs::remove_all(out);
  const Run r = cli("train --config " + cfg.string() + " --data " + corpus.string() + " --out " + out.string());
  if (r.code) return {false, "train failed: " + r.out.substr(0, 300)};
  const Run d = cli("paramdiff " + (out / "init.ckpt").string() + " " + (out / "last.ckpt").string() +
                    " --prefix dec_tag.intent_out.");
  const bool head_same = d.code == 0 && d.out.find("0 of 2 entries differ") != std::string::npos;

  double worst = 0;
  Rng rng(5);
  for (Variant v : {Variant::fans_a, Variant::fans_b, Variant::fans_c, Variant::serialized_direct}) {
    const auto c = small_config(v);
    auto m = build_variant(c, 8);
    std::vector<Example<double>> batch{random_example(c, rng), random_example(c, rng), random_example(c, rng)};
    Graph<double> g;
    const auto l = compute_loss(forward_teacher_forced(g, m, std::span<const Example<double>>(batch)), {1.0, 1.0, 0.1});
    worst = std::max(worst, std::abs(l.total.values()[0] - (l.value + l.tag + l.intent)));
  }
  return {head_same && worst <= kLossSumTol,
          fmt("intent head %s after lambda2=0 training; |L - sum of terms| = %.1e", head_same ? "bit-identical" : "changed",
              worst)};
}

}  // namespace

int main() {
  fs::create_directories(kWork);
  const fs::path corpus = kWork / "corpus";
  fs::remove_all(corpus);
  const Run gen = cli("gen-data --grammar " + std::string(FANS_GRAMMAR) + " --n " + std::to_string(kCorpusSize) +
                      " --seed " + std::to_string(kCorpusSeed) + " --split " + kCorpusSplit + " --out " +
                      corpus.string());
  if (gen.code) {
    std::printf("corpus generation failed:\n%s\n", gen.out.c_str());
    return 1;
  }

  report(1, "gradient suite", gradient_suite);
  report(2, "attention and causality", attention_and_causality);
  report(3, "target construction", target_oracle);
  report(4, "metric oracle", metric_oracle);
  report(5, "parameter count", [&] { return parameter_bracket(corpus); });
  report(6, "determinism", determinism);
  report(7, "learnability", [&] { return learnability(corpus); });
  report(8, "baseline ordering", [&] { return baseline_ordering(corpus); });
  report(9, "loss weights", [&] { return loss_weights(corpus); });
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
