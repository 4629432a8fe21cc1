// SPDX-License-Identifier: Apache-2.0
// fans: corpus generation, training, evaluation and verification front end.

#include <CLI11.hpp>

#include <algorithm>
#include <array>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <cstring>

#include "fans/checkpoint.hpp"
#include "fans/config_file.hpp"
#include "fans/data.hpp"
#include "fans/errors.hpp"
#include "fans/gradcheck.hpp"
#include "fans/inference.hpp"
#include "fans/metrics.hpp"
#include "fans/model.hpp"
#include "fans/rng.hpp"
#include "fans/training.hpp"

#ifndef FANS_VERSION
#define FANS_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using namespace fans;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct UsageError : Error {
  using Error::Error;
};

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void banner(std::uint64_t hash) { std::printf("fans %s config %016" PRIx64 "\n", FANS_VERSION, hash); }

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create directory " + dir.string());
}

// ---------------------------------------------------------------------------
// gen-data

struct GenArgs {
  std::string grammar, out, split = "80/10/10";
  std::size_t n = 0;
  std::uint64_t seed = 1;
};

std::array<std::size_t, 3> parse_split(const std::string& s) {
  std::array<std::size_t, 3> r{};
  std::istringstream in(s);
  std::string part;
  std::size_t i = 0;
  while (std::getline(in, part, '/')) {
    if (i == 3 || part.empty() || part.find_first_not_of("0123456789") != std::string::npos)
      throw UsageError("--split expects three integers like 80/10/10, got '" + s + "'");
    r[i++] = std::stoul(part);
  }
  if (i != 3 || r[0] + r[1] + r[2] == 0) throw UsageError("--split expects three integers like 80/10/10, got '" + s + "'");
  return r;
}

int cmd_gen_data(const GenArgs& a) {
  banner(fnv1a(a.grammar + "|" + std::to_string(a.n) + "|" + std::to_string(a.seed) + "|" + a.split));
  if (a.n == 0) throw UsageError("--n must be >= 1");
  const auto ratio = parse_split(a.split);
  const Grammar grammar = Grammar::load(a.grammar);
  auto corpus = generate_corpus(grammar, a.n, a.seed);

  std::vector<std::size_t> order(a.n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::derive(a.seed, 2);
  rng.shuffle(std::span<std::size_t>(order));
  const std::size_t total = ratio[0] + ratio[1] + ratio[2];
  const std::size_t n_train = a.n * ratio[0] / total, n_eval = a.n * ratio[1] / total;

  const fs::path out = a.out;
  ensure_dir(out / "feats");
  std::vector<Utterance> parts[3];
  for (std::size_t i = 0; i < a.n; ++i) {
    const std::size_t which = i < n_train ? 0 : i < n_train + n_eval ? 1 : 2;
    parts[which].push_back(std::move(corpus[order[i]]));
  }
  const char* names[3] = {"train", "eval", "test"};
  for (int k = 0; k < 3; ++k) {
    std::sort(parts[k].begin(), parts[k].end(), [](const Utterance& x, const Utterance& y) { return x.id < y.id; });
    for (const auto& u : parts[k]) write_features(out / u.features_path, u.frames);
    write_manifest(out / (std::string(names[k]) + ".manifest"), parts[k]);
  }
  Vocabularies::from_grammar(grammar).write_dir(out);
  std::printf("wrote %zu/%zu/%zu utterances to %s\n", parts[0].size(), parts[1].size(), parts[2].size(),
              out.string().c_str());
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config, data, out;
};

void fit_vocab_sizes(ModelConfig& c, const Vocabularies& v) {
  auto fit = [](std::size_t& field, std::size_t actual, const char* key) {
    if (field != 0 && field != actual) {
      throw ConfigError(std::string("config key '") + key + "' is " + std::to_string(field) + " but the data has " +
                        std::to_string(actual));
    }
    field = actual;
  };
  fit(c.num_words, v.words().size(), "num_words");
  fit(c.num_intents, v.intents().size(), "num_intents");
  fit(c.num_tags, v.tags().size(), "num_tags");
}

int cmd_train(const TrainArgs& a) {
  RunConfig rc = load_run_config(a.config);
  const fs::path data = a.data;
  const Vocabularies vocab = Vocabularies::read_dir(data);
  fit_vocab_sizes(rc.model, vocab);
  rc.model.validate();
  rc.train.validate();
  banner(config_hash(rc));

  const bool serial = rc.model.variant == Variant::serialized_direct;
  Vocab words(vocab.words());
  auto train_load = load_manifest(data / "train.manifest", &words);
  auto eval_load = load_manifest(data / "eval.manifest", &words);
  if (train_load.unknown_words + eval_load.unknown_words > 0) {
    std::fprintf(stderr, "warning: %zu unknown words mapped to <unk>\n", train_load.unknown_words + eval_load.unknown_words);
  }
  const FeatureStats stats = stacked_feature_stats(train_load.utterances);
  const auto train_set = prepare_examples(train_load.utterances, vocab, stats, serial);
  const auto eval_set = prepare_examples(eval_load.utterances, vocab, stats, serial);

  Model<float> model = serial ? build_serialized_baseline<float>(rc.model, rc.train.seed) : build<float>(rc.model, rc.train.seed);
  std::printf("%s: %zu parameters, %zu train / %zu eval utterances\n", to_string(rc.model.variant).c_str(),
              model.parameter_count(), train_set.size(), eval_set.size());

  const fs::path out = a.out;
  ensure_dir(out);
  write_text(out / "config.txt", to_text(rc));
  std::ofstream log(out / "metrics.tsv", std::ios::binary | std::ios::trunc);
  if (!log) throw DataError("cannot write " + (out / "metrics.tsv").string());
  save_bundle(out / "init.ckpt", model, vocab, stats);
  auto save = [&](const std::string& kind, Model<float>& m) {
    save_bundle(out / (kind == "best" ? "model.ckpt" : "last.ckpt"), m, vocab, stats);
  };
  const TrainResult r = train(model, train_set, eval_set, vocab, rc.train, &log, save);
  const auto& last = r.log.back();
  std::printf("trained %zu steps (%zu epochs%s); best eval loss %.6f at step %zu; last ICER=%.4f IRER=%.4f\n", r.steps,
              r.epochs, r.early_stopped ? ", early stop" : "", r.best_eval_loss, r.best_step, last.icer, last.irer);
  return kOk;
}

// ---------------------------------------------------------------------------
// eval / decode

struct EvalArgs {
  std::string ckpt, data, baseline, out = ".";
};

std::vector<EvalRecord> decode_manifest(Bundle& b, const fs::path& manifest) {
  Vocab words(b.vocab.words());
  auto load = load_manifest(manifest, &words);
  if (load.unknown_words > 0) std::fprintf(stderr, "warning: %zu unknown words mapped to <unk>\n", load.unknown_words);
  const bool serial = b.model.serialized();
  std::vector<LabeledExample> examples;
  try {
    examples = prepare_examples(load.utterances, b.vocab, b.stats, serial);
  } catch (const DataError& e) {
    throw DataError(std::string("manifest does not match the checkpoint vocabulary: ") + e.what());
  }
  return decode_records(b.model, examples, b.vocab);
}

void write_decodes(const fs::path& path, const std::vector<EvalRecord>& records) {
  std::string text;
  for (const auto& r : records) text += format_decode_line(r.id, r.hypothesis) + "\n";
  write_text(path, text);
}

int cmd_eval(const EvalArgs& a) {
  Bundle b = load_bundle(a.ckpt);
  banner(fnv1a(to_text(b.model.config)));
  const auto records = decode_manifest(b, a.data);
  EvalReport report = EvalReport::score(records);
  if (!a.baseline.empty()) report.compare_to(EvalReport::parse(read_text(a.baseline)));
  const fs::path out = a.out;
  ensure_dir(out);
  write_decodes(out / "decode.txt", records);
  write_text(out / "report.txt", report.to_text());
  std::fputs(report.to_text().c_str(), stdout);
  return kOk;
}

int cmd_decode(const EvalArgs& a) {
  Bundle b = load_bundle(a.ckpt);
  banner(fnv1a(to_text(b.model.config)));
  const auto records = decode_manifest(b, a.data);
  write_decodes(a.out, records);
  std::printf("decoded %zu utterances to %s\n", records.size(), a.out.c_str());
  return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck / paramcount / paramdiff

struct GradArgs {
  std::size_t samples = GradcheckOptions{}.samples;
  std::uint64_t seed = GradcheckOptions{}.seed;
  std::string fault;
  std::vector<std::string> only;
};

int cmd_gradcheck(const GradArgs& a) {
  banner(fnv1a("gradcheck|" + std::to_string(a.samples) + "|" + std::to_string(a.seed)));
  GradcheckOptions opts;
  opts.samples = a.samples;
  opts.seed = a.seed;
  debug::Fault fault = debug::Fault::none;
  if (a.fault == "lstm_backward_sign") {
    fault = debug::Fault::lstm_backward_sign;
  } else if (!a.fault.empty()) {
    throw UsageError("unknown fault '" + a.fault + "'");
  }
  debug::ScopedFault scoped(fault);
  std::vector<GradcheckRow> rows;
  for (const auto& name : a.only.empty() ? gradcheck_components() : a.only) {
    rows.push_back(run_gradcheck_component(name, opts));
  }
  std::fputs(format_gradcheck(rows, opts.tolerance).c_str(), stdout);
  for (const auto& r : rows)
    if (!r.passed) return kNumeric;
  return kOk;
}

struct CountArgs {
  std::string config, data;
};

int cmd_paramcount(const CountArgs& a) {
  RunConfig rc = load_run_config(a.config);
  if (!a.data.empty()) fit_vocab_sizes(rc.model, Vocabularies::read_dir(a.data));
  rc.model.validate();
  banner(config_hash(rc));
  const bool serial = rc.model.variant == Variant::serialized_direct;
  Model<float> m = serial ? build_serialized_baseline<float>(rc.model, 0) : build<float>(rc.model, 0);
  std::printf("variant      %s\n", to_string(rc.model.variant).c_str());
  for (auto g : {ParamGroup::enc, ParamGroup::dec_value, ParamGroup::dec_tag}) {
    std::printf("%-12s %zu\n", to_string(g).c_str(), m.parameter_count(g));
  }
  std::printf("total        %zu\n", m.parameter_count());
  if (m.parameter_count() != expected_parameter_count(rc.model)) {
    throw NumericError("parameter table disagrees with the configuration formula");
  }
  return kOk;
}

struct DiffArgs {
  std::string a, b, prefix;
};

int cmd_paramdiff(const DiffArgs& d) {
  banner(fnv1a("paramdiff|" + d.prefix));
  const auto a = read_checkpoint(d.a);
  const auto b = read_checkpoint(d.b);
  std::map<std::string, const NamedTensor*> rhs;
  for (const auto& e : b) rhs.emplace(e.name, &e);
  std::size_t differing = 0, compared = 0;
  for (const auto& e : a) {
    if (e.name.rfind(d.prefix, 0) != 0) continue;
    auto it = rhs.find(e.name);
    if (it == rhs.end() || it->second->tensor.shape() != e.tensor.shape()) {
      std::printf("%-48s missing or reshaped\n", e.name.c_str());
      ++differing;
      continue;
    }
    double max_diff = 0.0;
    for (std::size_t i = 0; i < e.tensor.size(); ++i)
      max_diff = std::max(max_diff, static_cast<double>(std::abs(e.tensor[i] - it->second->tensor[i])));
    const bool same = std::memcmp(e.tensor.data(), it->second->tensor.data(), e.tensor.size() * sizeof(float)) == 0;
    std::printf("%-48s %s max_abs_diff=%.3e\n", e.name.c_str(), same ? "identical" : "differs", max_diff);
    differing += same ? 0 : 1;
    ++compared;
  }
  std::printf("%zu of %zu entries differ\n", differing, compared);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FANS spoken language understanding toolkit"};
  app.set_version_flag("--version", std::string(FANS_VERSION));
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic corpus with train/eval/test manifests");
  g->add_option("--grammar", gen.grammar, "Grammar file")->required();
  g->add_option("--n", gen.n, "Number of utterances")->required();
  g->add_option("--seed", gen.seed, "Generator seed");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--split", gen.split, "train/eval/test proportions");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", tr.config, "key=value configuration file")->required();
  t->add_option("--data", tr.data, "Corpus directory from gen-data")->required();
  t->add_option("--out", tr.out, "Output directory for checkpoints and metrics")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Decode a manifest and score it");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  e->add_option("--data", ev.data, "Manifest to evaluate")->required();
  e->add_option("--baseline-report", ev.baseline, "Report of a reference model for RI-ICER/RI-IRER");
  e->add_option("--out", ev.out, "Directory for decode.txt and report.txt");

  EvalArgs dec;
  auto* d = app.add_subcommand("decode", "Decode a manifest");
  d->add_option("--ckpt", dec.ckpt, "Checkpoint")->required();
  d->add_option("--data", dec.data, "Manifest to decode")->required();
  d->add_option("--out", dec.out, "Output file")->required();

  GradArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference gradient checks in double precision");
  c->add_option("--samples", gc.samples, "Entries checked per tensor");
  c->add_option("--seed", gc.seed, "Seed for inputs and sampling");
  c->add_option("--component", gc.only, "Restrict to named components");
  c->add_option("--inject-fault", gc.fault, "Test fixture: corrupt a backward pass")->group("");

  CountArgs pc;
  auto* p = app.add_subcommand("paramcount", "Print per-group and total parameter counts");
  p->add_option("--config", pc.config, "key=value configuration file")->required();
  p->add_option("--data", pc.data, "Corpus directory supplying vocabulary sizes");

  DiffArgs df;
  auto* f = app.add_subcommand("paramdiff", "Compare the tensors of two checkpoints");
  f->add_option("a", df.a, "First checkpoint")->required();
  f->add_option("b", df.b, "Second checkpoint")->required();
  f->add_option("--prefix", df.prefix, "Only entries whose name starts with this prefix");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*d) return cmd_decode(dec);
    if (*c) return cmd_gradcheck(gc);
    if (*p) return cmd_paramcount(pc);
    if (*f) return cmd_paramdiff(df);
  } catch (const UsageError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kUsage;
  } catch (const ConfigError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kUsage;
  } catch (const NumericError& err) {
    std::fprintf(stderr, "numeric error: %s\n", err.what());
    return kNumeric;
  } catch (const Error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kData;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kData;
  }
  return kUsage;
}
