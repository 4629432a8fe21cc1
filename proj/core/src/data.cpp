// SPDX-License-Identifier: Apache-2.0
#include "fans/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "fans/errors.hpp"
#include "fans/rng.hpp"

namespace fans {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// file helpers

namespace detail {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

void write_text_file(const fs::path& path, std::string_view text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

}  // namespace detail

namespace {

std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream is{std::string(s)};
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool valid_token(std::string_view t) {
  if (t.empty()) return false;
  return std::none_of(t.begin(), t.end(), [](char c) { return c == '/' || c == ' ' || c == '\t' || c == '\n' || c == '\r'; });
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab() {
  for (auto t : {kPadToken, kSosToken, kEosToken, kUnkToken}) {
    index_.emplace(std::string(t), tokens_.size());
    tokens_.emplace_back(t);
  }
}

Vocab::Vocab(std::span<const std::string> content) : Vocab() {
  for (const auto& t : content) {
    if (!index_.emplace(t, tokens_.size()).second) throw DataError("duplicate vocabulary token '" + t + "'");
    tokens_.push_back(t);
  }
}

const std::string& Vocab::token(std::size_t id) const {
  if (id >= tokens_.size()) throw ContractError("token id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

std::optional<std::size_t> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t Vocab::id_or_unk(std::string_view token) const { return find(token).value_or(kUnkId); }

Vocab Vocab::read(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open vocabulary " + path.string());
  std::vector<std::string> content;
  std::string line;
  while (std::getline(in, line)) {
    auto t = trim(line);
    if (!t.empty()) content.emplace_back(t);
  }
  return Vocab(content);
}

void Vocab::write(const fs::path& path) const {
  std::string text;
  for (const auto& t : content()) text += t + "\n";
  detail::write_text_file(path, text);
}

// ---------------------------------------------------------------------------
// Targets

SluTarget construct_targets(std::span<const std::string> words, std::span<const std::string> tags,
                            const std::string& intent) {
  if (words.size() != tags.size()) {
    throw DataError("construct_targets: " + std::to_string(words.size()) + " words but " +
                    std::to_string(tags.size()) + " tags");
  }
  SluTarget t;
  t.tags.push_back(intent);
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (tags[i] == kNullTag) continue;
    t.values.push_back(words[i]);
    t.tags.push_back(tags[i]);
  }
  return t;
}

std::vector<std::string> serialize_semantics(std::span<const std::string> words, std::span<const std::string> tags) {
  if (words.size() != tags.size()) {
    throw DataError("serialize_semantics: " + std::to_string(words.size()) + " words but " +
                    std::to_string(tags.size()) + " tags");
  }
  std::vector<std::string> out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (tags[i] == kNullTag) continue;
    out.push_back(tags[i]);
    out.push_back(words[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Features

Tensor<float> stack_frames(const Tensor<float>& frames, std::size_t stack, std::size_t skip) {
  if (frames.rank() != 2) throw ShapeError("stack_frames: expected [T x D], got " + shape_string(frames.shape()));
  if (stack == 0 || skip == 0) throw ContractError("stack_frames: stack and skip must be positive");
  const std::size_t t = frames.rows(), d = frames.cols();
  if (t < stack) {
    throw DataError("stack_frames: " + std::to_string(t) + " frames cannot fill a stack of " + std::to_string(stack));
  }
  const std::size_t rows = (t - stack) / skip + 1;
  Tensor<float> out({rows, stack * d});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t s = 0; s < stack; ++s)
      std::copy_n(frames.data() + (i * skip + s) * d, d, out.data() + i * stack * d + s * d);
  return out;
}

FeatureStats FeatureStats::estimate(std::span<const Tensor<float>> features) {
  if (features.empty()) throw DataError("feature statistics need at least one utterance");
  const std::size_t d = features[0].cols();
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  std::size_t n = 0;
  for (const auto& f : features) {
    if (f.cols() != d) throw ShapeError("feature statistics: inconsistent widths");
    for (std::size_t r = 0; r < f.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c) sum[c] += f.at(r, c);
    n += f.rows();
  }
  if (n == 0) throw DataError("feature statistics: no frames");
  FeatureStats s;
  s.mean.resize(d);
  s.var.resize(d);
  for (std::size_t c = 0; c < d; ++c) s.mean[c] = sum[c] / static_cast<double>(n);
  for (const auto& f : features)
    for (std::size_t r = 0; r < f.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c) {
        const double dv = f.at(r, c) - s.mean[c];
        sq[c] += dv * dv;
      }
  for (std::size_t c = 0; c < d; ++c) s.var[c] = sq[c] / static_cast<double>(n);
  return s;
}

Tensor<float> normalize_global(const Tensor<float>& features, std::span<const double> mean, std::span<const double> var) {
  const std::size_t d = features.cols();
  if (mean.size() != d || var.size() != d) {
    throw ShapeError("normalize_global: statistics of width " + std::to_string(mean.size()) + " vs features " +
                     shape_string(features.shape()));
  }
  Tensor<float> out = features;
  for (std::size_t r = 0; r < features.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) {
      const double v = std::max(var[c], kVarianceFloor);
      out.at(r, c) = static_cast<float>((features.at(r, c) - mean[c]) / std::sqrt(v));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Grammar

Grammar Grammar::parse(std::string_view text) {
  Grammar g;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) { throw FormatError("grammar line " + std::to_string(line_no) + ": " + msg); };
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto space = line.find_first_of(" \t");
    const std::string kind(line.substr(0, space));
    const std::string_view rest = space == std::string_view::npos ? std::string_view{} : trim(line.substr(space));
    if (kind == "noise") {
      try {
        std::size_t used = 0;
        g.noise = std::stod(std::string(rest), &used);
        if (used != rest.size() || g.noise < 0) fail("noise must be a non-negative number");
      } catch (const std::invalid_argument&) {
        fail("noise must be a non-negative number");
      }
    } else if (kind == "intent") {
      auto sep = rest.find(":=");
      if (sep == std::string_view::npos) fail("expected 'intent <name> := <pattern>'");
      const std::string name(trim(rest.substr(0, sep)));
      if (!valid_token(name)) fail("bad intent name '" + name + "'");
      Template tpl{name, {}};
      for (const auto& tok : split_ws(rest.substr(sep + 2))) {
        if (tok.size() >= 2 && tok.front() == '{' && tok.back() == '}') {
          const std::string tag = tok.substr(1, tok.size() - 2);
          if (!valid_token(tag) || tag == kNullTag) fail("bad slot '" + tok + "'");
          tpl.pattern.push_back({true, tag});
        } else {
          if (!valid_token(tok) || tok.find_first_of("{}") != std::string::npos) fail("bad word '" + tok + "'");
          tpl.pattern.push_back({false, tok});
        }
      }
      if (tpl.pattern.empty()) fail("empty pattern");
      g.templates.push_back(std::move(tpl));
    } else if (kind == "tag") {
      auto sep = rest.find(':');
      if (sep == std::string_view::npos) fail("expected 'tag <TagName> : w1 w2 ...'");
      const std::string name(trim(rest.substr(0, sep)));
      if (!valid_token(name) || name == kNullTag) fail("bad tag name '" + name + "'");
      auto& values = g.tag_values[name];
      for (const auto& entry : split_ws(rest.substr(sep + 1))) {
        std::vector<std::string> words;
        std::string w;
        std::istringstream parts(entry);
        while (std::getline(parts, w, '_'))
          if (!w.empty()) words.push_back(w);
        if (words.empty()) fail("empty slot value");
        for (const auto& word : words)
          if (!valid_token(word)) fail("bad word '" + word + "'");
        values.push_back(std::move(words));
      }
    } else {
      fail("unknown record '" + kind + "'");
    }
  }
  for (const auto& tpl : g.templates)
    for (const auto& tok : tpl.pattern)
      if (tok.slot) {
        auto it = g.tag_values.find(tok.text);
        if (it == g.tag_values.end() || it->second.empty()) {
          throw FormatError("grammar: slot {" + tok.text + "} in intent " + tpl.intent + " has no word list");
        }
      }
  return g;
}

Grammar Grammar::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open grammar " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::vector<std::string> Grammar::intents() const {
  std::set<std::string> s;
  for (const auto& t : templates) s.insert(t.intent);
  return {s.begin(), s.end()};
}

std::vector<std::string> Grammar::tags() const {
  std::set<std::string> s;
  for (const auto& t : templates)
    for (const auto& tok : t.pattern)
      if (tok.slot) s.insert(tok.text);
  return {s.begin(), s.end()};
}

std::vector<std::string> Grammar::words() const {
  std::set<std::string> s;
  for (const auto& t : templates)
    for (const auto& tok : t.pattern)
      if (!tok.slot) s.insert(tok.text);
  for (const auto& tag : tags())
    for (const auto& value : tag_values.at(tag)) s.insert(value.begin(), value.end());
  return {s.begin(), s.end()};
}

Acoustics Acoustics::make(const Grammar& grammar, std::uint64_t seed) {
  if (grammar.min_duration == 0 || grammar.max_duration < grammar.min_duration) {
    throw ContractError("grammar: invalid word duration range");
  }
  Acoustics a;
  Rng rng = Rng::derive(seed, 0);
  for (const auto& w : grammar.words()) {
    std::vector<double> v(grammar.frame_dim);
    double norm = 0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    std::vector<float> proto(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) proto[i] = static_cast<float>(v[i] / norm);
    a.prototype.emplace(w, std::move(proto));
    a.duration.emplace(w, grammar.min_duration + rng.below(grammar.max_duration - grammar.min_duration + 1));
  }
  return a;
}

std::vector<Utterance> generate_corpus(const Grammar& grammar, std::size_t n, std::uint64_t seed) {
  if (grammar.templates.empty()) throw DataError("generate_corpus: grammar has no intent templates");
  if (n == 0) throw ContractError("generate_corpus: n must be >= 1");
  const Acoustics acoustics = Acoustics::make(grammar, seed);
  Rng rng = Rng::derive(seed, 1);
  std::vector<Utterance> out;
  out.reserve(n);
  const std::size_t width = std::max<std::size_t>(6, std::to_string(n - 1).size());
  for (std::size_t i = 0; i < n; ++i) {
    Utterance u;
    std::string num = std::to_string(i);
    u.id = "utt" + std::string(width - num.size(), '0') + num;
    const auto& tpl = grammar.templates[rng.below(grammar.templates.size())];
    u.intent = tpl.intent;
    for (const auto& tok : tpl.pattern) {
      if (!tok.slot) {
        u.words.push_back(tok.text);
        u.tags.emplace_back(kNullTag);
        continue;
      }
      const auto& values = grammar.tag_values.at(tok.text);
      for (const auto& w : values[rng.below(values.size())]) {
        u.words.push_back(w);
        u.tags.push_back(tok.text);
      }
    }
    std::size_t frames = 0;
    for (const auto& w : u.words) frames += acoustics.duration.at(w);
    u.frames = Tensor<float>({frames, grammar.frame_dim});
    std::size_t row = 0;
    for (const auto& w : u.words) {
      const auto& proto = acoustics.prototype.at(w);
      for (std::size_t k = 0; k < acoustics.duration.at(w); ++k, ++row)
        for (std::size_t c = 0; c < grammar.frame_dim; ++c)
          u.frames.at(row, c) = proto[c] + static_cast<float>(grammar.noise * rng.normal());
    }
    u.features_path = "feats/" + u.id + ".feat";
    out.push_back(std::move(u));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature files

namespace {
constexpr std::string_view kFeatMagic = "FANSFEAT";
constexpr std::uint32_t kFeatVersion = 1;
}  // namespace

void write_features(const fs::path& path, const Tensor<float>& features) {
  if (features.rank() != 2) throw ShapeError("write_features: expected [T x D], got " + shape_string(features.shape()));
  if (features.rows() == 0 || features.cols() == 0) throw DataError("write_features: refusing to write an empty tensor");
  detail::ByteWriter w;
  w.text(kFeatMagic);
  w.u32(kFeatVersion);
  w.u32(static_cast<std::uint32_t>(features.rows()));
  w.u32(static_cast<std::uint32_t>(features.cols()));
  for (float x : features.values()) w.f32(x);
  w.crc();
  detail::write_file(path, w.buffer());
}

Tensor<float> read_features(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader r(bytes, "feature file " + path.string());
  if (r.text(kFeatMagic.size()) != kFeatMagic) throw FormatError("feature file " + path.string() + ": bad magic");
  if (auto v = r.u32(); v != kFeatVersion) {
    throw FormatError("feature file " + path.string() + ": unsupported version " + std::to_string(v));
  }
  const std::size_t t = r.u32(), d = r.u32();
  if (t == 0 || d == 0) throw FormatError("feature file " + path.string() + ": empty tensor");
  if (r.remaining() != t * d * 4 + 8) throw FormatError("feature file " + path.string() + ": truncated file");
  Tensor<float> out({t, d});
  for (auto& x : out.values()) x = r.f32();
  r.expect_crc();
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

ManifestLoad load_manifest(const fs::path& path, const Vocab* words, bool load_frames) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  ManifestLoad out;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 4) fail("expected 4 tab-separated fields, got " + std::to_string(fields.size()));
    Utterance u;
    u.id = fields[0];
    u.intent = fields[1];
    u.features_path = fields[3];
    if (!valid_token(u.id)) fail("bad utterance id");
    if (!valid_token(u.intent)) fail("bad intent '" + u.intent + "'");
    if (u.features_path.empty()) fail("missing features path");
    for (const auto& pair : split_ws(fields[2])) {
      const auto slash = pair.find('/');
      if (slash == std::string::npos || pair.find('/', slash + 1) != std::string::npos) {
        fail("expected word/tag, got '" + pair + "'");
      }
      std::string word = pair.substr(0, slash);
      std::string tag = pair.substr(slash + 1);
      if (word.empty() || tag.empty()) fail("expected word/tag, got '" + pair + "'");
      if (words && !words->contains(word)) {
        word = std::string(kUnkToken);
        ++out.unknown_words;
      }
      u.words.push_back(std::move(word));
      u.tags.push_back(std::move(tag));
    }
    if (u.words.size() != u.tags.size()) fail("word and tag counts differ");
    if (load_frames) {
      try {
        u.frames = read_features(path.parent_path() / u.features_path);
      } catch (const FormatError& e) {
        fail(e.what());
      }
    }
    out.utterances.push_back(std::move(u));
  }
  return out;
}

void write_manifest(const fs::path& path, std::span<const Utterance> utterances) {
  std::string text;
  for (const auto& u : utterances) {
    if (u.words.size() != u.tags.size()) throw DataError("utterance " + u.id + ": word and tag counts differ");
    text += u.id + "\t" + u.intent + "\t";
    for (std::size_t i = 0; i < u.words.size(); ++i) {
      if (!valid_token(u.words[i]) || !valid_token(u.tags[i])) {
        throw DataError("utterance " + u.id + ": word/tag may not contain '/', whitespace or tabs");
      }
      if (i) text += ' ';
      text += u.words[i] + "/" + u.tags[i];
    }
    text += "\t" + u.features_path + "\n";
  }
  detail::write_text_file(path, text);
}

// ---------------------------------------------------------------------------
// Vocabularies

Vocabularies::Vocabularies(std::vector<std::string> words, std::vector<std::string> intents,
                           std::vector<std::string> tags)
    : words_(std::move(words)), intents_(std::move(intents)), tags_(std::move(tags)) {
  value_ = Vocab(words_);
  std::vector<std::string> joined = intents_;
  joined.insert(joined.end(), tags_.begin(), tags_.end());
  tag_ = Vocab(joined);
  joined.insert(joined.end(), words_.begin(), words_.end());
  try {
    serialized_ = Vocab(joined);
  } catch (const DataError& e) {
    serialized_error_ = std::string("serialized vocabulary: ") + e.what();
  }
}

const Vocab& Vocabularies::serialized_vocab() const {
  if (!serialized_) throw DataError(serialized_error_);
  return *serialized_;
}

Vocabularies Vocabularies::from_grammar(const Grammar& grammar) {
  return Vocabularies(grammar.words(), grammar.intents(), grammar.tags());
}

Vocabularies Vocabularies::read_dir(const fs::path& dir) {
  auto content = [](const Vocab& v) { return std::vector<std::string>(v.content().begin(), v.content().end()); };
  return Vocabularies(content(Vocab::read(dir / "words.vocab")), content(Vocab::read(dir / "intents.vocab")),
                      content(Vocab::read(dir / "tags.vocab")));
}

void Vocabularies::write_dir(const fs::path& dir) const {
  Vocab(words_).write(dir / "words.vocab");
  Vocab(intents_).write(dir / "intents.vocab");
  Vocab(tags_).write(dir / "tags.vocab");
}

}  // namespace fans
