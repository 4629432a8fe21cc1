// SPDX-License-Identifier: Apache-2.0
#include "fans/config_file.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "fans/errors.hpp"

namespace fans {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double to_real(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

std::string real_text(double x) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  (void)ec;
  return std::string(buf, p);
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Field {
  const char* key;
  bool model;
  Setter set;
  Getter get;
};

#define FANS_SIZE_FIELD(section, name, is_model)                                                          \
  Field {                                                                                                  \
    #name, is_model, [](RunConfig& c, const std::string& k, const std::string& v) { c.section.name = to_size(k, v); }, \
        [](const RunConfig& c) { return std::to_string(c.section.name); }                                  \
  }
#define FANS_REAL_FIELD(section, name, is_model)                                                          \
  Field {                                                                                                  \
    #name, is_model, [](RunConfig& c, const std::string& k, const std::string& v) { c.section.name = to_real(k, v); }, \
        [](const RunConfig& c) { return real_text(c.section.name); }                                       \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"variant", true, [](RunConfig& c, const std::string&, const std::string& v) { c.model.variant = parse_variant(v); },
            [](const RunConfig& c) { return to_string(c.model.variant); }},
      Field{"encoder", true, [](RunConfig& c, const std::string&, const std::string& v) { c.model.encoder = parse_net_kind(v); },
            [](const RunConfig& c) { return to_string(c.model.encoder); }},
      FANS_SIZE_FIELD(model, enc_layers, true),
      FANS_SIZE_FIELD(model, enc_width, true),
      Field{"decoder", true, [](RunConfig& c, const std::string&, const std::string& v) { c.model.decoder = parse_net_kind(v); },
            [](const RunConfig& c) { return to_string(c.model.decoder); }},
      FANS_SIZE_FIELD(model, value_dec_layers, true),
      FANS_SIZE_FIELD(model, tag_dec_layers, true),
      FANS_SIZE_FIELD(model, serial_dec_layers, true),
      FANS_SIZE_FIELD(model, dec_width, true),
      Field{"attender", true, [](RunConfig& c, const std::string&, const std::string& v) { c.model.attender = parse_attender(v); },
            [](const RunConfig& c) { return to_string(c.model.attender); }},
      FANS_SIZE_FIELD(model, input_dim, true),
      FANS_SIZE_FIELD(model, d_model, true),
      FANS_SIZE_FIELD(model, heads, true),
      FANS_SIZE_FIELD(model, d_ff, true),
      FANS_SIZE_FIELD(model, head_dim, true),
      FANS_SIZE_FIELD(model, additive_dim, true),
      FANS_SIZE_FIELD(model, num_words, true),
      FANS_SIZE_FIELD(model, num_intents, true),
      FANS_SIZE_FIELD(model, num_tags, true),
      FANS_SIZE_FIELD(model, max_decode_len, true),
      FANS_REAL_FIELD(model, dropout, true),
      FANS_REAL_FIELD(model, label_smoothing, true),
      FANS_REAL_FIELD(train, lambda1, false),
      FANS_REAL_FIELD(train, lambda2, false),
      FANS_REAL_FIELD(train, beta1, false),
      FANS_REAL_FIELD(train, beta2, false),
      FANS_REAL_FIELD(train, adam_eps, false),
      FANS_REAL_FIELD(train, lr_factor, false),
      FANS_SIZE_FIELD(train, warmup, false),
      FANS_SIZE_FIELD(train, batch_size, false),
      FANS_SIZE_FIELD(train, max_steps, false),
      FANS_SIZE_FIELD(train, max_epochs, false),
      FANS_SIZE_FIELD(train, eval_interval, false),
      FANS_SIZE_FIELD(train, patience, false),
      FANS_REAL_FIELD(train, clip_norm, false),
      Field{"seed", false,
            [](RunConfig& c, const std::string& k, const std::string& v) { c.train.seed = to_size(k, v); },
            [](const RunConfig& c) { return std::to_string(c.train.seed); }},
  };
  return table;
}

#undef FANS_SIZE_FIELD
#undef FANS_REAL_FIELD

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (key == f.key) return &f;
  return nullptr;
}

RunConfig apply_keys(const KeyValues& kv, bool model_only) {
  Variant variant = Variant::fans_b;
  ModelConfig::Scale scale = ModelConfig::Scale::small;
  for (const auto& [k, v] : kv) {
    if (k == "variant") variant = parse_variant(v);
    if (k == "scale") {
      if (v == "small") {
        scale = ModelConfig::Scale::small;
      } else if (v == "large") {
        scale = ModelConfig::Scale::large;
      } else {
        throw ConfigError("config key 'scale': expected small or large, got '" + v + "'");
      }
    }
  }
  RunConfig c;
  c.model = ModelConfig::preset(variant, scale);
  for (const auto& [k, v] : kv) {
    if (k == "scale") continue;
    const Field* f = find_field(k);
    if (!f || (model_only && !f->model)) throw ConfigError("unknown config key '" + k + "'");
    f->set(c, k, v);
  }
  return c;
}

}  // namespace

KeyValues parse_key_values(std::string_view text, std::string_view what) {
  KeyValues out;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = std::string(what) + ":" + std::to_string(line_no);
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected key=value");
    std::string key(trim(line.substr(0, eq)));
    std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

RunConfig parse_run_config(std::string_view text) { return apply_keys(parse_key_values(text, "config"), false); }

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return apply_keys(parse_key_values(ss.str(), path.string()), false);
}

std::string to_text(const ModelConfig& config) {
  RunConfig rc;
  rc.model = config;
  std::string s;
  for (const auto& f : fields())
    if (f.model) s += std::string(f.key) + "=" + f.get(rc) + "\n";
  return s;
}

std::string to_text(const RunConfig& config) {
  std::string s;
  for (const auto& f : fields()) s += std::string(f.key) + "=" + f.get(config) + "\n";
  return s;
}

ModelConfig parse_model_config(std::string_view text) { return apply_keys(parse_key_values(text, "model config"), true).model; }

std::uint64_t config_hash(const RunConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_text(config)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace fans
