// SPDX-License-Identifier: Apache-2.0
#include "fans/checkpoint.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "fans/config_file.hpp"
#include "fans/errors.hpp"

namespace fans {

namespace fs = std::filesystem;

namespace {
constexpr std::string_view kMagic = "FANSCKPT";
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxRank = 8;

std::string join(std::span<const std::string> tokens) {
  std::string s;
  for (const auto& t : tokens) s += (s.empty() ? "" : " ") + t;
  return s;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string t;
  while (in >> t) out.push_back(t);
  return out;
}
}  // namespace

void write_checkpoint(const fs::path& path, std::span<const NamedTensor> entries) {
  detail::ByteWriter w;
  w.text(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  std::set<std::string> names;
  for (const auto& e : entries) {
    if (e.name.empty() || !names.insert(e.name).second) throw ContractError("checkpoint: bad or duplicate entry name '" + e.name + "'");
    if (e.tensor.rank() == 0 || e.tensor.rank() > kMaxRank) throw ContractError("checkpoint: unsupported rank for " + e.name);
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.text(e.name);
    w.u32(static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float x : e.tensor.values()) w.f32(x);
  }
  w.crc();
  detail::write_file(path, w.buffer());
}

std::vector<NamedTensor> read_checkpoint(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  const std::string what = "checkpoint " + path.string();
  detail::ByteReader r(bytes, what);
  if (r.text(kMagic.size()) != kMagic) throw FormatError(what + ": bad magic");
  if (auto v = r.u32(); v != kVersion) throw FormatError(what + ": unsupported version " + std::to_string(v));
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    if (len == 0 || len > r.remaining()) throw FormatError(what + ": bad entry name length");
    NamedTensor e;
    e.name = r.text(len);
    if (!names.insert(e.name).second) throw FormatError(what + ": duplicate entry " + e.name);
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > kMaxRank) throw FormatError(what + ": bad rank for " + e.name);
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::size_t d = r.u32();
      if (d == 0) throw FormatError(what + ": zero dimension in " + e.name);
      shape.push_back(d);
      n *= d;
      if (n > r.remaining() / 4) throw FormatError(what + ": truncated file");
    }
    e.tensor = Tensor<float>(shape);
    for (auto& x : e.tensor.values()) x = r.f32();
    out.push_back(std::move(e));
  }
  r.expect_crc();
  return out;
}

std::vector<NamedTensor> model_tensors(Model<float>& model) {
  std::vector<NamedTensor> out;
  for (auto& p : model.named_parameters()) {
    Tensor<float> copy(p.tensor->shape(), std::vector<float>(p.tensor->values().begin(), p.tensor->values().end()));
    out.push_back({p.name, std::move(copy)});
  }
  return out;
}

void assign_model_tensors(Model<float>& model, std::span<const NamedTensor> entries) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& e : entries)
    if (e.name.rfind("norm.", 0) != 0) by_name.emplace(e.name, &e);
  auto params = model.named_parameters();
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing parameter " + p.name);
    if (it->second->tensor.shape() != p.tensor->shape()) {
      throw FormatError("checkpoint: parameter " + p.name + " has shape " + shape_string(it->second->tensor.shape()) +
                        ", model expects " + shape_string(p.tensor->shape()));
    }
    std::copy(it->second->tensor.values().begin(), it->second->tensor.values().end(), p.tensor->values().begin());
    by_name.erase(it);
  }
  if (!by_name.empty()) throw FormatError("checkpoint: unexpected entry " + by_name.begin()->first);
}

fs::path meta_path(const fs::path& checkpoint) {
  fs::path p = checkpoint;
  p += ".meta";
  return p;
}

void save_bundle(const fs::path& path, Model<float>& model, const Vocabularies& vocab, const FeatureStats& stats) {
  auto entries = model_tensors(model);
  auto vec = [](const std::vector<double>& v) {
    Tensor<float> t({v.size()});
    for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<float>(v[i]);
    return t;
  };
  if (stats.mean.empty() || stats.mean.size() != stats.var.size()) throw ContractError("save_bundle: bad feature statistics");
  entries.push_back({"norm.mean", vec(stats.mean)});
  entries.push_back({"norm.var", vec(stats.var)});
  write_checkpoint(path, entries);
  std::string meta = "# model\n" + to_text(model.config) + "# labels\n";
  meta += "words=" + join(vocab.words()) + "\n";
  meta += "intents=" + join(vocab.intents()) + "\n";
  meta += "tags=" + join(vocab.tags()) + "\n";
  detail::write_text_file(meta_path(path), meta);
}

Bundle load_bundle(const fs::path& path) {
  std::ifstream in(meta_path(path));
  if (!in) throw FormatError("cannot open " + meta_path(path).string());
  std::stringstream ss;
  ss << in.rdbuf();
  std::string model_text;
  std::vector<std::string> words, intents, tags;
  bool have_words = false, have_intents = false, have_tags = false;
  for (auto& [k, v] : parse_key_values(ss.str(), meta_path(path).string())) {
    if (k == "words") {
      words = split(v);
      have_words = true;
    } else if (k == "intents") {
      intents = split(v);
      have_intents = true;
    } else if (k == "tags") {
      tags = split(v);
      have_tags = true;
    } else {
      model_text += k + "=" + v + "\n";
    }
  }
  if (!have_words || !have_intents || !have_tags) throw FormatError(meta_path(path).string() + ": missing label inventories");
  Bundle b;
  try {
    const ModelConfig config = parse_model_config(model_text);
    b.vocab = Vocabularies(std::move(words), std::move(intents), std::move(tags));
    b.model = config.variant == Variant::serialized_direct ? build_serialized_baseline<float>(config, 0)
                                                            : build<float>(config, 0);
  } catch (const ConfigError& e) {
    throw FormatError(meta_path(path).string() + ": " + e.what());
  }
  const auto& cfg = b.model.config;
  if (cfg.num_words != b.vocab.words().size() || cfg.num_intents != b.vocab.intents().size() ||
      cfg.num_tags != b.vocab.tags().size()) {
    throw FormatError(meta_path(path).string() + ": label inventories disagree with the model configuration");
  }
  const auto entries = read_checkpoint(path);
  assign_model_tensors(b.model, entries);
  for (const auto& e : entries) {
    if (e.name == "norm.mean") b.stats.mean.assign(e.tensor.values().begin(), e.tensor.values().end());
    if (e.name == "norm.var") b.stats.var.assign(e.tensor.values().begin(), e.tensor.values().end());
  }
  if (b.stats.mean.size() != cfg.input_dim || b.stats.var.size() != cfg.input_dim) {
    throw FormatError("checkpoint " + path.string() + ": missing or mis-sized normalization statistics");
  }
  return b;
}

}  // namespace fans
