// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fans/data.hpp"
#include "fans/model.hpp"
#include "fans/tensor.hpp"

namespace fans {

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;

  bool operator==(const NamedTensor& o) const { return name == o.name && tensor == o.tensor; }
};

/// "FANSCKPT", u32 version, u32 count, then per entry: u32 name length, name,
/// u32 rank, u32 dims..., f32 data; trailing u64 CRC-64 of everything before it.
void write_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> entries);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

std::vector<NamedTensor> model_tensors(Model<float>& model);
/// Copies values into the model; missing, unknown or mis-shaped entries are
/// FormatErrors. Entries whose name starts with "norm." are ignored.
void assign_model_tensors(Model<float>& model, std::span<const NamedTensor> entries);

/// A trained model with what it needs to decode raw utterances.
struct Bundle {
  Model<float> model;
  Vocabularies vocab;
  FeatureStats stats;
};

/// Writes `path` (tensors plus norm.mean / norm.var) and `path.meta` (model
/// configuration and label inventories).
void save_bundle(const std::filesystem::path& path, Model<float>& model, const Vocabularies& vocab,
                 const FeatureStats& stats);
Bundle load_bundle(const std::filesystem::path& path);

std::filesystem::path meta_path(const std::filesystem::path& checkpoint);

}  // namespace fans
