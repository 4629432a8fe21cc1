// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace fans {

/// Reserved ids shared by every vocabulary.
inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kSosId = 1;
inline constexpr std::size_t kEosId = 2;
inline constexpr std::size_t kUnkId = 3;
inline constexpr std::size_t kNumReserved = 4;

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kSosToken = "<sos>";
inline constexpr std::string_view kEosToken = "<eos>";
inline constexpr std::string_view kUnkToken = "<unk>";

/// Ordered token list; ids 0..3 are <pad>, <sos>, <eos>, <unk>.
class Vocab {
 public:
  Vocab();
  /// Reserved tokens followed by `content`; duplicates are a DataError.
  explicit Vocab(std::span<const std::string> content);

  std::size_t size() const { return tokens_.size(); }
  std::size_t content_size() const { return tokens_.size() - kNumReserved; }
  const std::string& token(std::size_t id) const;
  std::optional<std::size_t> find(std::string_view token) const;
  std::size_t id_or_unk(std::string_view token) const;
  bool contains(std::string_view token) const { return find(token).has_value(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::span<const std::string> content() const { return std::span(tokens_).subspan(kNumReserved); }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

  /// One content token per line; reserved tokens are implicit.
  static Vocab read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace fans
