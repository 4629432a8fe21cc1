// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "fans/data.hpp"
#include "fans/inference.hpp"

namespace fans {

struct EvalRecord {
  std::string id;
  SluTarget reference;
  Interpretation hypothesis;
};

bool intent_error(const EvalRecord& r);
/// Wrong intent, any differing tag or value, or a length mismatch.
bool interpretation_error(const EvalRecord& r);

/// Fraction of utterances with a wrong intent. Empty input is a ContractError.
double icer(std::span<const EvalRecord> records);
/// Fraction of utterances with at least one interpretation error.
double irer(std::span<const EvalRecord> records);

/// 100 * (other - best) / best; empty when best is 0.
std::optional<double> relative_increase(double best_rate, double other_rate);

struct EvalReport {
  double icer = 0.0;
  double irer = 0.0;
  std::size_t n = 0;
  bool has_baseline = false;
  std::optional<double> ri_icer;  // relative to the baseline report
  std::optional<double> ri_irer;

  static EvalReport score(std::span<const EvalRecord> records);
  /// Adds RI lines computed against a baseline report.
  void compare_to(const EvalReport& baseline);

  std::string to_text() const;
  static EvalReport parse(std::string_view text);
};

}  // namespace fans
