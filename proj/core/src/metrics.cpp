// SPDX-License-Identifier: Apache-2.0
#include "fans/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "fans/errors.hpp"

namespace fans {

bool intent_error(const EvalRecord& r) { return r.hypothesis.intent != r.reference.intent(); }

bool interpretation_error(const EvalRecord& r) {
  if (intent_error(r) || r.hypothesis.length_mismatch) return true;
  const auto& ref = r.reference;
  const auto& hyp = r.hypothesis.pairs;
  if (hyp.size() != ref.values.size() || hyp.size() + 1 != ref.tags.size()) return true;
  for (std::size_t i = 0; i < hyp.size(); ++i)
    if (hyp[i].first != ref.tags[i + 1] || hyp[i].second != ref.values[i]) return true;
  return false;
}

namespace {
template <typename Pred>
double rate(std::span<const EvalRecord> records, Pred pred, const char* name) {
  if (records.empty()) throw ContractError(std::string(name) + ": no records");
  std::size_t errors = 0;
  for (const auto& r : records) errors += pred(r) ? 1 : 0;
  return static_cast<double>(errors) / static_cast<double>(records.size());
}

std::string fixed4(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", x);
  return buf;
}
}  // namespace

double icer(std::span<const EvalRecord> records) { return rate(records, intent_error, "icer"); }
double irer(std::span<const EvalRecord> records) { return rate(records, interpretation_error, "irer"); }

std::optional<double> relative_increase(double best_rate, double other_rate) {
  if (best_rate < 0.0 || other_rate < 0.0) throw ContractError("relative_increase: rates must be non-negative");
  if (best_rate == 0.0) return std::nullopt;
  return 100.0 * (other_rate - best_rate) / best_rate;
}

EvalReport EvalReport::score(std::span<const EvalRecord> records) {
  EvalReport r;
  r.icer = fans::icer(records);
  r.irer = fans::irer(records);
  r.n = records.size();
  return r;
}

void EvalReport::compare_to(const EvalReport& baseline) {
  has_baseline = true;
  ri_icer = relative_increase(baseline.icer, icer);
  ri_irer = relative_increase(baseline.irer, irer);
}

std::string EvalReport::to_text() const {
  std::string s = "ICER=" + fixed4(icer) + "\nIRER=" + fixed4(irer) + "\nN=" + std::to_string(n) + "\n";
  if (has_baseline) {
    auto ri = [](const std::optional<double>& v) { return v ? fixed4(*v) : std::string("n/a"); };
    s += "RI-ICER=" + ri(ri_icer) + "\nRI-IRER=" + ri(ri_irer) + "\n";
  }
  return s;
}

EvalReport EvalReport::parse(std::string_view text) {
  EvalReport r;
  bool seen_icer = false, seen_irer = false, seen_n = false;
  std::istringstream in{std::string(text)};
  std::string line;
  auto number = [](const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const double x = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw FormatError("eval report: bad value for " + key + ": '" + v + "'");
    }
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("eval report: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "ICER") {
      r.icer = number(key, value);
      seen_icer = true;
    } else if (key == "IRER") {
      r.irer = number(key, value);
      seen_irer = true;
    } else if (key == "N") {
      r.n = static_cast<std::size_t>(number(key, value));
      seen_n = true;
    } else if (key == "RI-ICER" || key == "RI-IRER") {
      r.has_baseline = true;
      auto& slot = key == "RI-ICER" ? r.ri_icer : r.ri_irer;
      if (value != "n/a") slot = number(key, value);
    } else {
      throw FormatError("eval report: unknown key '" + key + "'");
    }
  }
  if (!seen_icer || !seen_irer || !seen_n) throw FormatError("eval report: missing ICER, IRER or N");
  return r;
}

}  // namespace fans
