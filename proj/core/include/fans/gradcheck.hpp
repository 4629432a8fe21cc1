// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fans/autodiff.hpp"
#include "fans/tensor.hpp"

namespace fans {

struct GradcheckOptions {
  double step = 1e-5;        // central-difference half width
  double tolerance = 1e-4;   // maximum relative error
  double floor = 1e-5;       // denominator floor; FD round-off is ~1e-10 absolute
  std::size_t samples = 16;  // entries checked per tensor (all when smaller)
  std::uint64_t seed = 7;
};

struct GradcheckRow {
  std::string component;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

/// Scalar loss over parameters held by the caller.
using LossBuilder = std::function<Var<double>(Graph<double>&)>;

/// Compares backward() against central differences for sampled entries of
/// each tensor in `params`. The builder must register those tensors with
/// Graph::param so their gradients land in Tensor::grad.
GradcheckRow check_gradients(const std::string& name, const std::vector<Tensor<double>*>& params,
                             const LossBuilder& loss, const GradcheckOptions& opts = {});

/// Names of the built-in components, in report order.
std::vector<std::string> gradcheck_components();

GradcheckRow run_gradcheck_component(const std::string& name, const GradcheckOptions& opts = {});
std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& opts = {});

/// One line per row plus a summary line.
std::string format_gradcheck(const std::vector<GradcheckRow>& rows, double tolerance);

}  // namespace fans
