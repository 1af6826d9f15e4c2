#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "prrg/tensor.hpp"

namespace prrg {

/// ||a - n|| / max(||a||, ||n||, floor): norm-relative error per tensor.
double relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor = 1e-6);

struct GradcheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double threshold = 0.0;
  std::size_t trials = 0;
  bool passed() const { return max_rel_error < threshold; }
};

/// Compares backward() of `loss` against central differences on every
/// input. `loss` must rebuild the graph from the inputs on each call. The
/// norm floor is 1e-6 * max(1, |loss|, ||full analytic gradient||).
double max_gradient_error(const std::function<Tensor()>& loss, std::vector<Tensor> inputs, double h = 1e-5);

struct GradcheckOptions {
  std::size_t trials = 100;
  std::uint64_t seed = 12345;
  bool end_to_end = true;
  /// Adds an op whose backward is deliberately wrong; the suite must fail.
  bool corrupt = false;
  double op_threshold = 1e-4;
  double end_to_end_threshold = 1e-3;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  bool passed() const;
  /// One line per entry with its maximum relative error.
  std::string text() const;
};

GradcheckReport run_gradcheck(const GradcheckOptions& opts = {});

/// End-to-end loss gradient of a small model (2 layers per stack, width 16,
/// 2-sample batch, dropout 0) over every parameter.
GradcheckEntry end_to_end_gradcheck(double threshold = 1e-3, std::uint64_t seed = 7);

}  // namespace prrg
