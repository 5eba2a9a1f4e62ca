#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hiri/tape.hpp"

namespace hiri {

inline constexpr double kScaleFloor = 1e-3;

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  Index worst_index = 0;
  Index elements = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  double max_rel_error() const;
  const GradCheckEntry& worst() const;
  bool passed() const { return max_rel_error() < tolerance; }
};

/// A named tensor to differentiate against.
struct GradTarget {
  std::string name;
  Tensor* tensor;
};

/// Compares reverse-mode gradients of `loss` against central differences.
/// `loss` must bind every target it depends on via Tape::bind and return a
/// scalar; it is re-evaluated twice per element.
///
/// The error of each tensor is max|fd - ad| / max(max|fd|, max|ad|, F) with
/// F = kScaleFloor times the largest gradient entry over all targets, so
/// gradients that vanish identically (a bias feeding batch statistics) are
/// judged against the overall scale instead of against round-off.
GradCheckReport grad_check(const std::vector<GradTarget>& targets, const std::function<Var(Tape&)>& loss,
                           double step = 1e-5, double tolerance = 1e-4);

/// Single-input form: `f` maps the bound input to a scalar.
GradCheckReport grad_check(const std::function<Var(const Var&)>& f, const Array& x, double step = 1e-5,
                           double tolerance = 1e-4);

/// max|a-b| / max(max|a|, max|b|, floor); zero when all three are zero.
double relative_error(const Array& a, const Array& b, Index* worst_index = nullptr, double floor = 0.0);

}  // namespace hiri
