#pragma once

#include <random>

#include "hiri/param_tree.hpp"

namespace hiri::test {

inline Array randn(const Shape& shape, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, stddev);
  Array a(shape);
  for (double& v : a.values()) v = normal(rng);
  return a;
}

inline Array filled(const Shape& shape, std::initializer_list<double> values) {
  return Array(shape, std::vector<double>(values));
}

/// Forward value of `f` on a gradient-free tape.
template <typename F>
Array eval(F&& f) {
  Tape tape(false);
  return f(tape).value();
}

}  // namespace hiri::test
