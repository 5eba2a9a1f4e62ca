#pragma once

#include <string>
#include <vector>

#include "hiri/model.hpp"

namespace hiri {

enum class Quantity { Params, GFlops };

/// A published figure. GFLOPs figures are compared against GMACs of the
/// analytic count (see cost.hpp for the convention).
struct ExpectedValue {
  std::string model;  // "S", "B", "L" or "row<N>"
  Quantity quantity;
  Index resolution;   // 0 for parameter counts
  double value;       // millions of parameters or billions of operations
  std::string source;
};

const std::vector<ExpectedValue>& published_values();

/// Config for an ExpectedValue::model key.
ModelConfig expected_model_config(const std::string& key);

struct VerifyRow {
  ExpectedValue expected;
  double measured = 0.0;
  double rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;

  std::string label() const;
};

std::vector<VerifyRow> verify_tables(double tol_params = 0.03, double tol_flops = 0.10);

}  // namespace hiri
