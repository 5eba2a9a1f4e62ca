#include "hiri/expected.hpp"

#include <fmt/format.h>

#include <cmath>
#include <map>

#include "hiri/cost.hpp"

namespace hiri {

const std::vector<ExpectedValue>& published_values() {
  static const std::string kMain = "published variant comparison, ImageNet-1K classification";
  static const std::string kLarge = "published 768x768 fine-tuning comparison";
  static const std::string kLadder = "published ablation ladder from the four-stage baseline";
  static const std::vector<ExpectedValue> values{
      {"S", Quantity::Params, 0, 34.8, kMain},
      {"B", Quantity::Params, 0, 54.4, kMain},
      {"L", Quantity::Params, 0, 94.4, kMain},
      {"S", Quantity::GFlops, 224, 4.5, kMain},
      {"S", Quantity::GFlops, 384, 4.7, kMain},
      {"S", Quantity::GFlops, 448, 5.0, kMain},
      {"B", Quantity::GFlops, 224, 8.2, kMain},
      {"B", Quantity::GFlops, 384, 9.3, kMain},
      {"B", Quantity::GFlops, 448, 9.9, kMain},
      {"L", Quantity::GFlops, 224, 17.0, kMain},
      {"L", Quantity::GFlops, 384, 18.2, kMain},
      {"L", Quantity::GFlops, 448, 19.9, kMain},
      {"S", Quantity::GFlops, 768, 16.1, kLarge},
      {"B", Quantity::GFlops, 768, 31.6, kLarge},
      {"L", Quantity::GFlops, 768, 63.4, kLarge},
      {"row1", Quantity::Params, 0, 35.0, kLadder + ", row 1 (baseline)"},
      {"row2", Quantity::Params, 0, 35.1, kLadder + ", row 2 (convolutional FFN)"},
      {"row3", Quantity::Params, 0, 34.2, kLadder + ", row 3 (no attention in stages 1-2)"},
      {"row4", Quantity::Params, 0, 34.2, kLadder + ", row 4 (batch norm)"},
      {"row5", Quantity::Params, 0, 34.2, kLadder + ", row 5 (conv stem)"},
      {"row6", Quantity::Params, 0, 34.5, kLadder + ", row 6 (inverted residual downsampling)"},
      {"row7", Quantity::Params, 0, 34.5, kLadder + ", row 7 (448 input)"},
      {"row1", Quantity::GFlops, 224, 4.4, kLadder + ", row 1 (baseline)"},
      {"row2", Quantity::GFlops, 224, 4.4, kLadder + ", row 2 (convolutional FFN)"},
      {"row3", Quantity::GFlops, 224, 4.3, kLadder + ", row 3 (no attention in stages 1-2)"},
      {"row4", Quantity::GFlops, 224, 4.2, kLadder + ", row 4 (batch norm)"},
      {"row5", Quantity::GFlops, 224, 4.5, kLadder + ", row 5 (conv stem)"},
      {"row6", Quantity::GFlops, 224, 4.7, kLadder + ", row 6 (inverted residual downsampling)"},
      {"row7", Quantity::GFlops, 448, 21.5, kLadder + ", row 7 (448 input)"},
  };
  return values;
}

ModelConfig expected_model_config(const std::string& key) {
  if (key.starts_with("row")) return mvit_row_config(std::stoi(key.substr(3)));
  return hiri_vit_config(parse_variant(key));
}

std::string VerifyRow::label() const {
  const std::string name = expected.model.starts_with("row") ? "M-ViT " + expected.model : "HIRI-ViT-" + expected.model;
  if (expected.quantity == Quantity::Params) return name + " params";
  return name + " GFLOPs@" + std::to_string(expected.resolution);
}

std::vector<VerifyRow> verify_tables(double tol_params, double tol_flops) {
  std::map<std::string, Model> models;
  std::vector<VerifyRow> rows;
  for (const ExpectedValue& e : published_values()) {
    auto it = models.find(e.model);
    if (it == models.end()) it = models.emplace(e.model, Model(expected_model_config(e.model))).first;
    const Model& model = it->second;
    VerifyRow row;
    row.expected = e;
    if (e.quantity == Quantity::Params) {
      row.measured = static_cast<double>(model.param_count()) / 1e6;
      row.tolerance = tol_params;
    } else {
      row.measured = static_cast<double>(count_flops(model, e.resolution).total_macs()) / 1e9;
      row.tolerance = tol_flops;
    }
    row.rel_error = (row.measured - e.value) / e.value;
    row.pass = std::abs(row.rel_error) <= row.tolerance;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace hiri
