#include "hiri/gradcheck.hpp"

#include <algorithm>

namespace hiri {

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
  return worst;
}

const GradCheckEntry& GradCheckReport::worst() const {
  if (entries.empty()) throw ContractError("empty gradient-check report");
  return *std::max_element(entries.begin(), entries.end(),
                           [](const auto& a, const auto& b) { return a.max_rel_error < b.max_rel_error; });
}

double relative_error(const Array& a, const Array& b, Index* worst_index, double floor) {
  a.require_same_shape(b, "relative_error");
  double diff = 0.0, scale = 0.0;
  Index where = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    if (d > diff) {
      diff = d;
      where = i;
    }
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  if (worst_index != nullptr) *worst_index = where;
  scale = std::max(scale, floor);
  return scale == 0.0 ? 0.0 : diff / scale;
}

GradCheckReport grad_check(const std::vector<GradTarget>& targets, const std::function<Var(Tape&)>& loss,
                           double step, double tolerance) {
  GradCheckReport report;
  report.tolerance = tolerance;
  for (const auto& t : targets) {
    t.tensor->zero_grad();
    t.tensor->set_requires_grad(true);
  }
  {
    Tape tape;
    const Var out = loss(tape);
    tape.backward(out);
  }
  const auto evaluate = [&loss] {
    Tape tape(false);
    return loss(tape).value()[0];
  };
  std::vector<Array> analytic, numeric;
  double global = 0.0;
  for (const auto& t : targets) {
    analytic.push_back(t.tensor->grad() ? *t.tensor->grad() : Array(t.tensor->shape()));
    numeric.emplace_back(t.tensor->shape());
    Array& data = t.tensor->data();
    for (Index i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      const double plus = evaluate();
      data[i] = saved - step;
      const double minus = evaluate();
      data[i] = saved;
      numeric.back()[i] = (plus - minus) / (2.0 * step);
    }
    for (Index i = 0; i < data.size(); ++i) {
      global = std::max({global, std::abs(numeric.back()[i]), std::abs(analytic.back()[i])});
    }
  }
  for (std::size_t k = 0; k < targets.size(); ++k) {
    GradCheckEntry entry;
    entry.name = targets[k].name;
    entry.elements = targets[k].tensor->size();
    entry.max_rel_error = relative_error(numeric[k], analytic[k], &entry.worst_index, kScaleFloor * global);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

GradCheckReport grad_check(const std::function<Var(const Var&)>& f, const Array& x, double step, double tolerance) {
  Tensor input(x, true);
  return grad_check({{"input", &input}}, [&](Tape& tape) { return f(tape.bind(input)); }, step, tolerance);
}

}  // namespace hiri
