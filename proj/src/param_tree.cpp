#include "hiri/param_tree.hpp"

namespace hiri {

Tensor& ParamTree::add(std::string path, Array value, bool learnable) {
  if (index_.contains(path)) throw ConfigError("duplicate parameter path: " + path);
  index_.emplace(path, entries_.size());
  entries_.push_back({std::move(path), Tensor(std::move(value), learnable)});
  return entries_.back().tensor;
}

Tensor& ParamTree::at(const std::string& path) {
  const auto it = index_.find(path);
  if (it == index_.end()) throw ConfigError("unknown parameter path: " + path);
  return entries_[it->second].tensor;
}

const Tensor& ParamTree::at(const std::string& path) const {
  const auto it = index_.find(path);
  if (it == index_.end()) throw ConfigError("unknown parameter path: " + path);
  return entries_[it->second].tensor;
}

Index ParamTree::parameter_count() const {
  Index total = 0;
  for (const Entry& e : entries_) {
    if (e.tensor.requires_grad()) total += e.tensor.size();
  }
  return total;
}

Index ParamTree::parameter_count(const std::string& prefix) const {
  const std::string head = prefix + ".";
  Index total = 0;
  for (const Entry& e : entries_) {
    if (e.tensor.requires_grad() && e.path.starts_with(head)) total += e.tensor.size();
  }
  return total;
}

void ParamTree::zero_grad() {
  for (Entry& e : entries_) e.tensor.zero_grad();
}

bool ParamTree::isomorphic(const ParamTree& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].path != other.entries_[i].path || entries_[i].tensor.shape() != other.entries_[i].tensor.shape()) {
      return false;
    }
  }
  return true;
}

Array truncated_normal(const Shape& shape, double stddev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Array out(shape);
  for (double& v : out.values()) {
    do {
      v = normal(rng);
    } while (std::abs(v) > 2.0 * stddev);
  }
  return out;
}

bool is_buffer_name(const std::string& path) {
  return path.ends_with(".running_mean") || path.ends_with(".running_var");
}

}  // namespace hiri
