#pragma once

#include <deque>
#include <random>
#include <string>
#include <unordered_map>

#include "hiri/tape.hpp"

namespace hiri {

using Rng = std::mt19937_64;

/// Named hierarchy of tensors ("stage4.3.attn.q.weight"). Iteration follows
/// insertion order. Learnable tensors have requires_grad set; buffers such as
/// BN running statistics do not.
class ParamTree {
 public:
  struct Entry {
    std::string path;
    Tensor tensor;
    bool operator==(const Entry&) const = default;
  };

  Tensor& add(std::string path, Array value, bool learnable = true);

  bool contains(const std::string& path) const { return index_.contains(path); }
  Tensor& at(const std::string& path);
  const Tensor& at(const std::string& path) const;

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  /// Number of learnable scalars.
  Index parameter_count() const;
  /// Learnable scalars whose path starts with `prefix` followed by '.'.
  Index parameter_count(const std::string& prefix) const;

  void zero_grad();
  /// Same paths in the same order with identical shapes.
  bool isomorphic(const ParamTree& other) const;

  bool operator==(const ParamTree& other) const { return entries_ == other.entries_; }

 private:
  std::deque<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Normal(0, stddev) truncated to [-2 stddev, 2 stddev] by rejection.
Array truncated_normal(const Shape& shape, double stddev, Rng& rng);

/// True for names of non-learnable running statistics.
bool is_buffer_name(const std::string& path);

}  // namespace hiri
