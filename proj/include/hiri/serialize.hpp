#pragma once

// Text model configs and binary tensor checkpoints.
//
// Checkpoint layout (little-endian):
//   "HIRI" | u32 version
//   repeated { u32 name_len | name | u32 rank | u64 extents[rank] | f64 payload[numel] }
//   u32 crc32 over every payload byte, in record order

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "hiri/model.hpp"

namespace hiri {

/// Parses "key: value" lines and "stage: k=v ..." records. '#' starts a
/// comment. Unknown keys, missing keys and bad values raise ConfigError.
ModelConfig parse_config(const std::string& text);
std::string format_config(const ModelConfig& config);
ModelConfig load_config(const std::filesystem::path& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Array value;
  bool operator==(const NamedArray&) const = default;
};

void write_records(std::ostream& out, const std::vector<NamedArray>& records);
std::vector<NamedArray> read_records(std::istream& in);

void save_checkpoint(const ParamTree& tree, const std::filesystem::path& path);
/// Tensors named *.running_mean / *.running_var load as non-learnable.
ParamTree load_checkpoint(const std::filesystem::path& path);

void save_records(const std::vector<NamedArray>& records, const std::filesystem::path& path);
std::vector<NamedArray> load_records(const std::filesystem::path& path);

}  // namespace hiri
