#pragma once

// Small randomized instances of every block for gradient checking.

#include <cstdint>
#include <string>
#include <vector>

#include "hiri/gradcheck.hpp"

namespace hiri {

const std::vector<std::string>& gradcheck_block_names();

struct BlockCheckOptions {
  Index channels = 4;
  Index size = 4;  // spatial side of the block input
  Index batch = 2;
  std::uint64_t seed = 0;
  double step = 1e-5;
  double tolerance = 1e-4;
};

/// Checks every learnable tensor of the named block plus its input against
/// central differences, with train-mode normalization and a random linear
/// projection of the output as the loss. Throws ConfigError for unknown names.
GradCheckReport grad_check_block(const std::string& name, const BlockCheckOptions& options = {});

}  // namespace hiri
