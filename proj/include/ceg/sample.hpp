#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ceg/core_math.hpp"

namespace ceg {

using SampleId = std::int64_t;

/// One feature vector with its domain. `hidden_class` is ground truth and is
/// only read by the labeling oracle and by evaluation.
struct Sample {
  SampleId id = 0;
  Vec features;
  std::size_t domain = 0;
  std::size_t hidden_class = 0;

  bool operator==(const Sample&) const = default;
};

}  // namespace ceg
