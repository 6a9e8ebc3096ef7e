#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "hypermixer/mask.hpp"

namespace hmx {

/// One padded mini-batch. Token models read `tokens`, signal models read
/// `signal`; classifiers use `labels`, per-token regressors use `targets`.
struct Batch {
    std::size_t size = 0;
    std::size_t length = 0;
    std::vector<std::int32_t> tokens;  // [size * length]
    std::vector<double> signal;        // [size * length]
    Mask mask;
    std::vector<std::int32_t> labels;  // [size]
    std::vector<double> targets;       // [size * length]
    std::size_t truncated = 0;         // examples cut to the length cap
};

}  // namespace hmx
