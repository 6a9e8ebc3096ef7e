#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "hypermixer/errors.hpp"

namespace hmx {

/// Per-position validity of a padded batch: valid(b, j) is true for real tokens
/// and false for padding.
struct Mask {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<std::uint8_t> valid;

    static Mask all_valid(std::size_t batch, std::size_t length)
    {
        return Mask{batch, length, std::vector<std::uint8_t>(batch * length, 1)};
    }

    /// Left-aligned tokens, right padding.
    static Mask from_lengths(std::span<const std::size_t> lengths, std::size_t length)
    {
        Mask m{lengths.size(), length, std::vector<std::uint8_t>(lengths.size() * length, 0)};
        for (std::size_t b = 0; b < lengths.size(); ++b) {
            if (lengths[b] > length) throw ShapeError("sequence length exceeds padded length");
            for (std::size_t j = 0; j < lengths[b]; ++j) m.valid[b * length + j] = 1;
        }
        return m;
    }

    bool operator()(std::size_t b, std::size_t j) const { return valid[b * length + j] != 0; }

    std::size_t valid_count(std::size_t b) const
    {
        std::size_t n = 0;
        for (std::size_t j = 0; j < length; ++j) n += valid[b * length + j];
        return n;
    }

    /// True when every row is a run of valid positions followed only by padding.
    bool is_prefix() const
    {
        for (std::size_t b = 0; b < batch; ++b) {
            bool seen_pad = false;
            for (std::size_t j = 0; j < length; ++j) {
                if (!(*this)(b, j)) seen_pad = true;
                else if (seen_pad) return false;
            }
        }
        return true;
    }
};

}  // namespace hmx
