// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "avf/tensor.hpp"

namespace avf {

/// Counter-based random stream: every output is a pure function of
/// (root_seed, stream_path, counter), so independent substreams can be
/// handed to parallel workers and replayed exactly.
///
/// Drawing advances the counter of this value; fork substreams with child().
class RngStream {
public:
    explicit RngStream(std::uint64_t root_seed);

    RngStream child(std::uint64_t label) const;
    RngStream child(std::string_view label) const;

    std::uint64_t root_seed() const { return root_seed_; }
    const std::vector<std::uint64_t>& stream_path() const { return path_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64();
    /// Uniform draw in [0, 1).
    double uniform();
    /// One standard normal draw (consumes two counter steps).
    double normal();

    Tensor gaussian(Tensor::Shape shape);
    Tensor uniform_tensor(Tensor::Shape shape, double lo, double hi);

    /// Human-readable path, e.g. "42/member/3" when labels came from strings.
    std::string path_string() const;

private:
    std::uint64_t root_seed_;
    std::vector<std::uint64_t> path_;
    std::vector<std::string> path_names_;
    std::uint64_t counter_ = 0;
    std::uint64_t key_;
};

} // namespace avf
