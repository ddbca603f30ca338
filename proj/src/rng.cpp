// SPDX-License-Identifier: Apache-2.0
#include "avf/rng.hpp"

#include <cmath>

namespace avf {
namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// SplitMix64 finalizer; statistically strong enough for simulation streams.
std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::uint64_t hash_label(std::string_view s) {
    // FNV-1a 64
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t derive_key(std::uint64_t root, const std::vector<std::uint64_t>& path) {
    std::uint64_t k = mix64(root + kGolden);
    for (std::uint64_t label : path) {
        k = mix64(k ^ mix64(label + kGolden));
    }
    return k;
}

} // namespace

RngStream::RngStream(std::uint64_t root_seed)
    : root_seed_(root_seed), key_(derive_key(root_seed, {})) {}

RngStream RngStream::child(std::uint64_t label) const {
    RngStream c = *this;
    c.path_.push_back(label);
    c.path_names_.push_back(std::to_string(label));
    c.counter_ = 0;
    c.key_ = derive_key(root_seed_, c.path_);
    return c;
}

RngStream RngStream::child(std::string_view label) const {
    RngStream c = *this;
    c.path_.push_back(hash_label(label));
    c.path_names_.emplace_back(label);
    c.counter_ = 0;
    c.key_ = derive_key(root_seed_, c.path_);
    return c;
}

std::uint64_t RngStream::next_u64() {
    ++counter_;
    return mix64(key_ + counter_ * kGolden);
}

double RngStream::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
    // Box–Muller, cosine branch; u1 nudged away from 0 so log stays finite.
    const double u1 = (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Tensor RngStream::gaussian(Tensor::Shape shape) {
    Tensor out(std::move(shape));
    double* d = out.mutable_data();
    for (std::size_t i = 0; i < out.size(); ++i) d[i] = normal();
    return out;
}

Tensor RngStream::uniform_tensor(Tensor::Shape shape, double lo, double hi) {
    Tensor out(std::move(shape));
    double* d = out.mutable_data();
    for (std::size_t i = 0; i < out.size(); ++i) d[i] = lo + (hi - lo) * uniform();
    return out;
}

std::string RngStream::path_string() const {
    std::string s = std::to_string(root_seed_);
    for (const auto& name : path_names_) {
        s += "/";
        s += name;
    }
    return s;
}

} // namespace avf
