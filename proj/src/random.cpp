// SPDX-License-Identifier: Apache-2.0

#include "r2f/random.hpp"

namespace r2f {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
    return splitmix64(fnv1a64(tag.data(), tag.size(), splitmix64(base)));
}

void fill_normal(Tensor& t, Rng& rng, float stddev) {
    std::normal_distribution<float> dist(0.0F, stddev);
    for (auto& v : t.data()) v = dist(rng);
}

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace r2f
