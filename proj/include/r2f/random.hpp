// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "r2f/tensor.hpp"

namespace r2f {

/// Derives an independent stream seed from a base seed and a tag, so every
/// consumer of randomness gets its own reproducible stream.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);

using Rng = std::mt19937_64;

void fill_normal(Tensor& t, Rng& rng, float stddev);

/// FNV-1a, used for checksums and config hashes.
std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace r2f
