// SPDX-License-Identifier: Apache-2.0
//
// LoRA and projection-weight gradients, view averaging, and proxy pair
// collection.
//
// Canonical flattening order (version 1): layer ascending, then projection
// name ascending; within an entry grad_A before grad_B; row-major.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "r2f/checkpoint.hpp"
#include "r2f/model.hpp"

namespace r2f {

inline constexpr int kFlattenVersion = 1;

struct LoraGradEntry {
    std::size_t layer = 0;
    std::string projection;
    Tensor grad_A;  // [d_model, r]
    Tensor grad_B;  // [r, d_model]
};

struct LoraGradient {
    std::vector<LoraGradEntry> entries;
    std::size_t views = 1;

    Tensor flatten() const;
    /// Entry layout is taken from `like`; values from `flat`.
    static LoraGradient unflatten(const LoraGradient& like, const Tensor& flat);
};

struct FullGradEntry {
    std::size_t layer = 0;
    std::string projection;
    Tensor grad_W;  // [d_model, d_model]
};

struct FullGradient {
    std::vector<FullGradEntry> entries;

    Tensor flatten() const;
    static FullGradient unflatten(const FullGradient& like, const Tensor& flat);
};

/// Gradient of loss_ce with respect to the adapters' A and B only.
LoraGradient lora_gradient(const ModelParams& params, const AdapterSet& adapters, const Tokens& x, const Tensor& y);

/// Gradient of loss_ce with respect to the named projection weights of every
/// layer, for the model without adapters.
FullGradient full_gradient(const ModelParams& params, const std::vector<std::string>& projections, const Tokens& x,
                           const Tensor& y);

struct GradientPair {
    std::uint64_t example_id = 0;
    LoraGradient lora;
    FullGradient full;
};

/// Both sides from one backward pass at identical (params, adapters, x, y).
/// The full side is the gradient of the effective weights W + A*B.
GradientPair gradient_pair(const ModelParams& params, const AdapterSet& adapters, const Tokens& x, const Tensor& y,
                           std::uint64_t example_id = 0);

/// Coordinate-wise mean; `views` records the list length.
LoraGradient average_views(const std::vector<LoraGradient>& grads);

/// Adapter layout string: d_model, rank, projections, A seed. Two adapter sets
/// with the same spec have identical A tensors.
std::string adapter_spec(const AdapterSet& adapters, std::size_t d_model, std::uint64_t seed);

struct PairExample {
    std::uint64_t id = 0;
    Tokens x;
    Tensor y;
};

/// Rows are examples in input order. `lora` is [n, lora width] and `full` is
/// [n, full width], both in canonical flattening order.
struct GradientPairDataset {
    std::string model_hash;
    std::string adapter_spec;
    std::string source = "proxy";
    int flatten_version = kFlattenVersion;
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t rank = 0;
    std::vector<std::string> projections;
    std::vector<std::uint64_t> example_ids;
    Tensor lora;
    Tensor full;

    std::size_t size() const { return example_ids.size(); }
    std::size_t lora_width() const { return n_layers * projections.size() * 2 * d_model * rank; }
    std::size_t full_width() const { return n_layers * projections.size() * d_model * d_model; }
};

GradientPairDataset collect_pairs(const ModelParams& proxy, const AdapterSet& adapters, std::uint64_t adapter_seed,
                                  const std::vector<PairExample>& examples, std::size_t limit);

Container dataset_to_container(const GradientPairDataset& ds);
GradientPairDataset dataset_from_container(const Container& c);

/// Stable hash of a model config (role excluded), 16 hex digits.
std::string model_config_hash(const ModelConfig& config);

}  // namespace r2f
