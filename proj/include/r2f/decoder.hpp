// SPDX-License-Identifier: Apache-2.0
//
// Gradient decoder: one MLP per projection name, shared across layers, that
// maps a (layer's) flattened LoRA gradient to that layer's projection-weight
// gradient.
//
// Input row:  [ (grad_A, grad_B) / s , one-hot(layer) ]   width 2*d*r + L
// Output row: t * (mlp(input) [+ input * ws])              width d*d
//
// s is the mean training-input norm, t the RMS training-target coordinate.
// Layers at or beyond the one-hot width (a deeper target) get a zero one-hot.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "r2f/checkpoint.hpp"
#include "r2f/gradients.hpp"

namespace r2f {

struct DecoderHyper {
    std::size_t epochs = 30;
    std::size_t batch = 64;
    float lr = 1e-3F;
    double holdout = 0.2;
    std::size_t patience = 5;
    /// Hidden width is min(4 * input width, max_hidden).
    std::size_t max_hidden = 256;
    bool linear_skip = false;
    std::uint64_t seed = 0;
};

/// Two tanh hidden layers and a linear output, plus an optional linear skip
/// from input to output (zero at init).
struct DecoderNet {
    Tensor w1, b1;  // [in, h], [h]
    Tensor w2, b2;  // [h, h], [h]
    Tensor w3, b3;  // [h, out], [out]
    Tensor ws;      // [in, out], or empty when the skip is disabled
    double in_scale = 1.0;
    double out_scale = 1.0;

    bool operator==(const DecoderNet&) const = default;
};

struct DecoderParams {
    std::string model_hash;
    std::string adapter_spec;
    int flatten_version = kFlattenVersion;
    std::size_t d_model = 0;
    std::size_t rank = 0;
    std::size_t n_layers = 0;  // one-hot width
    std::size_t hidden = 0;
    bool linear_skip = false;
    std::uint64_t seed = 0;
    std::map<std::string, DecoderNet> nets;

    std::size_t input_width() const { return 2 * d_model * rank + n_layers; }
    std::size_t output_width() const { return d_model * d_model; }
    std::size_t parameter_count() const;
    bool operator==(const DecoderParams&) const = default;
};

/// Fresh decoder shaped for `pairs`: Gaussian 1/sqrt(fan_in) weights, zero
/// biases, unit scales.
DecoderParams init_decoder(const GradientPairDataset& pairs, const DecoderHyper& hyper);

/// Same layout with every weight and bias zero.
DecoderParams zero_decoder(const GradientPairDataset& pairs, const DecoderHyper& hyper);

/// Throws incompatible unless the decoder was trained for this adapter layout.
void check_decoder_compatible(const DecoderParams& dec, const std::string& adapter_spec, std::size_t d_model);

FullGradient decode(const DecoderParams& dec, const LoraGradient& lora);

struct CurvePoint {
    std::size_t epoch = 0;  // 1-based
    double train_mse = 0.0;
    double holdout_mse = 0.0;
};

struct TrainReport {
    double initial_holdout_mse = 0.0;
    std::vector<CurvePoint> curve;
    std::size_t selected_epoch = 0;  // 0 = initialization kept
    double selected_holdout_mse = 0.0;
    std::size_t train_pairs = 0;
    std::size_t holdout_pairs = 0;
};

struct TrainedDecoder {
    DecoderParams params;
    TrainReport report;
};

/// Adam on per-row squared error in normalized units, early stopping on the
/// holdout MSE. The returned parameters are those of the selected epoch.
TrainedDecoder train_decoder(const GradientPairDataset& pairs, const DecoderHyper& hyper);

/// Mean over pairs of the squared Euclidean error, all layers and projections
/// concatenated.
double decoder_mse(const DecoderParams& dec, const GradientPairDataset& pairs);

struct ReconstructionStats {
    double mean = 0.0;
    double median = 0.0;
    double min = 0.0;
    std::size_t counted = 0;
    std::size_t degenerate_target = 0;  // true gradient norm < 1e-8
    std::size_t degenerate_output = 0;  // decoded norm < 1e-8
};

/// Per-pair cosine between decoded and true full gradients.
ReconstructionStats reconstruction_quality(const DecoderParams& dec, const GradientPairDataset& pairs);

/// Rows `ids` (in that order) of a dataset, header kept.
GradientPairDataset subset(const GradientPairDataset& ds, const std::vector<std::size_t>& ids);

Container decoder_to_container(const DecoderParams& dec);
DecoderParams decoder_from_container(const Container& c);

}  // namespace r2f
