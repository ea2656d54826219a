// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer language model with optional LoRA adapters.
//
// Layout is pre-LN: x = emb(tok) + emb(pos); per layer x += attn(ln1(x)) and
// x += mlp(ln2(x)); logits = ln_f(x) * head + head.b. Projections are
// row-vector style, y = x * W with W of shape [d_model, d_model].

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "r2f/tape.hpp"
#include "r2f/tensor.hpp"

namespace r2f {

using Tokens = std::vector<std::size_t>;

enum class ModelRole { proxy, target };

const char* role_name(ModelRole role);
ModelRole parse_role(std::string_view name);

struct ModelConfig {
    std::size_t vocab_size = 128;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t seq_len = 16;
    ModelRole role = ModelRole::proxy;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

/// Hand count of every parameter tensor for `cfg`.
std::size_t parameter_count(const ModelConfig& cfg);

/// The four attention projections, in name order.
const std::vector<std::string>& projection_names();
std::string weight_name(std::size_t layer, std::string_view projection);

struct ModelParams {
    ModelConfig config;
    TensorMap tensors;

    /// Concatenation of all tensors in name order.
    Tensor flatten() const;
    static ModelParams unflatten(const ModelConfig& config, const Tensor& flat);

    const Tensor& weight(std::size_t layer, std::string_view projection) const;
    Tensor& weight(std::size_t layer, std::string_view projection);
};

/// Scaled Gaussian weights, zero biases, unit layer-norm gains.
ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

struct LoraAdapter {
    std::size_t layer = 0;
    std::string projection;
    Tensor A;  // [d_model, r]
    Tensor B;  // [r, d_model]

    std::size_t rank() const { return A.cols(); }
    /// Tape input names for A and B.
    std::string a_name() const;
    std::string b_name() const;

    bool operator==(const LoraAdapter&) const = default;
};

/// Sorted by (layer, projection name).
using AdapterSet = std::vector<LoraAdapter>;

/// One adapter per (layer, projection) for every layer. A ~ N(0, 1/r) and
/// B = 0. A is drawn from (seed, projection) only, so every layer and every
/// model with the same d_model gets the same A for a projection.
AdapterSet attach_lora(const ModelParams& params, std::size_t rank, const std::vector<std::string>& targets,
                       std::uint64_t seed);

/// Copy of `params` with W + A*B substituted for each adapted projection.
ModelParams merge_lora(const ModelParams& params, const AdapterSet& adapters);

/// A and B of every adapter, in set order, A before B, row-major.
Tensor flatten_adapters(const AdapterSet& adapters);

/// Tape for a batch of prompts. Each sequence occupies `block` rows (the
/// longest prompt length), right-padded with token 0; attention is causal and
/// confined to the sequence's own block.
struct LmGraph {
    ComputeTape tape;
    NodeId logits = 0;        // [batch * block, vocab]
    NodeId final_hidden = 0;  // [batch * block, d_model], after ln_f
    NodeId loss = 0;          // only when targets were given
    bool has_loss = false;
    std::size_t block = 0;
    std::vector<std::size_t> last_rows;  // row of each prompt's final token
    std::vector<std::size_t> lengths;
};

/// `targets`, when non-null, is [batch, vocab]: one distribution per prompt
/// scored at the prompt's last position. The loss is the batch mean.
LmGraph build_lm_graph(const ModelConfig& config, const AdapterSet* adapters, std::span<const Tokens> batch,
                       const Tensor* targets = nullptr);

/// Bindings for a graph built over `params` and `adapters`. Both must outlive
/// the evaluation.
Bindings bind_model(const ModelParams& params, const AdapterSet* adapters);

/// Next-token distribution at every position of `tokens`, shape [T, vocab].
Tensor forward_lm(const ModelParams& params, const AdapterSet* adapters, const Tokens& tokens);

/// Next-token distribution at the last position of each prompt, [n, vocab].
Tensor last_token_distributions(const ModelParams& params, const AdapterSet* adapters,
                                std::span<const Tokens> prompts);

/// Greedy answer (argmax at the last position) for each prompt.
std::vector<std::size_t> greedy_answers(const ModelParams& params, const AdapterSet* adapters,
                                        std::span<const Tokens> prompts);

/// Mean-pooled final hidden state of one prompt, [d_model].
Tensor embed_prompt(const ModelParams& params, const AdapterSet* adapters, const Tokens& tokens);

/// Cross-entropy between the target distribution `y` ([vocab]) and the
/// prediction at the last prompt position.
double loss_ce(const ModelParams& params, const AdapterSet* adapters, const Tokens& x, const Tensor& y);

/// Throws config when `y` is not a distribution over `vocab` entries.
void check_distribution(const Tensor& y, std::size_t vocab);

Tensor one_hot(std::size_t index, std::size_t size);

struct LmExample {
    Tokens prompt;
    std::size_t answer = 0;
};

struct PretrainConfig {
    std::size_t steps = 3000;
    std::size_t batch = 32;
    float lr = 3e-3F;
    std::uint64_t seed = 0;
};

struct PretrainReport {
    std::vector<double> loss;  // per step
    double accuracy = 0.0;     // on the training examples after the last step
};

/// Adam on the mean one-hot cross-entropy of answer tokens. Minibatches are a
/// seeded reshuffle of the examples per pass.
ModelParams pretrain(ModelParams params, std::span<const LmExample> examples, const PretrainConfig& hyper,
                     PretrainReport* report = nullptr);

/// Fraction of examples whose greedy answer is correct.
double answer_accuracy(const ModelParams& params, const AdapterSet* adapters, std::span<const LmExample> examples);

}  // namespace r2f
