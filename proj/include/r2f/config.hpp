// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a flat text file of `section.key = value` lines.
// Every key has a default; unknown or repeated keys are load errors.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "r2f/corpus.hpp"
#include "r2f/decoder.hpp"
#include "r2f/eval.hpp"
#include "r2f/model.hpp"
#include "r2f/unlearn.hpp"

namespace r2f {

struct RunConfig {
    CorpusConfig corpus;

    std::size_t vocab_size = 128;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t seq_len = 16;
    std::size_t proxy_layers = 2;
    std::size_t target_layers = 4;

    std::size_t pretrain_steps = 1500;
    std::size_t pretrain_batch = 32;
    float pretrain_lr = 3e-3F;
    double pretrain_min_accuracy = 0.95;

    std::size_t rank = 8;
    std::vector<std::string> projections{"wq", "wv"};

    std::size_t pairs = 1000;
    DecoderHyper decoder;

    std::string method = "r2f";
    std::size_t views = 5;
    double tau = 0.8;
    std::string label = "uniform";  // or "counterfactual:<word>"
    double eta = -1.0;              // negative: pick by sweep

    double eta_lo = 1e-3;
    double eta_hi = 10.0;
    std::size_t eta_points = 41;
    double gur_budget = 2.0;

    RapConfig rap;
    std::size_t mia_probes = 500;
    std::size_t audit_samples = 100;

    std::vector<std::size_t> sweep_ranks{2, 4, 8, 12, 16};
    std::vector<std::size_t> sweep_views{1, 2, 4, 8};
    std::size_t sweep_seeds = 3;

    // Pretraining seeds stay fixed under --seed-offset; the rest shift.
    std::uint64_t seed_proxy = 11;
    std::uint64_t seed_target = 12;
    std::uint64_t seed_adapter = 100;
    std::uint64_t seed_collect = 0;
    std::uint64_t seed_decoder = 0;
    std::uint64_t seed_unlearn = 0;
    std::uint64_t seed_eval = 0;

    std::string out_dir = "runs/default";

    ModelConfig model(ModelRole role) const;
    PretrainConfig pretrain(ModelRole role) const;
    void validate() const;
};

/// Parses `key = value` lines; `#` starts a comment. Keys not given keep
/// their defaults.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Every key, sorted, one `key = value` line each. parse_config of the result
/// gives back the same config.
std::string config_text(const RunConfig& cfg);

/// 16 hex digits over config_text, so independent of key order in the file.
/// run.out_dir is left out.
std::string config_hash(const RunConfig& cfg);

/// Adds `offset` to the adapter, collect, decoder, unlearn and eval seeds.
RunConfig with_seed_offset(RunConfig cfg, std::int64_t offset);

/// Key names with their one-line descriptions, sorted.
std::vector<std::pair<std::string, std::string>> config_keys();

}  // namespace r2f
