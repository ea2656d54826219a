// SPDX-License-Identifier: Apache-2.0
//
// Single-step unlearning: decoded-gradient updates and the comparison
// methods, plus the step-size sweep.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "r2f/corpus.hpp"
#include "r2f/decoder.hpp"
#include "r2f/gradients.hpp"
#include "r2f/model.hpp"

namespace r2f {

enum class Method { r2f, full_grad, lora_single, lora_multi, grad_ascent };

const char* method_name(Method m);
Method parse_method(std::string_view name);
const std::vector<Method>& all_methods();
bool updates_adapters(Method m);

struct UnlearnLabel {
    enum class Kind { uniform, counterfactual };
    Kind kind = Kind::uniform;
    std::size_t token = 0;  // counterfactual answer token
};

struct UnlearnRequest {
    std::vector<std::size_t> facts;  // applied one step each, in order
    UnlearnLabel label;
    double eta = 0.0;
    std::size_t views = 5;
    double tau = 0.8;  // paraphrase filter threshold
    Method method = Method::r2f;
    std::uint64_t seed = 0;  // paraphrase rotation

    void validate(const Corpus& corpus) const;
};

/// Uniform over the answer vocabulary, or one-hot on the counterfactual token.
Tensor unlearning_label(const Corpus& corpus, const UnlearnLabel& label, std::size_t vocab);

struct FactOutcome {
    std::size_t fact_id = 0;
    std::size_t views_used = 0;
    double grad_norm = 0.0;  // norm of the gradient applied for this fact
    double p_before = 0.0;   // canonical-answer probability before the run
    double p_after = 0.0;    // and after it
};

struct UnlearnOutcome {
    Method method = Method::r2f;
    ModelParams params;   // base weights (unchanged for adapter methods)
    AdapterSet adapters;  // updated adapters (empty for base-weight methods)
    double grad_norm = 0.0;
    std::vector<FactOutcome> facts;
    double seconds = 0.0;

    /// Model the outcome stands for, with adapters merged when present.
    ModelParams effective() const;
};

/// Inputs shared by every method. `adapters` are the target's LoRA adapters;
/// their projections are the update locus of every method. `decoder` is only
/// needed for r2f.
struct UnlearnContext {
    const Corpus* corpus = nullptr;
    const ModelParams* target = nullptr;
    const AdapterSet* adapters = nullptr;
    std::uint64_t adapter_seed = 0;
    const DecoderParams* decoder = nullptr;
};

UnlearnOutcome r2f_unlearn(const UnlearnContext& ctx, const UnlearnRequest& req);
UnlearnOutcome baseline_full_grad(const UnlearnContext& ctx, const UnlearnRequest& req);
UnlearnOutcome baseline_lora(const UnlearnContext& ctx, const UnlearnRequest& req);
UnlearnOutcome grad_ascent_reference(const UnlearnContext& ctx, const UnlearnRequest& req);

/// Dispatch on req.method.
UnlearnOutcome unlearn(const UnlearnContext& ctx, const UnlearnRequest& req);

/// W -= signed_eta * grad for each named projection of every layer, using the
/// exact gradient of loss_ce(x, y). Returns the gradient norm.
double apply_full_gradient_step(ModelParams& params, const std::vector<std::string>& projections, const Tokens& x,
                                const Tensor& y, double signed_eta);

struct EtaRow {
    double eta = 0.0;
    double usr = 0.0;
    double gur = 0.0;
    double gur_drop = 0.0;
};

struct EtaSweep {
    std::vector<EtaRow> rows;
    double selected = 0.0;
    bool budget_met = true;
};

/// Runs `tmpl` on `validation` facts for every eta; GUR is measured on
/// `retain`. Picks the largest eta whose GUR drop is within `budget` points,
/// else the eta with the smallest drop and budget_met = false.
EtaSweep eta_sweep(const UnlearnContext& ctx, const UnlearnRequest& tmpl, const std::vector<double>& grid,
                   const std::vector<std::size_t>& validation, const std::vector<std::size_t>& retain, double budget);

/// n points spaced evenly in log10 between lo and hi, inclusive.
std::vector<double> log_grid(double lo, double hi, std::size_t n);

}  // namespace r2f
