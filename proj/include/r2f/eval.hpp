// SPDX-License-Identifier: Apache-2.0
//
// Unlearning metrics (USR, GUR, RAP, MIA) and the empirical audit of the
// proxy-to-target reconstruction bound.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "r2f/corpus.hpp"
#include "r2f/decoder.hpp"
#include "r2f/gradients.hpp"
#include "r2f/model.hpp"

namespace r2f {

// ---- USR ------------------------------------------------------------------

struct TargetRow {
    std::size_t fact_id = 0;
    std::size_t answer = 0;  // canonical answer token
    std::size_t before = 0;  // greedy answers on the canonical prompt
    std::size_t after = 0;
    double p_before = 0.0;  // canonical-answer probability
    double p_after = 0.0;
    bool excluded = false;  // before-model already wrong
    bool flipped = false;
};

struct UsrResult {
    double percent = 0.0;
    std::size_t counted = 0;
    std::size_t excluded = 0;
    std::vector<TargetRow> rows;
};

/// Percent of counted rows whose greedy answer changed. Rows flagged excluded
/// are skipped. Zero counted rows gives 0.
UsrResult usr_from_rows(std::vector<TargetRow> rows);

UsrResult usr(const ModelParams& before, const ModelParams& after, const Corpus& corpus,
              const std::vector<std::size_t>& targets);

// ---- GUR ------------------------------------------------------------------

struct RetainRow {
    std::size_t fact_id = 0;
    bool correct_before = false;
    bool correct_after = false;
};

struct GurResult {
    double after = 0.0;   // percent correct
    double before = 0.0;
    double drop = 0.0;    // before - after
    std::vector<RetainRow> rows;
};

GurResult gur_from_rows(std::vector<RetainRow> rows);

GurResult gur(const ModelParams& after, const Corpus& corpus, const std::vector<std::size_t>& retain,
              const ModelParams& before);

// ---- RAP ------------------------------------------------------------------

struct RapConfig {
    std::size_t steps = 20;
    float lr = 1e-3F;
    std::size_t views = 5;  // non-canonical paraphrases per target
    std::vector<std::string> projections{"wq", "wv"};
    std::uint64_t seed = 0;
};

struct RapRow {
    std::size_t fact_id = 0;
    std::size_t original = 0;  // before-model greedy answer
    std::size_t attacked = 0;  // greedy answer after the attack
    bool excluded = false;
    bool diverged = false;
    bool recovered = false;
};

struct RapResult {
    double percent = 0.0;
    std::size_t counted = 0;
    std::size_t diverged = 0;
    std::vector<RapRow> rows;
};

/// Fine-tunes a copy of `after` per target (SGD on the adapted projections, on
/// paraphrases labelled with the canonical answer) and counts targets whose
/// canonical prompt yields the before-model's answer again. Targets the
/// before-model already gets wrong are excluded, as in USR.
RapResult rap(const ModelParams& before, const ModelParams& after, const Corpus& corpus,
              const std::vector<std::size_t>& targets, const RapConfig& cfg);

// ---- MIA ------------------------------------------------------------------

struct MiaResult {
    double cosine = 0.0;  // mean, higher = closer
    double tv = 0.0;      // mean total variation, lower = closer
    std::vector<double> probe_cosine;
    std::vector<double> probe_tv;
};

double distribution_cosine(std::span<const float> p, std::span<const float> q);
double total_variation(std::span<const float> p, std::span<const float> q);

MiaResult mia(const ModelParams& before, const ModelParams& after, const std::vector<Tokens>& probes);

/// Up to `limit` non-canonical prompts of the retain facts.
std::vector<Tokens> mia_probes(const Corpus& corpus, std::size_t limit);

// ---- report ---------------------------------------------------------------

struct MetricsReport {
    std::string method;
    std::string manifest_hash;
    UsrResult usr;
    GurResult gur;
    RapResult rap;
    MiaResult mia;
};

/// Summary object, pretty-printed JSON.
std::string report_json(const MetricsReport& r);
/// One row per target, retain fact and probe.
std::string report_csv(const MetricsReport& r);

// ---- reconstruction bound audit -------------------------------------------

struct AuditSample {
    std::string source;  // "proxy" (held-out proxy prompt) or "target"
    Tokens prompt;
};

/// Norms over the projections of the layers both models have.
/// lhs        = |dec(lora_tar) - full_tar|
/// term_a     = |dec(lora_tar) - full_pro|
/// term_a_pro = |dec(lora_pro) - full_pro|
/// term_c     = |full_pro - full_tar|
struct Prop1Sample {
    std::size_t index = 0;
    std::string source;
    double lhs = 0.0;
    double term_a = 0.0;
    double term_a_pro = 0.0;
    double term_c = 0.0;
};

struct Prop1Audit {
    std::vector<Prop1Sample> samples;
    std::size_t shared_layers = 0;
    double e_lhs = 0.0;
    double e_term_a_pro = 0.0;  // proxy-side reconstruction error
    double e_term_a = 0.0;
    double dis_hat = 0.0;       // max(0, e_term_a - e_term_a_pro)
    double e_term_c = 0.0;
    std::size_t triangle_violations = 0;
    bool bound_satisfied = false;
};

inline constexpr double kAuditTolerance = 1e-5;

Prop1Audit audit_prop1(const DecoderParams& dec, const ModelParams& proxy, const AdapterSet& proxy_adapters,
                       const ModelParams& target, const AdapterSet& target_adapters,
                       const std::vector<AuditSample>& samples, const Tensor& y);

/// Aggregates and flags recomputed from the per-sample rows.
Prop1Audit finalize_audit(std::vector<Prop1Sample> samples, std::size_t shared_layers);

std::string audit_json(const Prop1Audit& a);
std::string audit_csv(const Prop1Audit& a);
/// Parses audit_json output and re-checks every invariant; throws io on a
/// malformed file and numerical on a violated invariant.
Prop1Audit audit_from_json(const std::string& text);

}  // namespace r2f
