// SPDX-License-Identifier: Apache-2.0
//
// Pipeline stages shared by the command-line tool and the acceptance suite.
// The in-memory stage functions take everything they need as arguments; the
// run_* functions wrap them with the files of an output directory.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "r2f/config.hpp"
#include "r2f/decoder.hpp"
#include "r2f/eval.hpp"
#include "r2f/unlearn.hpp"

namespace r2f {

Corpus make_corpus(const RunConfig& cfg);
Tensor run_label(const RunConfig& cfg, const Corpus& corpus);
UnlearnLabel parse_label(const RunConfig& cfg, const Corpus& corpus);

struct PretrainedModel {
    ModelParams params;
    double accuracy = 0.0;
    double final_loss = 0.0;
};

/// Pretrains one role and throws convergence if the accuracy gate is missed.
PretrainedModel pretrain_stage(const RunConfig& cfg, const Corpus& corpus, ModelRole role);

AdapterSet adapters_for(const RunConfig& cfg, const ModelParams& params);

/// Shuffled non-canonical retain prompts; the first `collect.pairs` feed the
/// decoder and the rest are held out.
std::vector<LmExample> proxy_pool(const RunConfig& cfg, const Corpus& corpus);

GradientPairDataset collect_stage(const RunConfig& cfg, const Corpus& corpus, const ModelParams& proxy);
TrainedDecoder decoder_stage(const RunConfig& cfg, const GradientPairDataset& pairs);

struct UnlearnRun {
    Method method = Method::r2f;
    EtaSweep sweep;        // empty rows when the step size was fixed
    double eta = 0.0;
    UnlearnOutcome outcome;
    ModelParams before;    // target with its fresh adapters merged
    ModelParams after;
};

UnlearnRun unlearn_stage(const RunConfig& cfg, const Corpus& corpus, const ModelParams& target,
                         const DecoderParams* decoder, Method method);

MetricsReport eval_stage(const RunConfig& cfg, const Corpus& corpus, const ModelParams& before,
                         const ModelParams& after, const std::string& method);

std::vector<AuditSample> audit_samples(const RunConfig& cfg, const Corpus& corpus);
Prop1Audit audit_stage(const RunConfig& cfg, const Corpus& corpus, const ModelParams& proxy,
                       const ModelParams& target, const DecoderParams& decoder);

// ---- output directory ----------------------------------------------------

/// File layout of a run directory.
struct RunFiles {
    std::filesystem::path dir;

    std::filesystem::path proxy() const { return dir / "proxy.r2f"; }
    std::filesystem::path target() const { return dir / "target.r2f"; }
    std::filesystem::path pairs() const { return dir / "pairs.r2f"; }
    std::filesystem::path decoder() const { return dir / "decoder.r2f"; }
    std::filesystem::path unlearned(const std::string& m) const { return dir / ("unlearned_" + m + ".r2f"); }
    std::filesystem::path manifest(const std::string& m) const { return dir / ("unlearn_" + m + ".json"); }
};

/// Each writes its outputs into cfg.out_dir (created if missing) and logs a
/// short summary to `log`.
void run_pretrain(const RunConfig& cfg, std::ostream& log);
void run_collect(const RunConfig& cfg, std::ostream& log);
void run_train_decoder(const RunConfig& cfg, std::ostream& log);
void run_unlearn(const RunConfig& cfg, Method method, std::ostream& log);
void run_eval(const RunConfig& cfg, const std::string& method, std::ostream& log);
void run_audit(const RunConfig& cfg, std::ostream& log);

enum class SweepAxis { rank, views, eta };
SweepAxis parse_axis(const std::string& name);

/// Repeats unlearn + eval over a grid and sweep.seeds seed offsets. Writes
/// sweep_<axis>.csv with one row per (value, metric): per-seed columns, mean
/// and sample std. `grid` empty means the config's grid.
void run_sweep(const RunConfig& cfg, SweepAxis axis, const std::vector<double>& grid, Method method, std::ostream& log);

struct SweepCell {
    double value = 0.0;
    std::uint64_t seed_offset = 0;
    double eta = 0.0;
    bool budget_met = true;
    MetricsReport report;
};

std::string sweep_csv(SweepAxis axis, const std::string& method, const std::vector<SweepCell>& cells);

}  // namespace r2f
