// SPDX-License-Identifier: Apache-2.0

#include "r2f/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "r2f/checkpoint.hpp"
#include "r2f/error.hpp"
#include "r2f/random.hpp"

namespace r2f {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string num(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_file_atomic(path, text);
}

std::string save_bytes(const fs::path& path, const Container& c) {
    const std::string bytes = encode_container(c);
    write_text(path, bytes);
    return checksum_hex(bytes);
}

ModelParams load_checked(const fs::path& path, const ModelConfig& expect, const char* what) {
    if (!fs::exists(path)) fail(ErrorKind::io, std::string(what) + " checkpoint not found: " + path.string() + " (run pretrain first)");
    ModelParams m = load_model(path);
    ModelConfig a = m.config;
    ModelConfig b = expect;
    a.role = b.role;
    if (!(a == b)) fail(ErrorKind::incompatible, std::string(what) + " checkpoint does not match the configured model");
    return m;
}

std::string file_checksum(const fs::path& path) { return checksum_hex(read_file(path)); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::size_t> spread(std::size_t n, std::size_t k) {
    std::vector<std::size_t> out;
    k = std::min(n, k);
    for (std::size_t i = 0; i < k; ++i) out.push_back(i * n / k);
    return out;
}

json sweep_rows_json(const EtaSweep& s) {
    json rows = json::array();
    for (const auto& r : s.rows) rows.push_back({{"eta", r.eta}, {"usr", r.usr}, {"gur", r.gur}, {"gur_drop", r.gur_drop}});
    return rows;
}

std::string eta_csv(const EtaSweep& s) {
    std::string out = "eta,usr,gur,gur_drop,selected\n";
    for (const auto& r : s.rows) {
        out += num(r.eta) + ',' + num(r.usr) + ',' + num(r.gur) + ',' + num(r.gur_drop) + ',' + (r.eta == s.selected ? "1" : "0") + '\n';
    }
    return out;
}

}  // namespace

Corpus make_corpus(const RunConfig& cfg) {
    CorpusConfig c = cfg.corpus;
    c.vocab_size = cfg.vocab_size;
    return build_synthetic_corpus(c);
}

UnlearnLabel parse_label(const RunConfig& cfg, const Corpus& corpus) {
    if (cfg.label == "uniform") return {};
    const std::string word = cfg.label.substr(cfg.label.find(':') + 1);
    if (!corpus.vocab.contains(word)) fail(ErrorKind::config, "unlearn.label: '" + word + "' is not in the vocabulary");
    return {UnlearnLabel::Kind::counterfactual, corpus.vocab.id(word)};
}

Tensor run_label(const RunConfig& cfg, const Corpus& corpus) {
    return unlearning_label(corpus, parse_label(cfg, corpus), cfg.vocab_size);
}

PretrainedModel pretrain_stage(const RunConfig& cfg, const Corpus& corpus, ModelRole role) {
    const auto examples = training_examples(corpus, all_fact_ids(corpus));
    const PretrainConfig hyper = cfg.pretrain(role);
    PretrainReport rep;
    PretrainedModel out;
    out.params = pretrain(init_model(cfg.model(role), hyper.seed), examples, hyper, &rep);
    out.accuracy = rep.accuracy;
    out.final_loss = rep.loss.empty() ? 0.0 : rep.loss.back();
    if (rep.accuracy < cfg.pretrain_min_accuracy) {
        fail(ErrorKind::convergence, std::string(role_name(role)) + " reached fact accuracy " + num(rep.accuracy) + " after " +
                                         std::to_string(hyper.steps) + " steps (gate " + num(cfg.pretrain_min_accuracy) +
                                         ", final loss " + num(out.final_loss) + ")");
    }
    return out;
}

AdapterSet adapters_for(const RunConfig& cfg, const ModelParams& params) {
    return attach_lora(params, cfg.rank, cfg.projections, cfg.seed_adapter);
}

std::vector<LmExample> proxy_pool(const RunConfig& cfg, const Corpus& corpus) {
    auto pool = paraphrase_pool(corpus, corpus.retain, 0);
    Rng rng(derive_seed(cfg.seed_collect, "collect.pool"));
    std::shuffle(pool.begin(), pool.end(), rng);
    return pool;
}

GradientPairDataset collect_stage(const RunConfig& cfg, const Corpus& corpus, const ModelParams& proxy) {
    const auto pool = proxy_pool(cfg, corpus);
    if (pool.size() < cfg.pairs) {
        fail(ErrorKind::config, "collect.pairs = " + std::to_string(cfg.pairs) + " exceeds the " + std::to_string(pool.size()) +
                                    " available proxy prompts");
    }
    const Tensor y = run_label(cfg, corpus);
    std::vector<PairExample> ex;
    ex.reserve(cfg.pairs);
    for (std::size_t i = 0; i < cfg.pairs; ++i) ex.push_back({i, pool[i].prompt, y});
    return collect_pairs(proxy, adapters_for(cfg, proxy), cfg.seed_adapter, ex, cfg.pairs);
}

TrainedDecoder decoder_stage(const RunConfig& cfg, const GradientPairDataset& pairs) {
    DecoderHyper h = cfg.decoder;
    h.seed = cfg.seed_decoder;
    return train_decoder(pairs, h);
}

UnlearnRun unlearn_stage(const RunConfig& cfg, const Corpus& corpus, const ModelParams& target,
                         const DecoderParams* decoder, Method method) {
    const AdapterSet adapters = adapters_for(cfg, target);
    const UnlearnContext ctx{&corpus, &target, &adapters, cfg.seed_adapter, decoder};
    UnlearnRequest req;
    req.label = parse_label(cfg, corpus);
    req.views = cfg.views;
    req.tau = cfg.tau;
    req.method = method;
    req.seed = cfg.seed_unlearn;

    UnlearnRun run;
    run.method = method;
    if (cfg.eta >= 0.0) {
        run.eta = cfg.eta;
    } else {
        run.sweep = eta_sweep(ctx, req, log_grid(cfg.eta_lo, cfg.eta_hi, cfg.eta_points), corpus.target, corpus.retain,
                              cfg.gur_budget);
        run.eta = run.sweep.selected;
    }
    req.facts = corpus.target;
    req.eta = run.eta;
    run.outcome = unlearn(ctx, req);
    run.before = merge_lora(target, adapters);
    run.after = run.outcome.effective();
    return run;
}

MetricsReport eval_stage(const RunConfig& cfg, const Corpus& corpus, const ModelParams& before, const ModelParams& after,
                         const std::string& method) {
    MetricsReport r;
    r.method = method;
    r.usr = usr(before, after, corpus, corpus.target);
    r.gur = gur(after, corpus, corpus.retain, before);
    RapConfig rc = cfg.rap;
    rc.projections = cfg.projections;
    rc.seed = cfg.seed_eval;
    r.rap = rap(before, after, corpus, corpus.target, rc);
    r.mia = mia(before, after, mia_probes(corpus, cfg.mia_probes));
    return r;
}

std::vector<AuditSample> audit_samples(const RunConfig& cfg, const Corpus& corpus) {
    const auto pool = proxy_pool(cfg, corpus);
    const std::size_t n_pro = cfg.audit_samples / 2;
    const std::size_t n_tar = cfg.audit_samples - n_pro;
    std::vector<AuditSample> out;
    // proxy side: prompts the decoder never trained on
    const std::size_t held = pool.size() > cfg.pairs ? pool.size() - cfg.pairs : 0;
    if (held < n_pro) fail(ErrorKind::config, "audit.samples needs " + std::to_string(n_pro) + " held-out proxy prompts, have " + std::to_string(held));
    for (auto i : spread(held, n_pro)) out.push_back({"proxy", pool[cfg.pairs + i].prompt});
    auto tar = canonical_examples(corpus, corpus.target);
    for (auto& ex : paraphrase_pool(corpus, corpus.target, 0)) tar.push_back(std::move(ex));
    if (tar.size() < n_tar) fail(ErrorKind::config, "audit.samples exceeds the available target prompts");
    for (auto i : spread(tar.size(), n_tar)) out.push_back({"target", tar[i].prompt});
    return out;
}

Prop1Audit audit_stage(const RunConfig& cfg, const Corpus& corpus, const ModelParams& proxy, const ModelParams& target,
                       const DecoderParams& decoder) {
    const AdapterSet pa = adapters_for(cfg, proxy);
    const AdapterSet ta = adapters_for(cfg, target);
    check_decoder_compatible(decoder, adapter_spec(ta, cfg.d_model, cfg.seed_adapter), cfg.d_model);
    return audit_prop1(decoder, proxy, pa, target, ta, audit_samples(cfg, corpus), run_label(cfg, corpus));
}

// ---- commands ---------------------------------------------------------------

void run_pretrain(const RunConfig& cfg, std::ostream& log) {
    const RunFiles f{cfg.out_dir};
    fs::create_directories(f.dir);
    const Corpus corpus = make_corpus(cfg);
    std::ostringstream corpus_text;
    export_corpus(corpus, corpus_text);
    write_text(f.dir / "corpus.jsonl", corpus_text.str());
    json j;
    j["config_hash"] = config_hash(cfg);
    for (ModelRole role : {ModelRole::proxy, ModelRole::target}) {
        const auto t0 = std::chrono::steady_clock::now();
        const PretrainedModel m = pretrain_stage(cfg, corpus, role);
        const fs::path path = role == ModelRole::proxy ? f.proxy() : f.target();
        const std::string sum = save_bytes(path, model_to_container(m.params));
        j[role_name(role)] = {{"layers", m.params.config.n_layers},
                              {"accuracy", m.accuracy},
                              {"final_loss", m.final_loss},
                              {"parameters", parameter_count(m.params.config)},
                              {"checksum", sum}};
        log << "pretrain " << role_name(role) << ": accuracy " << m.accuracy << ", " << seconds_since(t0) << " s\n";
    }
    write_text(f.dir / "pretrain.json", j.dump(2) + "\n");
    RunConfig rec = cfg;
    rec.out_dir = ".";
    write_text(f.dir / "config.txt", config_text(rec));
}

void run_collect(const RunConfig& cfg, std::ostream& log) {
    const RunFiles f{cfg.out_dir};
    const Corpus corpus = make_corpus(cfg);
    const ModelParams proxy = load_checked(f.proxy(), cfg.model(ModelRole::proxy), "proxy");
    const auto t0 = std::chrono::steady_clock::now();
    const GradientPairDataset ds = collect_stage(cfg, corpus, proxy);
    const std::string sum = save_bytes(f.pairs(), dataset_to_container(ds));
    json j{{"config_hash", config_hash(cfg)},
           {"pairs", ds.size()},
           {"adapter_spec", ds.adapter_spec},
           {"flatten_version", ds.flatten_version},
           {"lora_width", ds.lora_width()},
           {"full_width", ds.full_width()},
           {"proxy_checksum", file_checksum(f.proxy())},
           {"checksum", sum}};
    write_text(f.dir / "collect.json", j.dump(2) + "\n");
    log << "collect: " << ds.size() << " pairs, " << seconds_since(t0) << " s\n";
}

void run_train_decoder(const RunConfig& cfg, std::ostream& log) {
    const RunFiles f{cfg.out_dir};
    if (!fs::exists(f.pairs())) fail(ErrorKind::io, "pairs file not found: " + f.pairs().string() + " (run collect first)");
    const GradientPairDataset ds = dataset_from_container(load_container(f.pairs()));
    if (ds.rank != cfg.rank || ds.d_model != cfg.d_model || ds.projections != cfg.projections) {
        fail(ErrorKind::incompatible, "pairs file was collected with a different adapter layout");
    }
    const auto t0 = std::chrono::steady_clock::now();
    const TrainedDecoder t = decoder_stage(cfg, ds);
    const std::string sum = save_bytes(f.decoder(), decoder_to_container(t.params));
    std::string curve = "epoch,train_mse,holdout_mse\n";
    for (const auto& p : t.report.curve) curve += std::to_string(p.epoch) + ',' + num(p.train_mse) + ',' + num(p.holdout_mse) + '\n';
    write_text(f.dir / "decoder_curve.csv", curve);
    json j{{"config_hash", config_hash(cfg)},
           {"pairs_checksum", file_checksum(f.pairs())},
           {"train_pairs", t.report.train_pairs},
           {"holdout_pairs", t.report.holdout_pairs},
           {"hidden", t.params.hidden},
           {"parameters", t.params.parameter_count()},
           {"initial_holdout_mse", t.report.initial_holdout_mse},
           {"selected_epoch", t.report.selected_epoch},
           {"selected_holdout_mse", t.report.selected_holdout_mse},
           {"epochs_run", t.report.curve.size()},
           {"checksum", sum}};
    write_text(f.dir / "decoder.json", j.dump(2) + "\n");
    log << "train-decoder: holdout MSE " << t.report.initial_holdout_mse << " -> " << t.report.selected_holdout_mse
        << " (epoch " << t.report.selected_epoch << "), " << seconds_since(t0) << " s\n";
    if (cfg.decoder.epochs > 0 && !(t.report.selected_holdout_mse < t.report.initial_holdout_mse)) {
        fail(ErrorKind::convergence, "decoder training never improved the holdout MSE");
    }
}

void run_unlearn(const RunConfig& cfg, Method method, std::ostream& log) {
    const RunFiles f{cfg.out_dir};
    const Corpus corpus = make_corpus(cfg);
    const ModelParams target = load_checked(f.target(), cfg.model(ModelRole::target), "target");
    DecoderParams dec;
    const bool needs_decoder = method == Method::r2f;
    if (needs_decoder) {
        if (!fs::exists(f.decoder())) fail(ErrorKind::io, "decoder not found: " + f.decoder().string() + " (run train-decoder first)");
        dec = decoder_from_container(load_container(f.decoder()));
    }
    const auto t0 = std::chrono::steady_clock::now();
    const UnlearnRun run = unlearn_stage(cfg, corpus, target, needs_decoder ? &dec : nullptr, method);
    const std::string name = method_name(method);
    const std::string sum = save_bytes(f.unlearned(name), model_to_container(run.after));

    json facts = json::array();
    for (const auto& fo : run.outcome.facts) {
        facts.push_back({{"fact", fo.fact_id},
                         {"views_used", fo.views_used},
                         {"grad_norm", fo.grad_norm},
                         {"p_before", fo.p_before},
                         {"p_after", fo.p_after}});
    }
    json j{{"method", name},
           {"config_hash", config_hash(cfg)},
           {"seeds", {{"adapter", cfg.seed_adapter}, {"unlearn", cfg.seed_unlearn}, {"decoder", cfg.seed_decoder}}},
           {"request",
            {{"label", cfg.label}, {"views", cfg.views}, {"tau", cfg.tau}, {"rank", cfg.rank}, {"projections", cfg.projections}}},
           {"eta", run.eta},
           {"eta_selected_by_sweep", !run.sweep.rows.empty()},
           {"eta_budget_met", run.sweep.budget_met},
           {"eta_sweep", sweep_rows_json(run.sweep)},
           {"grad_norm", run.outcome.grad_norm},
           {"facts", facts},
           {"target_checksum", file_checksum(f.target())},
           {"decoder_checksum", needs_decoder ? file_checksum(f.decoder()) : ""},
           {"output_checksum", sum}};
    write_text(f.manifest(name), j.dump(2) + "\n");
    if (!run.sweep.rows.empty()) write_text(f.dir / ("eta_sweep_" + name + ".csv"), eta_csv(run.sweep));
    log << "unlearn " << name << ": eta " << run.eta << (run.sweep.budget_met ? "" : " (GUR budget not met)") << ", "
        << seconds_since(t0) << " s\n";
}

void run_eval(const RunConfig& cfg, const std::string& method, std::ostream& log) {
    const RunFiles f{cfg.out_dir};
    const ModelParams target = load_checked(f.target(), cfg.model(ModelRole::target), "target");
    if (!fs::exists(f.unlearned(method))) {
        fail(ErrorKind::io, "unlearned checkpoint not found: " + f.unlearned(method).string() + " (run unlearn first)");
    }
    const ModelParams after = load_checked(f.unlearned(method), cfg.model(ModelRole::target), "unlearned");
    const Corpus corpus = make_corpus(cfg);
    MetricsReport r = eval_stage(cfg, corpus, target, after, method);
    r.manifest_hash = fs::exists(f.manifest(method)) ? file_checksum(f.manifest(method)) : "";
    write_text(f.dir / ("metrics_" + method + ".json"), report_json(r));
    write_text(f.dir / ("metrics_" + method + ".csv"), report_csv(r));
    log << "eval " << method << ": USR " << r.usr.percent << ", GUR " << r.gur.after << " (drop " << r.gur.drop << "), RAP "
        << r.rap.percent << ", MIA cos " << r.mia.cosine << " tv " << r.mia.tv << "\n";
}

void run_audit(const RunConfig& cfg, std::ostream& log) {
    const RunFiles f{cfg.out_dir};
    const Corpus corpus = make_corpus(cfg);
    const ModelParams proxy = load_checked(f.proxy(), cfg.model(ModelRole::proxy), "proxy");
    const ModelParams target = load_checked(f.target(), cfg.model(ModelRole::target), "target");
    if (!fs::exists(f.decoder())) fail(ErrorKind::io, "decoder not found: " + f.decoder().string());
    const DecoderParams dec = decoder_from_container(load_container(f.decoder()));
    const Prop1Audit a = audit_stage(cfg, corpus, proxy, target, dec);
    write_text(f.dir / "audit_prop1.json", audit_json(a));
    write_text(f.dir / "audit_prop1.csv", audit_csv(a));
    log << "audit-prop1: E[lhs] " << a.e_lhs << " <= " << a.e_term_a_pro << " + " << a.dis_hat << " + " << a.e_term_c
        << (a.bound_satisfied ? " (holds)" : " (VIOLATED)") << ", triangle violations " << a.triangle_violations << "\n";
    if (a.triangle_violations > 0) fail(ErrorKind::numerical, "audit: per-sample triangle inequality violated");
}

// ---- sweeps -------------------------------------------------------------------

SweepAxis parse_axis(const std::string& name) {
    if (name == "rank") return SweepAxis::rank;
    if (name == "views") return SweepAxis::views;
    if (name == "eta") return SweepAxis::eta;
    fail(ErrorKind::usage, "unknown sweep axis '" + name + "' (rank, views, eta)");
}

namespace {

const char* axis_name(SweepAxis a) {
    switch (a) {
    case SweepAxis::rank: return "rank";
    case SweepAxis::views: return "views";
    case SweepAxis::eta: return "eta";
    }
    return "?";
}

double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = 0.0;
    for (double x : v) m += x / static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

std::string sweep_csv(SweepAxis axis, const std::string& method, const std::vector<SweepCell>& cells) {
    std::vector<std::uint64_t> seeds;
    std::vector<double> values;
    for (const auto& c : cells) {
        if (std::find(seeds.begin(), seeds.end(), c.seed_offset) == seeds.end()) seeds.push_back(c.seed_offset);
        if (std::find(values.begin(), values.end(), c.value) == values.end()) values.push_back(c.value);
    }
    using Getter = double (*)(const SweepCell&);
    const std::vector<std::pair<const char*, Getter>> metrics{
        {"usr", [](const SweepCell& c) { return c.report.usr.percent; }},
        {"gur", [](const SweepCell& c) { return c.report.gur.after; }},
        {"gur_drop", [](const SweepCell& c) { return c.report.gur.drop; }},
        {"rap", [](const SweepCell& c) { return c.report.rap.percent; }},
        {"mia_cosine", [](const SweepCell& c) { return c.report.mia.cosine; }},
        {"mia_tv", [](const SweepCell& c) { return c.report.mia.tv; }},
        {"eta", [](const SweepCell& c) { return c.eta; }},
    };
    std::string out = "axis,value,method,metric";
    for (auto s : seeds) out += ",seed_offset_" + std::to_string(s);
    out += ",mean,std\n";
    for (double v : values) {
        for (const auto& [name, get] : metrics) {
            out += std::string(axis_name(axis)) + ',' + num(v) + ',' + method + ',' + name;
            std::vector<double> xs;
            for (auto s : seeds) {
                auto it = std::find_if(cells.begin(), cells.end(), [&](const SweepCell& c) { return c.value == v && c.seed_offset == s; });
                if (it == cells.end()) {
                    out += ',';
                    continue;
                }
                xs.push_back(get(*it));
                out += ',' + num(xs.back());
            }
            double mean = 0.0;
            for (double x : xs) mean += x / static_cast<double>(xs.size());
            out += ',' + num(mean) + ',' + num(sample_std(xs)) + '\n';
        }
    }
    return out;
}

void run_sweep(const RunConfig& cfg, SweepAxis axis, const std::vector<double>& grid_in, Method method, std::ostream& log) {
    std::vector<double> grid = grid_in;
    if (grid.empty()) {
        if (axis == SweepAxis::rank) grid.assign(cfg.sweep_ranks.begin(), cfg.sweep_ranks.end());
        if (axis == SweepAxis::views) grid.assign(cfg.sweep_views.begin(), cfg.sweep_views.end());
        if (axis == SweepAxis::eta) grid = log_grid(cfg.eta_lo, cfg.eta_hi, cfg.eta_points);
    }
    if (grid.empty()) fail(ErrorKind::usage, "sweep: empty grid");
    for (double v : grid) {
        if (axis != SweepAxis::eta && (v < 1.0 || v != std::floor(v))) fail(ErrorKind::usage, "sweep: grid values must be positive integers");
        if (axis == SweepAxis::eta && !(v >= 0.0)) fail(ErrorKind::usage, "sweep: step sizes must be non-negative");
    }
    const RunFiles f{cfg.out_dir};
    const Corpus corpus = make_corpus(cfg);
    const ModelParams proxy = load_checked(f.proxy(), cfg.model(ModelRole::proxy), "proxy");
    const ModelParams target = load_checked(f.target(), cfg.model(ModelRole::target), "target");
    const bool needs_decoder = method == Method::r2f;
    const std::string mname = method_name(method);
    std::vector<SweepCell> cells;
    for (std::uint64_t k = 0; k < cfg.sweep_seeds; ++k) {
        const RunConfig base = with_seed_offset(cfg, static_cast<std::int64_t>(k));
        DecoderParams shared;
        if (needs_decoder && axis != SweepAxis::rank) shared = decoder_stage(base, collect_stage(base, corpus, proxy)).params;
        for (double v : grid) {
            const auto t0 = std::chrono::steady_clock::now();
            RunConfig c = base;
            DecoderParams dec = shared;
            if (axis == SweepAxis::rank) {
                c.rank = static_cast<std::size_t>(v);
                c.validate();
                if (needs_decoder) dec = decoder_stage(c, collect_stage(c, corpus, proxy)).params;
            }
            if (axis == SweepAxis::views) c.views = static_cast<std::size_t>(v);
            if (axis == SweepAxis::eta) c.eta = v;
            const UnlearnRun run = unlearn_stage(c, corpus, target, needs_decoder ? &dec : nullptr, method);
            SweepCell cell{v, k, run.eta, run.sweep.budget_met, eval_stage(c, corpus, run.before, run.after, mname)};
            const std::string tag = std::string(axis_name(axis)) + "_" + num(v) + "_s" + std::to_string(k);
            write_text(f.dir / "sweep" / (mname + "_" + tag + ".json"), report_json(cell.report));
            log << "sweep " << axis_name(axis) << "=" << v << " seed+" << k << ": USR " << cell.report.usr.percent << ", GUR drop "
                << cell.report.gur.drop << ", RAP " << cell.report.rap.percent << ", eta " << cell.eta << ", "
                << seconds_since(t0) << " s\n";
            cells.push_back(std::move(cell));
        }
    }
    write_text(f.dir / ("sweep_" + std::string(axis_name(axis)) + "_" + mname + ".csv"), sweep_csv(axis, mname, cells));
}

}  // namespace r2f
