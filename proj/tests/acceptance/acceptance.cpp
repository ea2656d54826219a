// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance run. Drives the CLI for the full pipeline and the
// rerun comparison, then checks the remaining properties through the library
// against the checkpoints that run produced. Prints one PASS/FAIL line per
// criterion and exits nonzero if any failed.
//
//   acceptance [work_dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <sstream>
#include <sys/wait.h>

#include "r2f/checkpoint.hpp"
#include "r2f/error.hpp"
#include "r2f/finite_diff.hpp"
#include "r2f/pipeline.hpp"
#include "r2f/random.hpp"

namespace fs = std::filesystem;
using namespace r2f;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
    std::string id;
    bool pass = false;
    std::string detail;
};

std::vector<Verdict> g_verdicts;
std::ofstream g_log;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
    std::ostringstream s;
    s.precision(prec);
    s << v;
    return s.str();
}

void report(const std::string& id, bool pass, const std::string& detail) {
    g_verdicts.push_back({id, pass, detail});
    std::cout << (pass ? "PASS " : "FAIL ") << id << ": " << detail << std::endl;
    g_log << (pass ? "PASS " : "FAIL ") << id << ": " << detail << std::endl;
}

void note(const std::string& text) {
    std::cout << "  .. " << text << std::endl;
    g_log << "  .. " << text << std::endl;
}

int cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(R2F_CLI) + " " + args + " 2>>" + log.string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<fs::path> files_in(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().filename() != "cli.log") out.push_back(fs::relative(e.path(), dir));
    }
    std::sort(out.begin(), out.end());
    return out;
}

Tensor answer_label(const Corpus& c, std::size_t vocab) {
    const auto support = c.answer_vocabulary();
    Tensor y({vocab});
    for (auto t : support) y[t] = 1.0F / static_cast<float>(support.size());
    return y;
}

// ---- pipeline + determinism ----------------------------------------------

const char* const kStages[] = {"pretrain", "collect", "train-decoder", "unlearn", "eval", "audit-prop1"};

bool run_pipeline(const fs::path& dir, const fs::path& cfg, double* seconds) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto t0 = Clock::now();
    for (const char* stage : kStages) {
        const int rc = cli(std::string(stage) + " --config " + cfg.string() + " --out " + dir.string(), dir / "cli.log");
        if (rc != 0) {
            note(std::string(stage) + " exited with " + std::to_string(rc) + ", see " + (dir / "cli.log").string());
            return false;
        }
    }
    *seconds = since(t0);
    return true;
}

// ---- criterion 1 ------------------------------------------------------------

void gradient_oracles(const Corpus& corpus, const ModelParams& proxy) {
    const auto t0 = Clock::now();
    // f32 forward noise needs the wider five-point step to stay inside 1e-4
    constexpr double eps = 1e-2;
    const Tensor y = answer_label(corpus, proxy.config.vocab_size);
    const Tokens& x = corpus.facts[corpus.target[0]].prompt;
    Rng rng(2024);
    std::size_t checked = 0, bad = 0;
    std::map<std::string, std::size_t> per_kind;
    auto check = [&](const char* kind, double an, double fd) {
        ++checked;
        ++per_kind[kind];
        if (!grad_close(an, fd)) {
            ++bad;
            if (bad <= 5) note(std::string(kind) + " mismatch " + fmt(an, 8) + " vs " + fmt(fd, 8));
        }
    };

    // backward_grad over every model tensor
    {
        const std::vector<Tokens> batch{x};
        const Tensor targets({1, y.size()}, y.vec());
        const LmGraph g = build_lm_graph(proxy.config, nullptr, batch, &targets);
        const TensorMap grads = backward_grad(g.tape, forward_eval(g.tape, bind_model(proxy, nullptr)), g.loss);
        for (const auto& [name, t] : proxy.tensors) {
            const Tensor& an = grads.at(name);
            std::vector<std::size_t> coords(4);
            for (auto& c : coords) c = rng() % t.size();
            auto loss_fn = [&](const Tensor& moved_t) {
                ModelParams moved = proxy;
                moved.tensors.at(name) = moved_t;
                return loss_ce(moved, nullptr, x, y);
            };
            const Tensor fd = finite_diff_grad(loss_fn, t, eps, coords, Stencil::five_point);
            for (auto c : coords) check("backward_grad", an[c], fd[c]);
        }
    }

    // lora_gradient with nonzero B so both factors carry signal
    {
        AdapterSet a = attach_lora(proxy, 8, {"wq", "wv"}, 7);
        for (auto& ad : a) fill_normal(ad.B, rng, 0.05F);
        const LoraGradient g = lora_gradient(proxy, a, x, y);
        for (std::size_t k = 0; k < a.size(); ++k) {
            for (int which = 0; which < 2; ++which) {
                const Tensor& base = which == 0 ? a[k].A : a[k].B;
                const Tensor& an = which == 0 ? g.entries[k].grad_A : g.entries[k].grad_B;
                std::vector<std::size_t> coords(12);
                for (auto& c : coords) c = rng() % base.size();
                auto loss_fn = [&](const Tensor& moved_t) {
                    AdapterSet moved = a;
                    (which == 0 ? moved[k].A : moved[k].B) = moved_t;
                    return loss_ce(proxy, &moved, x, y);
                };
                const Tensor fd = finite_diff_grad(loss_fn, base, eps, coords, Stencil::five_point);
                for (auto c : coords) check("lora_gradient", an[c], fd[c]);
            }
        }
    }

    // full_gradient of the projection weights
    {
        const FullGradient g = full_gradient(proxy, {"wq", "wv"}, x, y);
        for (const auto& e : g.entries) {
            std::vector<std::size_t> coords(20);
            for (auto& c : coords) c = rng() % e.grad_W.size();
            auto loss_fn = [&](const Tensor& wt) {
                ModelParams moved = proxy;
                moved.weight(e.layer, e.projection) = wt;
                return loss_ce(moved, nullptr, x, y);
            };
            const Tensor fd = finite_diff_grad(loss_fn, proxy.weight(e.layer, e.projection), eps, coords, Stencil::five_point);
            for (auto c : coords) check("full_gradient", e.grad_W[c], fd[c]);
        }
    }
    const double secs = since(t0);
    std::string counts;
    for (const auto& [k, n] : per_kind) counts += (counts.empty() ? "" : ", ") + k + " " + std::to_string(n);
    report("criterion 1 (gradient oracles vs finite differences)", bad == 0 && checked >= 200 && per_kind.size() == 3 && secs < 120.0,
           std::to_string(checked - bad) + "/" + std::to_string(checked) + " coordinates within max(1e-4, 1e-3 rel) [" + counts +
               "], " + fmt(secs, 3) + " s");
}

// ---- criterion 2 ------------------------------------------------------------

void lora_identity(const Corpus& corpus, const ModelParams& proxy, const RunConfig& cfg) {
    const AdapterSet a = adapters_for(cfg, proxy);
    const Tensor y = answer_label(corpus, proxy.config.vocab_size);
    double max_diff = 0.0;
    std::size_t nonzero_a = 0, a_coords = 0;
    for (std::size_t i = 0; i < 20; ++i) {
        const Tokens& x = corpus.facts[i * 10].prompt;
        const Tensor base = forward_lm(proxy, nullptr, x);
        const Tensor adapted = forward_lm(proxy, &a, x);
        for (std::size_t k = 0; k < base.size(); ++k) max_diff = std::max(max_diff, std::fabs(static_cast<double>(base[k]) - adapted[k]));
        for (const auto& e : lora_gradient(proxy, a, x, y).entries) {
            for (float v : e.grad_A.data()) {
                ++a_coords;
                nonzero_a += v != 0.0F;
            }
        }
    }
    report("criterion 2 (fresh LoRA is the identity, grad_A = 0)", max_diff <= 1e-5 && nonzero_a == 0,
           "max |forward difference| " + fmt(max_diff, 3) + " over 20 prompts, " + std::to_string(nonzero_a) + " of " +
               std::to_string(a_coords) + " grad_A entries nonzero");
}

// ---- criterion 3 ------------------------------------------------------------

GradientPairDataset planted_pairs(std::size_t n, std::uint64_t seed) {
    const std::size_t d = 8, r = 2, layers = 2, in = 2 * d * r, out = d * d;
    GradientPairDataset ds;
    ds.model_hash = "synthetic";
    ds.adapter_spec = "d_model=8;rank=2;proj=wq;a_seed=0";
    ds.n_layers = layers;
    ds.d_model = d;
    ds.rank = r;
    ds.projections = {"wq"};
    Rng rng(seed);
    Tensor map({in, out});
    fill_normal(map, rng, static_cast<float>(1.0 / std::sqrt(static_cast<double>(in))));
    ds.lora = Tensor({n, layers * in});
    fill_normal(ds.lora, rng, 0.01F);
    ds.full = Tensor({n, layers * out});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t l = 0; l < layers; ++l) {
            for (std::size_t o = 0; o < out; ++o) {
                double s = 0.0;
                for (std::size_t k = 0; k < in; ++k) s += static_cast<double>(ds.lora.at(i, l * in + k)) * map.at(k, o);
                ds.full.at(i, l * out + o) = static_cast<float>(s);
            }
        }
        ds.example_ids.push_back(i);
    }
    return ds;
}

void planted_recovery() {
    const auto t0 = Clock::now();
    const GradientPairDataset ds = planted_pairs(8000, 3);
    const TrainedDecoder t = train_decoder(ds, DecoderHyper{});
    double scale = 0.0;
    for (float v : ds.full.data()) scale += static_cast<double>(v) * v;
    scale /= static_cast<double>(ds.size());
    const double rel = t.report.selected_holdout_mse / scale;
    const double cos = reconstruction_quality(t.params, ds).mean;
    const double secs = since(t0);
    report("criterion 3 (planted linear map recovery)", rel < 1e-3 && cos > 0.999 && secs < 300.0,
           "holdout relative MSE " + fmt(rel, 3) + ", mean cosine " + fmt(cos, 6) + ", " + fmt(secs, 3) + " s");
}

// ---- shared experiment state ------------------------------------------------

struct Lab {
    RunConfig cfg;
    Corpus corpus;
    ModelParams proxy;
    ModelParams target;
    fs::path dir;
    std::map<std::pair<std::uint64_t, std::size_t>, DecoderParams> decoders;  // (seed offset, rank)
    std::map<std::tuple<std::uint64_t, std::size_t, std::size_t, std::string>, SweepCell> cells;

    RunConfig seeded(std::uint64_t k) const { return with_seed_offset(cfg, static_cast<std::int64_t>(k)); }

    const DecoderParams& decoder(std::uint64_t k, std::size_t rank) {
        auto it = decoders.find({k, rank});
        if (it != decoders.end()) return it->second;
        const auto t0 = Clock::now();
        RunConfig c = seeded(k);
        c.rank = rank;
        const TrainedDecoder t = decoder_stage(c, collect_stage(c, corpus, proxy));
        note("decoder seed+" + std::to_string(k) + " rank " + std::to_string(rank) + ": holdout MSE " +
             fmt(t.report.initial_holdout_mse) + " -> " + fmt(t.report.selected_holdout_mse) + ", " + fmt(since(t0), 3) + " s");
        return decoders.emplace(std::make_pair(k, rank), t.params).first->second;
    }

    const SweepCell& cell(std::uint64_t k, std::size_t rank, std::size_t views, Method m) {
        const auto key = std::make_tuple(k, rank, views, std::string(method_name(m)));
        auto it = cells.find(key);
        if (it != cells.end()) return it->second;
        const auto t0 = Clock::now();
        RunConfig c = seeded(k);
        c.rank = rank;
        c.views = views;
        const DecoderParams* dec = m == Method::r2f ? &decoder(k, rank) : nullptr;
        const UnlearnRun run = unlearn_stage(c, corpus, target, dec, m);
        SweepCell out{0.0, k, run.eta, run.sweep.budget_met, eval_stage(c, corpus, run.before, run.after, method_name(m))};
        note(std::string(method_name(m)) + " seed+" + std::to_string(k) + " rank " + std::to_string(rank) + " views " +
             std::to_string(views) + ": eta " + fmt(run.eta) + (run.sweep.budget_met ? "" : " (budget missed)") + ", USR " +
             fmt(out.report.usr.percent) + ", GUR drop " + fmt(out.report.gur.drop) + ", RAP " + fmt(out.report.rap.percent) +
             ", " + fmt(since(t0), 3) + " s");
        return cells.emplace(key, out).first->second;
    }
};

// ---- criterion 4 ------------------------------------------------------------

void beats_null(Lab& lab) {
    std::size_t ok = 0;
    std::string detail;
    for (std::uint64_t k = 0; k < 3; ++k) {
        const RunConfig c = lab.seeded(k);
        const DecoderParams& dec = lab.decoder(k, c.rank);
        const auto pool = proxy_pool(c, lab.corpus);
        const Tensor y = run_label(c, lab.corpus);
        std::vector<PairExample> ex;
        for (std::size_t i = 0; i < 200; ++i) ex.push_back({c.pairs + i, pool[c.pairs + i].prompt, y});
        const GradientPairDataset held = collect_pairs(lab.proxy, adapters_for(c, lab.proxy), c.seed_adapter, ex, 200);
        DecoderHyper h = c.decoder;
        h.seed = c.seed_decoder;
        const double mse = decoder_mse(dec, held);
        const double mse_zero = decoder_mse(zero_decoder(held, h), held);
        const double cos = reconstruction_quality(dec, held).mean;
        const double cos_init = reconstruction_quality(init_decoder(held, h), held).mean;
        const bool pass = mse < mse_zero && cos > cos_init;
        ok += pass;
        detail += (k ? "; " : "") + std::string("seed+") + std::to_string(k) + " MSE " + fmt(mse) + " vs zero " + fmt(mse_zero) +
                  ", cos " + fmt(cos, 3) + " vs init " + fmt(cos_init, 3);
    }
    report("criterion 4 (decoder beats null decoders on 200 held-out proxy pairs)", ok == 3, detail);
}

// ---- criterion 5 ------------------------------------------------------------

void efficacy(Lab& lab) {
    const auto m = nlohmann::json::parse(read_file(lab.dir / "metrics_r2f.json"));
    const auto manifest = nlohmann::json::parse(read_file(lab.dir / "unlearn_r2f.json"));
    const double u = m["usr"], drop = m["gur_drop"];
    RunConfig c = lab.cfg;
    c.eta = 0.0;
    const DecoderParams dec = decoder_from_container(load_container(lab.dir / "decoder.r2f"));
    const UnlearnRun zero = unlearn_stage(c, lab.corpus, lab.target, &dec, Method::r2f);
    const double u0 = usr(zero.before, zero.after, lab.corpus, lab.corpus.target).percent;
    report("criterion 5 (r2f efficacy at the swept step size, eta = 0 control)", u > 0.0 && drop <= 2.0 && u0 == 0.0,
           "eta " + fmt(manifest["eta"].get<double>()) + ": USR " + fmt(u) + ", GUR drop " + fmt(drop) + "; eta = 0: USR " + fmt(u0));
}

// ---- criterion 6 ------------------------------------------------------------

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

void ordering(Lab& lab) {
    std::vector<double> usr_r2f, usr_ls, rap_r2f, rap_ls;
    for (std::uint64_t k = 0; k < 3; ++k) {
        for (Method m : all_methods()) {
            SweepCell c = lab.cell(k, lab.cfg.rank, lab.cfg.views, m);
            if (m == Method::r2f) {
                usr_r2f.push_back(c.report.usr.percent);
                rap_r2f.push_back(c.report.rap.percent);
            }
            if (m == Method::lora_single) {
                usr_ls.push_back(c.report.usr.percent);
                rap_ls.push_back(c.report.rap.percent);
            }
        }
    }
    std::string csv = "method,metric,seed_offset_0,seed_offset_1,seed_offset_2,mean\n";
    for (Method m : all_methods()) {
        for (const char* metric : {"usr", "gur_drop", "rap", "mia_cosine", "eta"}) {
            csv += std::string(method_name(m)) + ',' + metric;
            std::vector<double> xs;
            for (std::uint64_t k = 0; k < 3; ++k) {
                const auto& c = lab.cell(k, lab.cfg.rank, lab.cfg.views, m);
                const std::string s = metric;
                xs.push_back(s == "usr" ? c.report.usr.percent
                             : s == "gur_drop" ? c.report.gur.drop
                             : s == "rap" ? c.report.rap.percent
                             : s == "mia_cosine" ? c.report.mia.cosine
                                                 : c.eta);
                csv += ',' + fmt(xs.back(), 10);
            }
            csv += ',' + fmt(mean_of(xs), 10) + '\n';
        }
    }
    write_file_atomic(lab.dir.parent_path() / "methods.csv", csv);
    std::size_t usr_reversed = 0, rap_reversed = 0;
    for (std::size_t k = 0; k < 3; ++k) {
        usr_reversed += usr_r2f[k] < usr_ls[k];
        rap_reversed += rap_r2f[k] > rap_ls[k];
    }
    const bool means = mean_of(usr_r2f) >= mean_of(usr_ls) && mean_of(rap_r2f) <= mean_of(rap_ls);
    report("criterion 6 (r2f vs lora_single ordering over 3 seeds)", means && usr_reversed < 3 && rap_reversed < 3,
           "mean USR " + fmt(mean_of(usr_r2f)) + " vs " + fmt(mean_of(usr_ls)) + ", mean RAP " + fmt(mean_of(rap_r2f)) + " vs " +
               fmt(mean_of(rap_ls)) + "; seeds reversed: USR " + std::to_string(usr_reversed) + "/3, RAP " +
               std::to_string(rap_reversed) + "/3");
}

// ---- criteria 7 and 8 ------------------------------------------------------

void views_trend(Lab& lab) {
    const std::vector<std::size_t> grid{1, 2, 4, 5, 8};
    std::vector<SweepCell> rows;
    std::size_t ok = 0;
    std::string detail;
    for (std::uint64_t k = 0; k < 3; ++k) {
        for (std::size_t n : grid) {
            SweepCell c = lab.cell(k, lab.cfg.rank, n, Method::r2f);
            c.value = static_cast<double>(n);
            rows.push_back(c);
        }
        const double u1 = lab.cell(k, lab.cfg.rank, 1, Method::r2f).report.usr.percent;
        const double u5 = lab.cell(k, lab.cfg.rank, 5, Method::r2f).report.usr.percent;
        ok += u5 >= u1;
        detail += (k ? "; " : "") + std::string("seed+") + std::to_string(k) + " N=1 " + fmt(u1) + ", N=5 " + fmt(u5);
    }
    const fs::path csv = lab.dir.parent_path() / "sweep_views_r2f.csv";
    write_file_atomic(csv, sweep_csv(SweepAxis::views, "r2f", rows));
    report("criterion 7 (USR at N=5 >= N=1 on >= 2 of 3 seeds)", ok >= 2 && fs::exists(csv),
           detail + " (" + std::to_string(ok) + "/3); CSV " + csv.filename().string());
}

void rank_trend(Lab& lab) {
    const std::vector<std::size_t> grid{2, 4, 8, 12, 16};
    std::vector<SweepCell> rows;
    std::size_t ok = 0;
    std::string detail;
    for (std::uint64_t k = 0; k < 3; ++k) {
        std::vector<double> u;
        for (std::size_t r : grid) {
            SweepCell c = lab.cell(k, r, lab.cfg.views, Method::r2f);
            c.value = static_cast<double>(r);
            rows.push_back(c);
            u.push_back(c.report.usr.percent);
        }
        const bool mono = u[0] <= u[1] && u[1] <= u[2];
        ok += mono;
        detail += (k ? "; " : "") + std::string("seed+") + std::to_string(k) + " r=2,4,8: " + fmt(u[0]) + "," + fmt(u[1]) + "," +
                  fmt(u[2]);
    }
    const fs::path csv = lab.dir.parent_path() / "sweep_rank_r2f.csv";
    write_file_atomic(csv, sweep_csv(SweepAxis::rank, "r2f", rows));
    report("criterion 8 (USR non-decreasing from r=2 to r=8 on >= 2 of 3 seeds)", ok >= 2 && fs::exists(csv),
           detail + " (" + std::to_string(ok) + "/3); CSV " + csv.filename().string());
}

// ---- criterion 9 ------------------------------------------------------------

void audit(Lab& lab) {
    Prop1Audit a;
    std::string reload_error;
    try {
        a = audit_from_json(read_file(lab.dir / "audit_prop1.json"));
    } catch (const Error& e) {
        reload_error = e.what();
    }
    std::size_t tri_ok = 0;
    for (const auto& s : a.samples) tri_ok += s.lhs <= s.term_a + s.term_c + kAuditTolerance;

    const DecoderParams dec = decoder_from_container(load_container(lab.dir / "decoder.r2f"));
    const AdapterSet pa = adapters_for(lab.cfg, lab.proxy);
    const Prop1Audit d = audit_prop1(dec, lab.proxy, pa, lab.proxy, pa, audit_samples(lab.cfg, lab.corpus), run_label(lab.cfg, lab.corpus));
    double max_c = 0.0;
    for (const auto& s : d.samples) max_c = std::max(max_c, s.term_c);

    const bool pass = reload_error.empty() && !a.samples.empty() && tri_ok == a.samples.size() && a.bound_satisfied &&
                      max_c <= 1e-6 && d.dis_hat == 0.0;
    report("criterion 9 (reconstruction bound audit)", pass,
           (reload_error.empty() ? "" : "reload failed: " + reload_error + "; ") + "triangle holds on " + std::to_string(tri_ok) + "/" +
               std::to_string(a.samples.size()) + " samples; E[lhs] " + fmt(a.e_lhs) + " <= " + fmt(a.e_term_a_pro) + " + " +
               fmt(a.dis_hat) + " + " + fmt(a.e_term_c) + " (" + (a.bound_satisfied ? "holds" : "violated") +
               "); proxy=target: max term_c " + fmt(max_c, 3) + ", dis_hat " + fmt(d.dis_hat, 3));
}

// ---- criterion 11 -----------------------------------------------------------

void metric_units(Lab& lab) {
    std::vector<std::string> failed;
    auto expect = [&](bool ok, const std::string& what) {
        if (!ok) failed.push_back(what);
    };
    // identity model
    const UsrResult u = usr(lab.target, lab.target, lab.corpus, lab.corpus.target);
    expect(u.percent == 0.0, "identity USR " + fmt(u.percent));
    const MiaResult mi = mia(lab.target, lab.target, mia_probes(lab.corpus, 100));
    expect(std::fabs(mi.cosine - 1.0) <= 1e-12 && mi.tv == 0.0, "identity MIA cos " + fmt(mi.cosine, 17) + " tv " + fmt(mi.tv));
    const GurResult g = gur(lab.target, lab.corpus, lab.corpus.retain, lab.target);
    expect(g.drop == 0.0, "identity GUR drop " + fmt(g.drop));

    // uniform vs one-hot
    const std::size_t v = lab.cfg.vocab_size;
    std::vector<float> uni(v, 1.0F / static_cast<float>(v)), hot(v, 0.0F);
    hot[3] = 1.0F;
    const double tv = total_variation(uni, hot);
    expect(std::fabs(tv - (1.0 - 1.0 / static_cast<double>(v))) <= 1e-6, "uniform/one-hot TV " + fmt(tv, 10));
    const double cs = distribution_cosine(uni, hot);
    expect(std::fabs(cs - 1.0 / std::sqrt(static_cast<double>(v))) <= 1e-6, "uniform/one-hot cosine " + fmt(cs, 10));

    // closed-form counts
    std::vector<TargetRow> rows;
    for (std::size_t i = 0; i < 20; ++i) {
        TargetRow r;
        r.fact_id = i;
        r.answer = r.before = 5;
        r.after = i == 0 ? 6 : 5;
        rows.push_back(r);
    }
    expect(usr_from_rows(rows).percent == 5.0, "1 of 20 flipped != 5%");
    rows[1].excluded = true;
    rows[1].after = 9;
    expect(usr_from_rows(rows).counted == 19, "excluded row counted");
    std::vector<RetainRow> keep(10, RetainRow{0, true, true});
    keep[0].correct_after = false;
    const GurResult gr = gur_from_rows(keep);
    expect(gr.after == 90.0 && gr.drop == 10.0, "GUR 9/10 gives " + fmt(gr.after));

    // zero attack steps: recovered exactly when not unlearned
    const ModelParams after = load_model(lab.dir / "unlearned_r2f.r2f");
    RapConfig rc = lab.cfg.rap;
    rc.steps = 0;
    const double rap0 = rap(lab.target, after, lab.corpus, lab.corpus.target, rc).percent;
    const double u_after = usr(lab.target, after, lab.corpus, lab.corpus.target).percent;
    expect(std::fabs(rap0 - (100.0 - u_after)) <= 1e-9, "RAP(k=0) " + fmt(rap0) + " != 100 - USR " + fmt(u_after));

    std::string detail = failed.empty() ? "identity USR 0 / cosine 1 / TV 0, uniform-vs-one-hot TV = 1 - 1/V, USR/GUR counts, RAP(k=0) = 100 - USR"
                                        : "";
    for (const auto& f : failed) detail += (detail.empty() ? "" : "; ") + f;
    report("criterion 11 (metric closed forms)", failed.empty(), detail);
}

}  // namespace

int main(int argc, char** argv) {
    const auto t_all = Clock::now();
    const fs::path work = fs::absolute(argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_work"));
    fs::create_directories(work);
    g_log.open(work / "acceptance.log");
    const fs::path cfg_path = work / "acceptance.cfg";
    write_file_atomic(cfg_path, "# defaults throughout\n");
    try {
        // full pipeline through the CLI, twice
        double secs_a = 0.0, secs_b = 0.0;
        const bool ok_a = run_pipeline(work / "run_a", cfg_path, &secs_a);
        report("pipeline (pretrain, collect 1k pairs, train decoder, unlearn, eval, audit) under 30 min", ok_a && secs_a < 1800.0,
               ok_a ? fmt(secs_a, 4) + " s" : "a stage failed");
        if (!ok_a) return 1;

        const bool ok_b = run_pipeline(work / "run_b", cfg_path, &secs_b);
        const fs::path sweep_cfg = work / "sweep.cfg";
        write_file_atomic(sweep_cfg, "sweep.seeds = 2\n");
        bool sweep_ok = true;
        for (const char* d : {"run_a", "run_b"}) {
            sweep_ok = sweep_ok && cli("sweep --config " + sweep_cfg.string() + " --axis eta --grid 0.01,0.1 --method lora_single --out " +
                                           (work / d).string(),
                                       work / d / "cli.log") == 0;
        }
        std::size_t same = 0;
        std::vector<std::string> differing;
        const auto fa = files_in(work / "run_a");
        const auto fb = files_in(work / "run_b");
        for (const auto& f : fa) {
            if (std::find(fb.begin(), fb.end(), f) != fb.end() && read_file(work / "run_a" / f) == read_file(work / "run_b" / f)) {
                ++same;
            } else {
                differing.push_back(f.string());
            }
        }
        std::string diff_list;
        for (const auto& f : differing) diff_list += " " + f;
        report("criterion 10 (CLI reruns are byte-identical)", ok_b && sweep_ok && differing.empty() && fa.size() == fb.size(),
               std::to_string(same) + "/" + std::to_string(fa.size()) + " files identical across " + std::to_string(std::size(kStages) + 1) +
                   " commands" + (differing.empty() ? "" : ", differing:" + diff_list));

        Lab lab;
        lab.dir = work / "run_a";
        lab.cfg = load_config(cfg_path);
        lab.corpus = make_corpus(lab.cfg);
        lab.proxy = load_model(lab.dir / "proxy.r2f");
        lab.target = load_model(lab.dir / "target.r2f");
        // the CLI decoder is the (seed offset 0, default rank) decoder
        lab.decoders.emplace(std::make_pair(std::uint64_t{0}, lab.cfg.rank), decoder_from_container(load_container(lab.dir / "decoder.r2f")));

        gradient_oracles(lab.corpus, lab.proxy);
        lora_identity(lab.corpus, lab.proxy, lab.cfg);
        planted_recovery();
        beats_null(lab);
        efficacy(lab);
        metric_units(lab);
        audit(lab);
        ordering(lab);
        views_trend(lab);
        rank_trend(lab);
    } catch (const std::exception& e) {
        report("acceptance run", false, std::string("aborted: ") + e.what());
    }

    std::size_t failed = 0;
    for (const auto& v : g_verdicts) failed += !v.pass;
    std::cout << "\n" << g_verdicts.size() - failed << "/" << g_verdicts.size() << " passed, " << fmt(since(t_all), 4) << " s total\n";
    g_log << "\n" << g_verdicts.size() - failed << "/" << g_verdicts.size() << " passed\n";
    return failed == 0 ? 0 : 1;
}
