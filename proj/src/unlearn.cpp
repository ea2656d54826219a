// SPDX-License-Identifier: Apache-2.0

#include "r2f/unlearn.hpp"

#include <chrono>
#include <cmath>
#include <set>

#include "r2f/error.hpp"
#include "r2f/eval.hpp"

namespace r2f {

namespace {

const std::vector<std::pair<Method, const char*>>& method_table() {
    static const std::vector<std::pair<Method, const char*>> t{{Method::r2f, "r2f"},
                                                               {Method::full_grad, "full_grad"},
                                                               {Method::lora_single, "lora_single"},
                                                               {Method::lora_multi, "lora_multi"},
                                                               {Method::grad_ascent, "grad_ascent"}};
    return t;
}

std::vector<std::string> adapted_projections(const AdapterSet& adapters) {
    std::set<std::string> s;
    for (const auto& a : adapters) s.insert(a.projection);
    return {s.begin(), s.end()};
}

void check_context(const UnlearnContext& ctx) {
    if (ctx.corpus == nullptr || ctx.target == nullptr || ctx.adapters == nullptr) {
        fail(ErrorKind::usage, "unlearn: corpus, target and adapters are required");
    }
    if (ctx.adapters->empty()) fail(ErrorKind::config, "unlearn: no adapters attached to the target");
}

void subtract_scaled(Tensor& w, const Tensor& g, double eta) {
    if (w.shape() != g.shape()) fail(ErrorKind::shape, "unlearn: update shape mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(static_cast<double>(w[i]) - eta * g[i]);
}

std::vector<double> answer_probabilities(const ModelParams& m, const Corpus& corpus, const std::vector<std::size_t>& facts) {
    std::vector<Tokens> prompts;
    for (auto id : facts) prompts.push_back(corpus.facts.at(id).prompt);
    const Tensor p = last_token_distributions(m, nullptr, prompts);
    std::vector<double> out;
    for (std::size_t i = 0; i < facts.size(); ++i) out.push_back(p.at(i, corpus.facts.at(facts[i]).answer));
    return out;
}

/// Shared bookkeeping: timing, before/after probabilities, total norm.
template <typename PerFact>
UnlearnOutcome run_steps(const UnlearnContext& ctx, const UnlearnRequest& req, Method method, PerFact&& step) {
    check_context(ctx);
    req.validate(*ctx.corpus);
    const auto t0 = std::chrono::steady_clock::now();
    UnlearnOutcome out;
    out.method = method;
    out.params = *ctx.target;
    if (updates_adapters(method)) out.adapters = *ctx.adapters;
    const auto before = answer_probabilities(merge_lora(*ctx.target, *ctx.adapters), *ctx.corpus, req.facts);
    const Tensor y = unlearning_label(*ctx.corpus, req.label, ctx.target->config.vocab_size);
    double sq = 0.0;
    for (std::size_t i = 0; i < req.facts.size(); ++i) {
        FactOutcome fo;
        fo.fact_id = req.facts[i];
        fo.p_before = before[i];
        step(out, ctx.corpus->facts.at(req.facts[i]), y, fo);
        sq += fo.grad_norm * fo.grad_norm;
        out.facts.push_back(fo);
    }
    out.grad_norm = std::sqrt(sq);
    const auto after = answer_probabilities(out.effective(), *ctx.corpus, req.facts);
    for (std::size_t i = 0; i < req.facts.size(); ++i) out.facts[i].p_after = after[i];
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

double l2(const Tensor& t) { return l2_norm(t.data()); }

}  // namespace

const char* method_name(Method m) {
    for (const auto& [k, name] : method_table()) {
        if (k == m) return name;
    }
    return "?";
}

Method parse_method(std::string_view name) {
    for (const auto& [k, n] : method_table()) {
        if (name == n) return k;
    }
    fail(ErrorKind::usage, "unknown method '" + std::string(name) + "' (r2f, full_grad, lora_single, lora_multi, grad_ascent)");
}

const std::vector<Method>& all_methods() {
    static const std::vector<Method> m{Method::r2f, Method::full_grad, Method::lora_single, Method::lora_multi,
                                       Method::grad_ascent};
    return m;
}

bool updates_adapters(Method m) { return m == Method::lora_single || m == Method::lora_multi; }

void UnlearnRequest::validate(const Corpus& corpus) const {
    if (!(eta >= 0.0) || !std::isfinite(eta)) fail(ErrorKind::config, "unlearn: eta must be finite and non-negative");
    if (views == 0) fail(ErrorKind::config, "unlearn: views must be at least 1");
    if (facts.empty()) fail(ErrorKind::config, "unlearn: no target facts");
    for (auto id : facts) {
        if (id >= corpus.facts.size()) fail(ErrorKind::config, "unlearn: fact id " + std::to_string(id) + " out of range");
        if (label.kind == UnlearnLabel::Kind::counterfactual && corpus.facts[id].answer == label.token) {
            fail(ErrorKind::config, "unlearn: counterfactual token equals the canonical answer of fact " + std::to_string(id));
        }
    }
}

Tensor unlearning_label(const Corpus& corpus, const UnlearnLabel& label, std::size_t vocab) {
    if (label.kind == UnlearnLabel::Kind::counterfactual) {
        if (label.token >= vocab) fail(ErrorKind::config, "unlearn: counterfactual token out of range");
        return one_hot(label.token, vocab);
    }
    const auto support = corpus.answer_vocabulary();
    Tensor y({vocab});
    for (auto t : support) y[t] = 1.0F / static_cast<float>(support.size());
    return y;
}

ModelParams UnlearnOutcome::effective() const { return adapters.empty() ? params : merge_lora(params, adapters); }

double apply_full_gradient_step(ModelParams& params, const std::vector<std::string>& projections, const Tokens& x,
                                const Tensor& y, double signed_eta) {
    const FullGradient g = full_gradient(params, projections, x, y);
    double sq = 0.0;
    for (const auto& e : g.entries) {
        if (!e.grad_W.all_finite()) fail(ErrorKind::numerical, "unlearn: non-finite gradient for " + weight_name(e.layer, e.projection));
        sq += std::pow(l2(e.grad_W), 2);
    }
    for (const auto& e : g.entries) subtract_scaled(params.weight(e.layer, e.projection), e.grad_W, signed_eta);
    return std::sqrt(sq);
}

UnlearnOutcome r2f_unlearn(const UnlearnContext& ctx, const UnlearnRequest& req) {
    check_context(ctx);
    if (ctx.decoder == nullptr) fail(ErrorKind::usage, "r2f: a decoder is required");
    const std::size_t d = ctx.target->config.d_model;
    check_decoder_compatible(*ctx.decoder, adapter_spec(*ctx.adapters, d, ctx.adapter_seed), d);
    return run_steps(ctx, req, Method::r2f, [&](UnlearnOutcome& out, const Fact& fact, const Tensor& y, FactOutcome& fo) {
        const ParaphraseSet views = filter_paraphrases(generate_paraphrases(*ctx.corpus, fact, req.views, req.seed), out.params, req.tau);
        std::vector<LoraGradient> grads;
        for (const auto& x : views.prompts) grads.push_back(lora_gradient(out.params, *ctx.adapters, x, y));
        const FullGradient g = decode(*ctx.decoder, average_views(grads));
        double sq = 0.0;
        for (const auto& e : g.entries) {
            subtract_scaled(out.params.weight(e.layer, e.projection), e.grad_W, req.eta);
            sq += std::pow(l2(e.grad_W), 2);
        }
        fo.views_used = views.prompts.size();
        fo.grad_norm = std::sqrt(sq);
    });
}

UnlearnOutcome baseline_full_grad(const UnlearnContext& ctx, const UnlearnRequest& req) {
    check_context(ctx);
    const auto projections = adapted_projections(*ctx.adapters);
    return run_steps(ctx, req, Method::full_grad, [&](UnlearnOutcome& out, const Fact& fact, const Tensor& y, FactOutcome& fo) {
        fo.views_used = 1;
        fo.grad_norm = apply_full_gradient_step(out.params, projections, fact.prompt, y, req.eta);
    });
}

UnlearnOutcome grad_ascent_reference(const UnlearnContext& ctx, const UnlearnRequest& req) {
    check_context(ctx);
    const auto projections = adapted_projections(*ctx.adapters);
    const std::size_t vocab = ctx.target->config.vocab_size;
    return run_steps(ctx, req, Method::grad_ascent, [&](UnlearnOutcome& out, const Fact& fact, const Tensor&, FactOutcome& fo) {
        fo.views_used = 1;
        fo.grad_norm = apply_full_gradient_step(out.params, projections, fact.prompt, one_hot(fact.answer, vocab), -req.eta);
    });
}

UnlearnOutcome baseline_lora(const UnlearnContext& ctx, const UnlearnRequest& req) {
    check_context(ctx);
    if (!updates_adapters(req.method)) fail(ErrorKind::usage, "baseline_lora: method must be lora_single or lora_multi");
    const bool multi = req.method == Method::lora_multi;
    return run_steps(ctx, req, req.method, [&](UnlearnOutcome& out, const Fact& fact, const Tensor& y, FactOutcome& fo) {
        LoraGradient g;
        if (multi) {
            const ParaphraseSet views =
                filter_paraphrases(generate_paraphrases(*ctx.corpus, fact, req.views, req.seed), out.effective(), req.tau);
            std::vector<LoraGradient> grads;
            for (const auto& x : views.prompts) grads.push_back(lora_gradient(out.params, out.adapters, x, y));
            g = average_views(grads);
            fo.views_used = views.prompts.size();
        } else {
            g = lora_gradient(out.params, out.adapters, fact.prompt, y);
            fo.views_used = 1;
        }
        double sq = 0.0;
        for (std::size_t i = 0; i < g.entries.size(); ++i) {
            const auto& e = g.entries[i];
            if (!e.grad_A.all_finite() || !e.grad_B.all_finite()) fail(ErrorKind::numerical, "lora: non-finite adapter gradient");
            subtract_scaled(out.adapters[i].A, e.grad_A, req.eta);
            subtract_scaled(out.adapters[i].B, e.grad_B, req.eta);
            sq += std::pow(l2(e.grad_A), 2) + std::pow(l2(e.grad_B), 2);
        }
        fo.grad_norm = std::sqrt(sq);
    });
}

UnlearnOutcome unlearn(const UnlearnContext& ctx, const UnlearnRequest& req) {
    switch (req.method) {
    case Method::r2f: return r2f_unlearn(ctx, req);
    case Method::full_grad: return baseline_full_grad(ctx, req);
    case Method::lora_single:
    case Method::lora_multi: return baseline_lora(ctx, req);
    case Method::grad_ascent: return grad_ascent_reference(ctx, req);
    }
    fail(ErrorKind::usage, "unlearn: unknown method");
}

EtaSweep eta_sweep(const UnlearnContext& ctx, const UnlearnRequest& tmpl, const std::vector<double>& grid,
                   const std::vector<std::size_t>& validation, const std::vector<std::size_t>& retain, double budget) {
    check_context(ctx);
    if (grid.empty()) fail(ErrorKind::config, "eta_sweep: empty grid");
    for (double e : grid) {
        if (!(e >= 0.0) || !std::isfinite(e)) fail(ErrorKind::config, "eta_sweep: grid values must be non-negative");
    }
    const ModelParams before = merge_lora(*ctx.target, *ctx.adapters);
    EtaSweep sweep;
    for (double eta : grid) {
        UnlearnRequest req = tmpl;
        req.facts = validation;
        req.eta = eta;
        const ModelParams after = unlearn(ctx, req).effective();
        const GurResult g = gur(after, *ctx.corpus, retain, before);
        sweep.rows.push_back({eta, usr(before, after, *ctx.corpus, validation).percent, g.after, g.drop});
    }
    const EtaRow* pick = nullptr;
    for (const auto& r : sweep.rows) {
        if (r.gur_drop <= budget + 1e-9 && (pick == nullptr || r.eta > pick->eta)) pick = &r;
    }
    if (pick == nullptr) {
        sweep.budget_met = false;
        for (const auto& r : sweep.rows) {
            if (pick == nullptr || r.gur_drop < pick->gur_drop) pick = &r;
        }
    }
    sweep.selected = pick->eta;
    return sweep;
}

std::vector<double> log_grid(double lo, double hi, std::size_t n) {
    if (!(lo > 0.0 && hi >= lo) || n == 0) fail(ErrorKind::config, "log_grid: need 0 < lo <= hi and n >= 1");
    std::vector<double> g;
    if (n == 1) return {lo};
    const double a = std::log10(lo);
    const double b = std::log10(hi);
    for (std::size_t i = 0; i < n; ++i) g.push_back(std::pow(10.0, a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1)));
    return g;
}

}  // namespace r2f
