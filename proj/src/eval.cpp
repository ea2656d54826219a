// SPDX-License-Identifier: Apache-2.0

#include "r2f/eval.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <set>
#include <sstream>

#include "r2f/error.hpp"
#include "r2f/optim.hpp"

namespace r2f {

namespace {

using json = nlohmann::json;

std::vector<Tokens> canonical_prompts(const Corpus& corpus, const std::vector<std::size_t>& ids) {
    std::vector<Tokens> out;
    out.reserve(ids.size());
    for (auto id : ids) out.push_back(corpus.facts.at(id).prompt);
    return out;
}

std::size_t argmax_row(const Tensor& probs, std::size_t row) {
    const std::size_t v = probs.cols();
    const float* p = probs.data().data() + row * v;
    return static_cast<std::size_t>(std::max_element(p, p + v) - p);
}

double pct(std::size_t num, std::size_t den) { return den == 0 ? 0.0 : 100.0 * static_cast<double>(num) / static_cast<double>(den); }

/// Flattened gradient restricted to layers below `layers`.
std::vector<double> shared_part(const FullGradient& g, std::size_t layers) {
    std::vector<double> out;
    for (const auto& e : g.entries) {
        if (e.layer >= layers) continue;
        out.insert(out.end(), e.grad_W.data().begin(), e.grad_W.data().end());
    }
    return out;
}

double dist(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) fail(ErrorKind::shape, "audit: gradient layouts differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

}  // namespace

UsrResult usr_from_rows(std::vector<TargetRow> rows) {
    UsrResult r;
    std::size_t flipped = 0;
    for (auto& row : rows) {
        row.flipped = !row.excluded && row.after != row.before;
        if (row.excluded) {
            ++r.excluded;
        } else {
            ++r.counted;
            flipped += row.flipped ? 1 : 0;
        }
    }
    r.percent = pct(flipped, r.counted);
    r.rows = std::move(rows);
    return r;
}

UsrResult usr(const ModelParams& before, const ModelParams& after, const Corpus& corpus,
              const std::vector<std::size_t>& targets) {
    if (targets.empty()) fail(ErrorKind::config, "usr: no targets");
    const auto prompts = canonical_prompts(corpus, targets);
    const Tensor pb = last_token_distributions(before, nullptr, prompts);
    const Tensor pa = last_token_distributions(after, nullptr, prompts);
    std::vector<TargetRow> rows;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const Fact& f = corpus.facts.at(targets[i]);
        TargetRow row;
        row.fact_id = f.id;
        row.answer = f.answer;
        row.before = argmax_row(pb, i);
        row.after = argmax_row(pa, i);
        row.p_before = pb.at(i, f.answer);
        row.p_after = pa.at(i, f.answer);
        row.excluded = row.before != f.answer;
        rows.push_back(row);
    }
    return usr_from_rows(std::move(rows));
}

GurResult gur_from_rows(std::vector<RetainRow> rows) {
    GurResult g;
    std::size_t nb = 0;
    std::size_t na = 0;
    for (const auto& r : rows) {
        nb += r.correct_before ? 1 : 0;
        na += r.correct_after ? 1 : 0;
    }
    g.before = pct(nb, rows.size());
    g.after = pct(na, rows.size());
    g.drop = g.before - g.after;
    g.rows = std::move(rows);
    return g;
}

GurResult gur(const ModelParams& after, const Corpus& corpus, const std::vector<std::size_t>& retain,
              const ModelParams& before) {
    if (retain.empty()) fail(ErrorKind::config, "gur: empty retain set");
    const auto prompts = canonical_prompts(corpus, retain);
    const auto ab = greedy_answers(before, nullptr, prompts);
    const auto aa = greedy_answers(after, nullptr, prompts);
    std::vector<RetainRow> rows;
    for (std::size_t i = 0; i < retain.size(); ++i) {
        const std::size_t ans = corpus.facts.at(retain[i]).answer;
        rows.push_back({retain[i], ab[i] == ans, aa[i] == ans});
    }
    return gur_from_rows(std::move(rows));
}

RapResult rap(const ModelParams& before, const ModelParams& after, const Corpus& corpus,
              const std::vector<std::size_t>& targets, const RapConfig& cfg) {
    if (targets.empty()) fail(ErrorKind::config, "rap: no targets");
    if (cfg.views == 0) fail(ErrorKind::config, "rap: need at least one paraphrase");
    std::set<std::string> wrt;
    for (std::size_t l = 0; l < after.config.n_layers; ++l) {
        for (const auto& p : cfg.projections) wrt.insert(weight_name(l, p));
    }
    const auto prompts = canonical_prompts(corpus, targets);
    const auto original = greedy_answers(before, nullptr, prompts);

    RapResult res;
    std::size_t recovered = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const Fact& f = corpus.facts.at(targets[i]);
        RapRow row;
        row.fact_id = f.id;
        row.original = original[i];
        row.excluded = original[i] != f.answer;
        ModelParams m = after;
        if (!row.excluded && cfg.steps > 0) {
            const ParaphraseSet ps = generate_paraphrases(corpus, f, cfg.views + 1, cfg.seed);
            const std::vector<Tokens> batch(ps.prompts.begin() + 1, ps.prompts.end());
            Tensor labels({batch.size(), after.config.vocab_size});
            for (std::size_t b = 0; b < batch.size(); ++b) labels.at(b, f.answer) = 1.0F;
            const LmGraph g = build_lm_graph(after.config, nullptr, batch, &labels);
            try {
                for (std::size_t s = 0; s < cfg.steps && !row.diverged; ++s) {
                    const Evaluation ev = forward_eval(g.tape, bind_model(m, nullptr));
                    if (!std::isfinite(ev.scalar(g.loss))) {
                        row.diverged = true;
                        break;
                    }
                    const TensorMap grads = backward_grad(g.tape, ev, g.loss, &wrt);
                    sgd_step(m.tensors, grads, cfg.lr);
                    for (const auto& name : wrt) {
                        if (!m.tensors.at(name).all_finite()) row.diverged = true;
                    }
                }
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::numerical) throw;
                row.diverged = true;
            }
        }
        if (!row.excluded) {
            if (row.diverged) {
                ++res.diverged;
                row.recovered = true;  // worst case
            } else {
                const std::vector<Tokens> one{f.prompt};
                row.attacked = greedy_answers(m, nullptr, one)[0];
                row.recovered = row.attacked == row.original;
            }
            ++res.counted;
            recovered += row.recovered ? 1 : 0;
        }
        res.rows.push_back(row);
    }
    res.percent = pct(recovered, res.counted);
    return res;
}

double distribution_cosine(std::span<const float> p, std::span<const float> q) {
    if (p.size() != q.size()) fail(ErrorKind::shape, "cosine: size mismatch");
    double pq = 0.0, pp = 0.0, qq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        pq += static_cast<double>(p[i]) * q[i];
        pp += static_cast<double>(p[i]) * p[i];
        qq += static_cast<double>(q[i]) * q[i];
    }
    if (pp == 0.0 || qq == 0.0) fail(ErrorKind::numerical, "cosine: zero vector");
    return std::clamp(pq / std::sqrt(pp * qq), -1.0, 1.0);
}

double total_variation(std::span<const float> p, std::span<const float> q) {
    if (p.size() != q.size()) fail(ErrorKind::shape, "total_variation: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(static_cast<double>(p[i]) - q[i]);
    return std::clamp(0.5 * s, 0.0, 1.0);
}

MiaResult mia(const ModelParams& before, const ModelParams& after, const std::vector<Tokens>& probes) {
    if (probes.empty()) fail(ErrorKind::config, "mia: no probes");
    const Tensor pb = last_token_distributions(before, nullptr, probes);
    const Tensor pa = last_token_distributions(after, nullptr, probes);
    const std::size_t v = pb.cols();
    MiaResult r;
    for (std::size_t i = 0; i < probes.size(); ++i) {
        const auto a = pb.data().subspan(i * v, v);
        const auto b = pa.data().subspan(i * v, v);
        r.probe_cosine.push_back(distribution_cosine(a, b));
        r.probe_tv.push_back(total_variation(a, b));
    }
    const auto n = static_cast<double>(probes.size());
    for (std::size_t i = 0; i < probes.size(); ++i) {
        r.cosine += r.probe_cosine[i];
        r.tv += r.probe_tv[i];
    }
    r.cosine /= n;
    r.tv /= n;
    return r;
}

std::vector<Tokens> mia_probes(const Corpus& corpus, std::size_t limit) {
    std::vector<Tokens> out;
    for (auto& ex : paraphrase_pool(corpus, corpus.retain, 0)) out.push_back(std::move(ex.prompt));
    if (out.size() > limit) {
        // spread the probes over all retain facts instead of taking a prefix
        std::vector<Tokens> spread;
        for (std::size_t i = 0; i < limit; ++i) spread.push_back(out[i * out.size() / limit]);
        out = std::move(spread);
    }
    return out;
}

std::string report_json(const MetricsReport& r) {
    json j;
    j["method"] = r.method;
    j["manifest_hash"] = r.manifest_hash;
    j["usr"] = r.usr.percent;
    j["usr_counted"] = r.usr.counted;
    j["usr_excluded"] = r.usr.excluded;
    j["gur"] = r.gur.after;
    j["gur_before"] = r.gur.before;
    j["gur_drop"] = r.gur.drop;
    j["rap"] = r.rap.percent;
    j["rap_counted"] = r.rap.counted;
    j["rap_diverged"] = r.rap.diverged;
    j["mia_cosine"] = r.mia.cosine;
    j["mia_tv"] = r.mia.tv;
    j["mia_probes"] = r.mia.probe_cosine.size();
    return j.dump(2) + "\n";
}

std::string report_csv(const MetricsReport& r) {
    std::ostringstream s;
    s.precision(9);
    // before/after hold greedy answers for targets and correctness for retain
    // facts; probes carry cosine and TV in the probability columns.
    s << "kind,item,answer,before,after,p_before,p_after,excluded,flipped_or_correct,recovered\n";
    std::map<std::size_t, const RapRow*> rap_by_fact;
    for (const auto& row : r.rap.rows) rap_by_fact[row.fact_id] = &row;
    for (const auto& t : r.usr.rows) {
        auto it = rap_by_fact.find(t.fact_id);
        const std::string rec = it == rap_by_fact.end() ? "" : (it->second->recovered ? "1" : "0");
        s << "target," << t.fact_id << ',' << t.answer << ',' << t.before << ',' << t.after << ',' << t.p_before << ','
          << t.p_after << ',' << t.excluded << ',' << t.flipped << ',' << rec << '\n';
    }
    for (const auto& g : r.gur.rows) {
        s << "retain," << g.fact_id << ",," << g.correct_before << ',' << g.correct_after << ",,,0," << g.correct_after << ",\n";
    }
    for (std::size_t i = 0; i < r.mia.probe_cosine.size(); ++i) {
        s << "probe," << i << ",,,," << r.mia.probe_cosine[i] << ',' << r.mia.probe_tv[i] << ",0,,\n";
    }
    return s.str();
}

Prop1Audit finalize_audit(std::vector<Prop1Sample> samples, std::size_t shared_layers) {
    Prop1Audit a;
    a.shared_layers = shared_layers;
    const auto n = static_cast<double>(samples.size());
    for (const auto& s : samples) {
        if (!(s.lhs >= 0.0 && s.term_a >= 0.0 && s.term_a_pro >= 0.0 && s.term_c >= 0.0)) {
            fail(ErrorKind::numerical, "audit: negative or non-finite norm at sample " + std::to_string(s.index));
        }
        a.e_lhs += s.lhs / n;
        a.e_term_a += s.term_a / n;
        a.e_term_a_pro += s.term_a_pro / n;
        a.e_term_c += s.term_c / n;
        if (s.lhs > s.term_a + s.term_c + kAuditTolerance) ++a.triangle_violations;
    }
    a.dis_hat = std::max(0.0, a.e_term_a - a.e_term_a_pro);
    a.bound_satisfied = !samples.empty() && a.e_lhs <= a.e_term_a_pro + a.dis_hat + a.e_term_c + kAuditTolerance;
    a.samples = std::move(samples);
    return a;
}

Prop1Audit audit_prop1(const DecoderParams& dec, const ModelParams& proxy, const AdapterSet& proxy_adapters,
                       const ModelParams& target, const AdapterSet& target_adapters,
                       const std::vector<AuditSample>& samples, const Tensor& y) {
    if (proxy.config.d_model != target.config.d_model || proxy.config.vocab_size != target.config.vocab_size) {
        fail(ErrorKind::incompatible, "audit: proxy and target differ in d_model or vocabulary");
    }
    const std::string spec_pro = adapter_spec(proxy_adapters, proxy.config.d_model, 0);
    const std::string spec_tar = adapter_spec(target_adapters, target.config.d_model, 0);
    if (spec_pro != spec_tar) fail(ErrorKind::incompatible, "audit: proxy and target adapter layouts differ");
    if (samples.empty()) fail(ErrorKind::config, "audit: no samples");
    std::vector<std::string> projections;
    for (const auto& [p, net] : dec.nets) projections.push_back(p);
    const std::size_t shared = std::min(proxy.config.n_layers, target.config.n_layers);

    std::vector<Prop1Sample> rows;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Tokens& x = samples[i].prompt;
        const auto dec_tar = shared_part(decode(dec, lora_gradient(target, target_adapters, x, y)), shared);
        const auto dec_pro = shared_part(decode(dec, lora_gradient(proxy, proxy_adapters, x, y)), shared);
        const auto full_tar = shared_part(full_gradient(target, projections, x, y), shared);
        const auto full_pro = shared_part(full_gradient(proxy, projections, x, y), shared);
        Prop1Sample s;
        s.index = i;
        s.source = samples[i].source;
        s.lhs = dist(dec_tar, full_tar);
        s.term_a = dist(dec_tar, full_pro);
        s.term_a_pro = dist(dec_pro, full_pro);
        s.term_c = dist(full_pro, full_tar);
        rows.push_back(s);
    }
    return finalize_audit(std::move(rows), shared);
}

std::string audit_json(const Prop1Audit& a) {
    json j;
    j["shared_layers"] = a.shared_layers;
    j["e_lhs"] = a.e_lhs;
    j["e_term_a_pro"] = a.e_term_a_pro;
    j["e_term_a"] = a.e_term_a;
    j["dis_hat"] = a.dis_hat;
    j["e_term_c"] = a.e_term_c;
    j["triangle_violations"] = a.triangle_violations;
    j["bound_satisfied"] = a.bound_satisfied;
    json rows = json::array();
    for (const auto& s : a.samples) {
        rows.push_back({{"index", s.index},
                        {"source", s.source},
                        {"lhs", s.lhs},
                        {"term_a", s.term_a},
                        {"term_a_pro", s.term_a_pro},
                        {"term_c", s.term_c}});
    }
    j["samples"] = rows;
    return j.dump(2) + "\n";
}

std::string audit_csv(const Prop1Audit& a) {
    std::ostringstream s;
    s.precision(17);
    s << "index,source,lhs,term_a,term_a_pro,term_c\n";
    for (const auto& r : a.samples) {
        s << r.index << ',' << r.source << ',' << r.lhs << ',' << r.term_a << ',' << r.term_a_pro << ',' << r.term_c << '\n';
    }
    return s.str();
}

Prop1Audit audit_from_json(const std::string& text) {
    std::vector<Prop1Sample> rows;
    std::size_t shared = 0;
    json j;
    try {
        j = json::parse(text);
        shared = j.at("shared_layers").get<std::size_t>();
        for (const auto& r : j.at("samples")) {
            rows.push_back({r.at("index").get<std::size_t>(), r.at("source").get<std::string>(), r.at("lhs").get<double>(),
                            r.at("term_a").get<double>(), r.at("term_a_pro").get<double>(), r.at("term_c").get<double>()});
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::io, std::string("audit file: ") + e.what());
    }
    Prop1Audit a = finalize_audit(std::move(rows), shared);
    if (a.triangle_violations > 0) fail(ErrorKind::numerical, "audit file: triangle inequality violated");
    if (j.at("bound_satisfied").get<bool>() != a.bound_satisfied) {
        fail(ErrorKind::numerical, "audit file: stored bound flag disagrees with the samples");
    }
    return a;
}

}  // namespace r2f
