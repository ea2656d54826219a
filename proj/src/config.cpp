// SPDX-License-Identifier: Apache-2.0

#include "r2f/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>

#include "r2f/checkpoint.hpp"
#include "r2f/error.hpp"
#include "r2f/random.hpp"

namespace r2f {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& v, const char* what) {
    fail(ErrorKind::config, "config: " + key + " = '" + v + "' is not " + what);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(key, v, "a non-negative integer");
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty() || !std::isfinite(out)) bad_value(key, v, "a finite number");
    return out;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    bad_value(key, v, "true or false");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(v);
    while (std::getline(in, cur, ',')) out.push_back(trim(cur));
    if (!v.empty() && v.back() == ',') out.emplace_back();
    return out;
}

std::string fmt(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

std::string fmt(float v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

template <typename T>
std::string join(const std::vector<T>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        if constexpr (std::is_same_v<T, std::string>) {
            out += v[i];
        } else {
            out += std::to_string(v[i]);
        }
    }
    return out;
}

struct Field {
    std::string doc;
    std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename M>
Field size_field(M member, std::string doc) {
    return {std::move(doc), [member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = to_u64(k, v); },
            [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
}

template <typename M>
Field double_field(M member, std::string doc) {
    return {std::move(doc), [member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = to_double(k, v); },
            [member](const RunConfig& c) { return fmt(member(const_cast<RunConfig&>(c))); }};
}

template <typename M>
Field float_field(M member, std::string doc) {
    return {std::move(doc),
            [member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = static_cast<float>(to_double(k, v)); },
            [member](const RunConfig& c) { return fmt(member(const_cast<RunConfig&>(c))); }};
}

const std::map<std::string, Field>& fields() {
    // clang-format off
    static const std::map<std::string, Field> f{
        {"corpus.n_facts", size_field([](RunConfig& c) -> std::size_t& { return c.corpus.n_facts; }, "number of facts")},
        {"corpus.n_relations", size_field([](RunConfig& c) -> std::size_t& { return c.corpus.n_relations; }, "number of relations")},
        {"corpus.objects_per_relation", size_field([](RunConfig& c) -> std::size_t& { return c.corpus.objects_per_relation; }, "answer family size per relation")},
        {"corpus.target_fraction", double_field([](RunConfig& c) -> double& { return c.corpus.target_fraction; }, "share of facts in the target split")},
        {"corpus.seed", size_field([](RunConfig& c) -> std::uint64_t& { return c.corpus.seed; }, "corpus generation seed")},
        {"model.vocab_size", size_field([](RunConfig& c) -> std::size_t& { return c.vocab_size; }, "vocabulary size")},
        {"model.d_model", size_field([](RunConfig& c) -> std::size_t& { return c.d_model; }, "hidden width shared by proxy and target")},
        {"model.n_heads", size_field([](RunConfig& c) -> std::size_t& { return c.n_heads; }, "attention heads")},
        {"model.seq_len", size_field([](RunConfig& c) -> std::size_t& { return c.seq_len; }, "maximum prompt length")},
        {"model.proxy_layers", size_field([](RunConfig& c) -> std::size_t& { return c.proxy_layers; }, "proxy depth")},
        {"model.target_layers", size_field([](RunConfig& c) -> std::size_t& { return c.target_layers; }, "target depth")},
        {"pretrain.steps", size_field([](RunConfig& c) -> std::size_t& { return c.pretrain_steps; }, "optimizer steps per model")},
        {"pretrain.batch", size_field([](RunConfig& c) -> std::size_t& { return c.pretrain_batch; }, "minibatch size")},
        {"pretrain.lr", float_field([](RunConfig& c) -> float& { return c.pretrain_lr; }, "Adam learning rate")},
        {"pretrain.min_accuracy", double_field([](RunConfig& c) -> double& { return c.pretrain_min_accuracy; }, "fact accuracy gate")},
        {"adapter.rank", size_field([](RunConfig& c) -> std::size_t& { return c.rank; }, "LoRA rank")},
        {"adapter.projections", {"adapted projections, comma separated",
            [](RunConfig& c, const std::string&, const std::string& v) { c.projections = split_list(v); },
            [](const RunConfig& c) { return join(c.projections); }}},
        {"collect.pairs", size_field([](RunConfig& c) -> std::size_t& { return c.pairs; }, "proxy gradient pairs to collect")},
        {"decoder.epochs", size_field([](RunConfig& c) -> std::size_t& { return c.decoder.epochs; }, "maximum epochs")},
        {"decoder.batch", size_field([](RunConfig& c) -> std::size_t& { return c.decoder.batch; }, "minibatch rows")},
        {"decoder.lr", float_field([](RunConfig& c) -> float& { return c.decoder.lr; }, "Adam learning rate")},
        {"decoder.holdout", double_field([](RunConfig& c) -> double& { return c.decoder.holdout; }, "held-out share of pairs")},
        {"decoder.patience", size_field([](RunConfig& c) -> std::size_t& { return c.decoder.patience; }, "early-stopping patience in epochs")},
        {"decoder.max_hidden", size_field([](RunConfig& c) -> std::size_t& { return c.decoder.max_hidden; }, "hidden width cap")},
        {"decoder.linear_skip", {"add a linear input-to-output path",
            [](RunConfig& c, const std::string& k, const std::string& v) { c.decoder.linear_skip = to_bool(k, v); },
            [](const RunConfig& c) { return std::string(c.decoder.linear_skip ? "true" : "false"); }}},
        {"unlearn.method", {"r2f, full_grad, lora_single, lora_multi or grad_ascent",
            [](RunConfig& c, const std::string&, const std::string& v) { parse_method(v); c.method = v; },
            [](const RunConfig& c) { return c.method; }}},
        {"unlearn.views", size_field([](RunConfig& c) -> std::size_t& { return c.views; }, "paraphrase views per target")},
        {"unlearn.tau", double_field([](RunConfig& c) -> double& { return c.tau; }, "paraphrase similarity threshold")},
        {"unlearn.label", {"uniform or counterfactual:<word>",
            [](RunConfig& c, const std::string& k, const std::string& v) {
                if (v != "uniform" && (v.rfind("counterfactual:", 0) != 0 || v.size() == 15)) bad_value(k, v, "uniform or counterfactual:<word>");
                c.label = v; },
            [](const RunConfig& c) { return c.label; }}},
        {"unlearn.eta", double_field([](RunConfig& c) -> double& { return c.eta; }, "step size; negative selects it by sweep")},
        {"eta.lo", double_field([](RunConfig& c) -> double& { return c.eta_lo; }, "smallest swept step size")},
        {"eta.hi", double_field([](RunConfig& c) -> double& { return c.eta_hi; }, "largest swept step size")},
        {"eta.points", size_field([](RunConfig& c) -> std::size_t& { return c.eta_points; }, "log-spaced sweep points")},
        {"eta.gur_budget", double_field([](RunConfig& c) -> double& { return c.gur_budget; }, "allowed retain accuracy drop in points")},
        {"rap.steps", size_field([](RunConfig& c) -> std::size_t& { return c.rap.steps; }, "relearning attack steps")},
        {"rap.lr", float_field([](RunConfig& c) -> float& { return c.rap.lr; }, "relearning attack SGD rate")},
        {"rap.views", size_field([](RunConfig& c) -> std::size_t& { return c.rap.views; }, "attack paraphrases per target")},
        {"mia.probes", size_field([](RunConfig& c) -> std::size_t& { return c.mia_probes; }, "probe prompts")},
        {"audit.samples", size_field([](RunConfig& c) -> std::size_t& { return c.audit_samples; }, "prompts in the transfer audit")},
        {"sweep.ranks", {"rank grid",
            [](RunConfig& c, const std::string& k, const std::string& v) {
                c.sweep_ranks.clear();
                for (const auto& s : split_list(v)) c.sweep_ranks.push_back(to_u64(k, s)); },
            [](const RunConfig& c) { return join(c.sweep_ranks); }}},
        {"sweep.views", {"view-count grid",
            [](RunConfig& c, const std::string& k, const std::string& v) {
                c.sweep_views.clear();
                for (const auto& s : split_list(v)) c.sweep_views.push_back(to_u64(k, s)); },
            [](const RunConfig& c) { return join(c.sweep_views); }}},
        {"sweep.seeds", size_field([](RunConfig& c) -> std::size_t& { return c.sweep_seeds; }, "repetitions with shifted seeds")},
        {"seed.proxy", size_field([](RunConfig& c) -> std::uint64_t& { return c.seed_proxy; }, "proxy init and pretraining")},
        {"seed.target", size_field([](RunConfig& c) -> std::uint64_t& { return c.seed_target; }, "target init and pretraining")},
        {"seed.adapter", size_field([](RunConfig& c) -> std::uint64_t& { return c.seed_adapter; }, "LoRA A matrices")},
        {"seed.collect", size_field([](RunConfig& c) -> std::uint64_t& { return c.seed_collect; }, "proxy prompt pool order")},
        {"seed.decoder", size_field([](RunConfig& c) -> std::uint64_t& { return c.seed_decoder; }, "decoder init, split and batches")},
        {"seed.unlearn", size_field([](RunConfig& c) -> std::uint64_t& { return c.seed_unlearn; }, "paraphrase rotation")},
        {"seed.eval", size_field([](RunConfig& c) -> std::uint64_t& { return c.seed_eval; }, "relearning attack paraphrases")},
        {"run.out_dir", {"output directory",
            [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; },
            [](const RunConfig& c) { return c.out_dir; }}},
    };
    // clang-format on
    return f;
}

}  // namespace

ModelConfig RunConfig::model(ModelRole role) const {
    ModelConfig m;
    m.vocab_size = vocab_size;
    m.d_model = d_model;
    m.n_heads = n_heads;
    m.seq_len = seq_len;
    m.n_layers = role == ModelRole::proxy ? proxy_layers : target_layers;
    m.role = role;
    return m;
}

PretrainConfig RunConfig::pretrain(ModelRole role) const {
    return {pretrain_steps, pretrain_batch, pretrain_lr, role == ModelRole::proxy ? seed_proxy : seed_target};
}

void RunConfig::validate() const {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) fail(ErrorKind::config, "config: " + what);
    };
    need(d_model > 0 && n_heads > 0 && d_model % n_heads == 0, "model.d_model must be a positive multiple of model.n_heads");
    need(proxy_layers > 0 && target_layers > 0, "model layer counts must be positive");
    need(rank >= 1 && rank <= d_model / 4, "adapter.rank must be in [1, d_model/4]");
    need(!projections.empty(), "adapter.projections is empty");
    for (const auto& p : projections) {
        const auto& names = projection_names();
        need(std::find(names.begin(), names.end(), p) != names.end(), "unknown projection '" + p + "'");
    }
    need(std::is_sorted(projections.begin(), projections.end()) &&
             std::adjacent_find(projections.begin(), projections.end()) == projections.end(),
         "adapter.projections must be sorted and distinct");
    need(views >= 1, "unlearn.views must be at least 1");
    need(tau >= 0.0 && tau <= 1.0, "unlearn.tau must be in [0, 1]");
    need(eta_lo > 0.0 && eta_hi >= eta_lo && eta_points >= 1, "eta grid needs 0 < eta.lo <= eta.hi and eta.points >= 1");
    need(pretrain_min_accuracy >= 0.0 && pretrain_min_accuracy <= 1.0, "pretrain.min_accuracy must be in [0, 1]");
    need(!sweep_ranks.empty() && !sweep_views.empty() && sweep_seeds >= 1, "sweep grids must be nonempty");
    need(rap.views >= 1, "rap.views must be at least 1");
    need(!out_dir.empty(), "run.out_dir is empty");
}

RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::map<std::string, std::size_t> seen;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
        if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) fail(ErrorKind::config, "config line " + std::to_string(no) + ": expected key = value");
        const std::string key = trim(std::string_view(t).substr(0, eq));
        const std::string value = trim(std::string_view(t).substr(eq + 1));
        const auto it = fields().find(key);
        if (it == fields().end()) fail(ErrorKind::config, "config line " + std::to_string(no) + ": unknown key '" + key + "'");
        if (auto [s, fresh] = seen.emplace(key, no); !fresh) {
            fail(ErrorKind::config, "config line " + std::to_string(no) + ": '" + key + "' already set on line " + std::to_string(s->second));
        }
        it->second.set(cfg, key, value);
    }
    cfg.corpus.vocab_size = cfg.vocab_size;
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

std::string config_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& [key, f] : fields()) out += key + " = " + f.get(cfg) + "\n";
    return out;
}

std::string config_hash(const RunConfig& cfg) {
    RunConfig c = cfg;
    c.out_dir = "-";  // where a run is written does not change what it computes
    const std::string t = config_text(c);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(t.data(), t.size())));
    return buf;
}

RunConfig with_seed_offset(RunConfig cfg, std::int64_t offset) {
    for (std::uint64_t* s : {&cfg.seed_adapter, &cfg.seed_collect, &cfg.seed_decoder, &cfg.seed_unlearn, &cfg.seed_eval}) {
        *s = static_cast<std::uint64_t>(static_cast<std::int64_t>(*s) + offset);
    }
    return cfg;
}

std::vector<std::pair<std::string, std::string>> config_keys() {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [k, f] : fields()) out.emplace_back(k, f.doc);
    return out;
}

}  // namespace r2f
