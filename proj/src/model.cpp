// SPDX-License-Identifier: Apache-2.0

#include "r2f/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "r2f/error.hpp"
#include "r2f/optim.hpp"
#include "r2f/random.hpp"

namespace r2f {

const char* role_name(ModelRole role) { return role == ModelRole::proxy ? "proxy" : "target"; }

ModelRole parse_role(std::string_view name) {
    if (name == "proxy") return ModelRole::proxy;
    if (name == "target") return ModelRole::target;
    fail(ErrorKind::config, "unknown model role '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
    if (vocab_size < 2 || d_model == 0 || n_layers == 0 || n_heads == 0 || seq_len == 0) {
        fail(ErrorKind::config, "model config: all dimensions must be positive (vocab_size >= 2)");
    }
    if (d_model % n_heads != 0) {
        fail(ErrorKind::config, "model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                    std::to_string(n_heads));
    }
}

std::size_t parameter_count(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    const std::size_t per_layer = 4 * d * d   // attention projections
                                  + 8 * d * d  // mlp w1 [d,4d] and w2 [4d,d]
                                  + 4 * d + d  // mlp biases
                                  + 4 * d;     // two layer norms
    return c.vocab_size * d + c.seq_len * d + c.n_layers * per_layer + 2 * d + d * c.vocab_size + c.vocab_size;
}

const std::vector<std::string>& projection_names() {
    static const std::vector<std::string> names{"wk", "wo", "wq", "wv"};
    return names;
}

std::string weight_name(std::size_t layer, std::string_view projection) {
    return "layer" + std::to_string(layer) + "." + std::string(projection);
}

namespace {

std::string lname(std::size_t layer, const char* suffix) { return "layer" + std::to_string(layer) + "." + suffix; }

// Every parameter tensor and its shape.
std::vector<std::pair<std::string, Shape>> param_layout(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    std::vector<std::pair<std::string, Shape>> out{
        {"tok_emb", {c.vocab_size, d}}, {"pos_emb", {c.seq_len, d}}, {"ln_f.g", {d}},
        {"ln_f.b", {d}},                {"head", {d, c.vocab_size}}, {"head.b", {c.vocab_size}},
    };
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (const auto& p : projection_names()) out.emplace_back(weight_name(l, p), Shape{d, d});
        out.emplace_back(lname(l, "ln1.g"), Shape{d});
        out.emplace_back(lname(l, "ln1.b"), Shape{d});
        out.emplace_back(lname(l, "ln2.g"), Shape{d});
        out.emplace_back(lname(l, "ln2.b"), Shape{d});
        out.emplace_back(lname(l, "mlp.w1"), Shape{d, 4 * d});
        out.emplace_back(lname(l, "mlp.b1"), Shape{4 * d});
        out.emplace_back(lname(l, "mlp.w2"), Shape{4 * d, d});
        out.emplace_back(lname(l, "mlp.b2"), Shape{d});
    }
    return out;
}

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

Tensor ModelParams::flatten() const {
    std::vector<float> flat;
    for (const auto& [name, t] : tensors) flat.insert(flat.end(), t.data().begin(), t.data().end());
    const std::size_t n = flat.size();
    return Tensor({n}, std::move(flat));
}

ModelParams ModelParams::unflatten(const ModelConfig& config, const Tensor& flat) {
    config.validate();
    if (flat.size() != parameter_count(config)) {
        fail(ErrorKind::shape, "unflatten: expected " + std::to_string(parameter_count(config)) + " values, got " +
                                   std::to_string(flat.size()));
    }
    ModelParams p{config, {}};
    for (auto& [name, shape] : param_layout(config)) p.tensors.emplace(name, Tensor(shape));
    std::size_t pos = 0;
    for (auto& [name, t] : p.tensors) {
        std::copy_n(flat.data().begin() + static_cast<std::ptrdiff_t>(pos), t.size(), t.data().begin());
        pos += t.size();
    }
    return p;
}

const Tensor& ModelParams::weight(std::size_t layer, std::string_view projection) const {
    auto it = tensors.find(weight_name(layer, projection));
    if (it == tensors.end()) fail(ErrorKind::shape, "no weight " + weight_name(layer, projection));
    return it->second;
}

Tensor& ModelParams::weight(std::size_t layer, std::string_view projection) {
    return const_cast<Tensor&>(std::as_const(*this).weight(layer, projection));
}

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams p{config, {}};
    for (auto& [name, shape] : param_layout(config)) {
        Tensor t(shape);
        if (ends_with(name, ".g")) {
            t.fill(1.0F);
        } else if (shape.size() == 2) {
            // Embeddings at 0.02, linear maps at 1/sqrt(fan_in).
            const bool emb = name == "tok_emb" || name == "pos_emb";
            const float stddev = emb ? 0.02F : 1.0F / std::sqrt(static_cast<float>(shape[0]));
            Rng rng(derive_seed(seed, name));
            fill_normal(t, rng, stddev);
        }
        p.tensors.emplace(name, std::move(t));
    }
    return p;
}

std::string LoraAdapter::a_name() const { return "lora." + weight_name(layer, projection) + ".A"; }
std::string LoraAdapter::b_name() const { return "lora." + weight_name(layer, projection) + ".B"; }

AdapterSet attach_lora(const ModelParams& params, std::size_t rank, const std::vector<std::string>& targets,
                       std::uint64_t seed) {
    const std::size_t d = params.config.d_model;
    if (rank == 0) fail(ErrorKind::config, "attach_lora: rank must be >= 1");
    if (rank * 4 > d) {
        fail(ErrorKind::config, "attach_lora: rank " + std::to_string(rank) + " exceeds d_model/4 = " +
                                    std::to_string(d / 4));
    }
    if (targets.empty()) fail(ErrorKind::config, "attach_lora: no target projections");
    std::vector<std::string> projs = targets;
    std::sort(projs.begin(), projs.end());
    if (std::adjacent_find(projs.begin(), projs.end()) != projs.end()) {
        fail(ErrorKind::config, "attach_lora: duplicate target projection");
    }
    for (const auto& p : projs) {
        if (std::find(projection_names().begin(), projection_names().end(), p) == projection_names().end()) {
            fail(ErrorKind::config, "attach_lora: unknown projection '" + p + "'");
        }
    }
    AdapterSet out;
    const float stddev = 1.0F / std::sqrt(static_cast<float>(rank));
    for (std::size_t l = 0; l < params.config.n_layers; ++l) {
        for (const auto& p : projs) {
            LoraAdapter a{l, p, Tensor({d, rank}), Tensor({rank, d})};
            Rng rng(derive_seed(seed, "lora." + p));
            fill_normal(a.A, rng, stddev);
            out.push_back(std::move(a));
        }
    }
    return out;
}

namespace {

// c += a * b for small row-major matrices, double accumulation.
void add_matmul(const Tensor& a, const Tensor& b, Tensor& c) {
    const std::size_t m = a.rows();
    const std::size_t k = a.cols();
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < k; ++t) s += static_cast<double>(a.at(i, t)) * b.at(t, j);
            c.at(i, j) += static_cast<float>(s);
        }
    }
}

}  // namespace

ModelParams merge_lora(const ModelParams& params, const AdapterSet& adapters) {
    ModelParams out = params;
    for (const auto& a : adapters) {
        Tensor& w = out.weight(a.layer, a.projection);
        if (a.A.shape() != Shape{w.rows(), a.rank()} || a.B.shape() != Shape{a.rank(), w.cols()}) {
            fail(ErrorKind::shape, "merge_lora: adapter shape mismatch for " + weight_name(a.layer, a.projection));
        }
        add_matmul(a.A, a.B, w);
    }
    return out;
}

Tensor flatten_adapters(const AdapterSet& adapters) {
    std::vector<float> flat;
    for (const auto& a : adapters) {
        flat.insert(flat.end(), a.A.data().begin(), a.A.data().end());
        flat.insert(flat.end(), a.B.data().begin(), a.B.data().end());
    }
    const std::size_t n = flat.size();
    return Tensor({n}, std::move(flat));
}

LmGraph build_lm_graph(const ModelConfig& c, const AdapterSet* adapters, std::span<const Tokens> batch,
                       const Tensor* targets) {
    c.validate();
    if (batch.empty()) fail(ErrorKind::shape, "forward: empty batch");
    LmGraph g;
    std::size_t block = 0;
    for (const auto& seq : batch) {
        if (seq.empty()) fail(ErrorKind::shape, "forward: empty token sequence");
        if (seq.size() > c.seq_len) {
            fail(ErrorKind::shape, "forward: sequence length " + std::to_string(seq.size()) + " exceeds seq_len " +
                                       std::to_string(c.seq_len));
        }
        for (auto t : seq) {
            if (t >= c.vocab_size) {
                fail(ErrorKind::shape, "forward: token " + std::to_string(t) + " out of vocab " +
                                           std::to_string(c.vocab_size));
            }
        }
        block = std::max(block, seq.size());
    }
    const std::size_t rows = batch.size() * block;
    std::vector<std::size_t> ids(rows, 0);
    std::vector<std::size_t> pos(rows);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        std::copy(batch[b].begin(), batch[b].end(), ids.begin() + static_cast<std::ptrdiff_t>(b * block));
        for (std::size_t i = 0; i < block; ++i) pos[b * block + i] = i;
        g.last_rows.push_back(b * block + batch[b].size() - 1);
        g.lengths.push_back(batch[b].size());
    }
    g.block = block;

    const std::size_t d = c.d_model;
    const std::size_t dh = d / c.n_heads;
    ComputeTape& t = g.tape;
    auto in = [&](const std::string& name, Shape shape) { return t.input(name, std::move(shape)); };
    auto proj = [&](std::size_t l, const std::string& p) {
        NodeId w = in(weight_name(l, p), {d, d});
        if (adapters != nullptr) {
            for (const auto& a : *adapters) {
                if (a.layer != l || a.projection != p) continue;
                const std::size_t r = a.rank();
                NodeId an = in(a.a_name(), {d, r});
                NodeId bn = in(a.b_name(), {r, d});
                w = t.add(w, t.matmul(an, bn));
            }
        }
        return w;
    };

    NodeId x = t.add(t.embedding(in("tok_emb", {c.vocab_size, d}), ids), t.embedding(in("pos_emb", {c.seq_len, d}), pos));
    const float att_scale = 1.0F / std::sqrt(static_cast<float>(dh));
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        NodeId h = t.layernorm(x, in(lname(l, "ln1.g"), {d}), in(lname(l, "ln1.b"), {d}));
        NodeId q = t.matmul(h, proj(l, "wq"));
        NodeId k = t.matmul(h, proj(l, "wk"));
        NodeId v = t.matmul(h, proj(l, "wv"));
        std::vector<NodeId> heads;
        for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
            NodeId qh = t.slice_cols(q, hh * dh, dh);
            NodeId kh = t.slice_cols(k, hh * dh, dh);
            NodeId vh = t.slice_cols(v, hh * dh, dh);
            NodeId s = t.scale(t.block_matmul_nt(qh, kh, block), att_scale);
            heads.push_back(t.block_matmul(t.softmax_rows(s, true), vh, block));
        }
        NodeId att = c.n_heads == 1 ? heads[0] : t.concat_cols(heads);
        x = t.add(x, t.matmul(att, proj(l, "wo")));
        NodeId h2 = t.layernorm(x, in(lname(l, "ln2.g"), {d}), in(lname(l, "ln2.b"), {d}));
        NodeId m = t.gelu(t.add_bias(t.matmul(h2, in(lname(l, "mlp.w1"), {d, 4 * d})), in(lname(l, "mlp.b1"), {4 * d})));
        m = t.add_bias(t.matmul(m, in(lname(l, "mlp.w2"), {4 * d, d})), in(lname(l, "mlp.b2"), {d}));
        x = t.add(x, m);
    }
    g.final_hidden = t.layernorm(x, in("ln_f.g", {d}), in("ln_f.b", {d}));
    g.logits = t.add_bias(t.matmul(g.final_hidden, in("head", {d, c.vocab_size})), in("head.b", {c.vocab_size}));
    if (targets != nullptr) {
        if (targets->shape() != Shape{batch.size(), c.vocab_size}) {
            fail(ErrorKind::shape, "forward: targets shape " + shape_str(targets->shape()));
        }
        g.loss = t.soft_cross_entropy(g.logits, *targets, g.last_rows);
        g.has_loss = true;
    }
    return g;
}

Bindings bind_model(const ModelParams& params, const AdapterSet* adapters) {
    Bindings b(params.tensors);
    if (adapters != nullptr) {
        for (const auto& a : *adapters) {
            b.bind(a.a_name(), a.A);
            b.bind(a.b_name(), a.B);
        }
    }
    return b;
}

namespace {

void softmax_into(std::span<const float> z, std::span<float> out) {
    double mx = -INFINITY;
    for (float v : z) mx = std::max(mx, static_cast<double>(v));
    double s = 0.0;
    for (float v : z) s += std::exp(static_cast<double>(v) - mx);
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = static_cast<float>(std::exp(static_cast<double>(z[i]) - mx) / s);
}

constexpr std::size_t kEvalBatch = 64;

}  // namespace

Tensor forward_lm(const ModelParams& params, const AdapterSet* adapters, const Tokens& tokens) {
    const std::vector<Tokens> batch{tokens};
    const LmGraph g = build_lm_graph(params.config, adapters, batch);
    const Evaluation ev = forward_eval(g.tape, bind_model(params, adapters));
    const Tensor& logits = ev.value(g.logits);
    const std::size_t v = params.config.vocab_size;
    Tensor out({tokens.size(), v});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        softmax_into(logits.data().subspan(i * v, v), out.data().subspan(i * v, v));
    }
    return out;
}

Tensor last_token_distributions(const ModelParams& params, const AdapterSet* adapters,
                                std::span<const Tokens> prompts) {
    const std::size_t v = params.config.vocab_size;
    Tensor out({prompts.size(), v});
    const Bindings bind = bind_model(params, adapters);
    for (std::size_t start = 0; start < prompts.size(); start += kEvalBatch) {
        auto chunk = prompts.subspan(start, std::min(kEvalBatch, prompts.size() - start));
        const LmGraph g = build_lm_graph(params.config, adapters, chunk);
        const Evaluation ev = forward_eval(g.tape, bind);
        const Tensor& logits = ev.value(g.logits);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            softmax_into(logits.data().subspan(g.last_rows[i] * v, v), out.data().subspan((start + i) * v, v));
        }
    }
    return out;
}

std::vector<std::size_t> greedy_answers(const ModelParams& params, const AdapterSet* adapters,
                                        std::span<const Tokens> prompts) {
    const Tensor dist = last_token_distributions(params, adapters, prompts);
    const std::size_t v = params.config.vocab_size;
    std::vector<std::size_t> out(prompts.size());
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        auto row = dist.data().subspan(i * v, v);
        out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

Tensor embed_prompt(const ModelParams& params, const AdapterSet* adapters, const Tokens& tokens) {
    const std::vector<Tokens> batch{tokens};
    const LmGraph g = build_lm_graph(params.config, adapters, batch);
    const Evaluation ev = forward_eval(g.tape, bind_model(params, adapters));
    const Tensor& h = ev.value(g.final_hidden);
    const std::size_t d = params.config.d_model;
    Tensor out({d});
    for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < tokens.size(); ++i) s += h.at(i, j);
        out[j] = static_cast<float>(s / static_cast<double>(tokens.size()));
    }
    return out;
}

void check_distribution(const Tensor& y, std::size_t vocab) {
    if (y.size() != vocab) {
        fail(ErrorKind::config, "target distribution has " + std::to_string(y.size()) + " entries, vocab is " +
                                    std::to_string(vocab));
    }
    double s = 0.0;
    for (float v : y.data()) {
        if (!(v >= 0.0F)) fail(ErrorKind::config, "target distribution has a negative or non-finite entry");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-5) fail(ErrorKind::config, "target distribution sums to " + std::to_string(s));
}

Tensor one_hot(std::size_t index, std::size_t size) {
    Tensor t({size});
    t[index] = 1.0F;
    return t;
}

double loss_ce(const ModelParams& params, const AdapterSet* adapters, const Tokens& x, const Tensor& y) {
    check_distribution(y, params.config.vocab_size);
    const std::vector<Tokens> batch{x};
    const Tensor targets({1, y.size()}, y.vec());
    const LmGraph g = build_lm_graph(params.config, adapters, batch, &targets);
    return forward_eval(g.tape, bind_model(params, adapters)).scalar(g.loss);
}

ModelParams pretrain(ModelParams params, std::span<const LmExample> examples, const PretrainConfig& hyper,
                     PretrainReport* report) {
    if (examples.empty()) fail(ErrorKind::config, "pretrain: no training examples");
    if (hyper.batch == 0) fail(ErrorKind::config, "pretrain: batch must be positive");
    const std::size_t v = params.config.vocab_size;
    Adam opt(AdamConfig{hyper.lr});
    Rng rng(derive_seed(hyper.seed, "pretrain"));
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    if (report != nullptr) report->loss.clear();
    std::vector<Tokens> batch;
    for (std::size_t step = 0; step < hyper.steps; ++step) {
        batch.clear();
        std::vector<std::size_t> answers;
        while (batch.size() < std::min(hyper.batch, examples.size())) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const LmExample& ex = examples[order[cursor++]];
            batch.push_back(ex.prompt);
            answers.push_back(ex.answer);
        }
        Tensor targets({batch.size(), v});
        for (std::size_t i = 0; i < answers.size(); ++i) targets.at(i, answers[i]) = 1.0F;
        const LmGraph g = build_lm_graph(params.config, nullptr, batch, &targets);
        double loss = 0.0;
        TensorMap grads;
        try {
            const Evaluation ev = forward_eval(g.tape, params.tensors);
            loss = ev.scalar(g.loss);
            grads = backward_grad(g.tape, ev, g.loss);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::numerical) throw;
            fail(ErrorKind::convergence, "pretrain diverged at step " + std::to_string(step) + ": " + e.what());
        }
        if (!std::isfinite(loss)) fail(ErrorKind::convergence, "pretrain: non-finite loss at step " + std::to_string(step));
        opt.step(params.tensors, grads);
        if (report != nullptr) report->loss.push_back(loss);
    }
    if (report != nullptr) report->accuracy = answer_accuracy(params, nullptr, examples);
    return params;
}

double answer_accuracy(const ModelParams& params, const AdapterSet* adapters, std::span<const LmExample> examples) {
    if (examples.empty()) return 0.0;
    std::vector<Tokens> prompts;
    prompts.reserve(examples.size());
    for (const auto& e : examples) prompts.push_back(e.prompt);
    const auto answers = greedy_answers(params, adapters, prompts);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < examples.size(); ++i) hit += answers[i] == examples[i].answer ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(examples.size());
}

}  // namespace r2f
