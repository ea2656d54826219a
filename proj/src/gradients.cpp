// SPDX-License-Identifier: Apache-2.0

#include "r2f/gradients.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "r2f/error.hpp"
#include "r2f/random.hpp"

namespace r2f {

namespace {

void append(std::vector<float>& out, const Tensor& t) { out.insert(out.end(), t.data().begin(), t.data().end()); }

void take(const Tensor& flat, std::size_t& pos, Tensor& into) {
    if (pos + into.size() > flat.size()) fail(ErrorKind::shape, "unflatten: flat tensor too short");
    std::copy_n(flat.data().begin() + static_cast<std::ptrdiff_t>(pos), into.size(), into.data().begin());
    pos += into.size();
}

Tensor to_flat(std::vector<float> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
}

// Target row [1, V] from a distribution y.
Tensor target_row(const ModelParams& params, const Tensor& y) {
    check_distribution(y, params.config.vocab_size);
    return Tensor({1, y.size()}, y.vec());
}

void check_finite(const Tensor& t, const std::string& what) {
    if (!t.all_finite()) fail(ErrorKind::numerical, "non-finite gradient in " + what);
}

}  // namespace

Tensor LoraGradient::flatten() const {
    std::vector<float> out;
    for (const auto& e : entries) {
        append(out, e.grad_A);
        append(out, e.grad_B);
    }
    return to_flat(std::move(out));
}

LoraGradient LoraGradient::unflatten(const LoraGradient& like, const Tensor& flat) {
    LoraGradient g = like;
    std::size_t pos = 0;
    for (auto& e : g.entries) {
        take(flat, pos, e.grad_A);
        take(flat, pos, e.grad_B);
    }
    if (pos != flat.size()) fail(ErrorKind::shape, "unflatten: flat tensor too long");
    return g;
}

Tensor FullGradient::flatten() const {
    std::vector<float> out;
    for (const auto& e : entries) append(out, e.grad_W);
    return to_flat(std::move(out));
}

FullGradient FullGradient::unflatten(const FullGradient& like, const Tensor& flat) {
    FullGradient g = like;
    std::size_t pos = 0;
    for (auto& e : g.entries) take(flat, pos, e.grad_W);
    if (pos != flat.size()) fail(ErrorKind::shape, "unflatten: flat tensor too long");
    return g;
}

LoraGradient lora_gradient(const ModelParams& params, const AdapterSet& adapters, const Tokens& x, const Tensor& y) {
    if (adapters.empty()) fail(ErrorKind::config, "lora_gradient: no adapters attached");
    const Tensor targets = target_row(params, y);
    const std::vector<Tokens> batch{x};
    const LmGraph g = build_lm_graph(params.config, &adapters, batch, &targets);
    std::set<std::string> wrt;
    for (const auto& a : adapters) {
        wrt.insert(a.a_name());
        wrt.insert(a.b_name());
    }
    TensorMap grads = backward_grad(g.tape, forward_eval(g.tape, bind_model(params, &adapters)), g.loss, &wrt);
    LoraGradient out;
    for (const auto& a : adapters) {
        LoraGradEntry e{a.layer, a.projection, std::move(grads.at(a.a_name())), std::move(grads.at(a.b_name()))};
        check_finite(e.grad_A, "lora A " + weight_name(a.layer, a.projection));
        check_finite(e.grad_B, "lora B " + weight_name(a.layer, a.projection));
        out.entries.push_back(std::move(e));
    }
    return out;
}

FullGradient full_gradient(const ModelParams& params, const std::vector<std::string>& projections, const Tokens& x,
                           const Tensor& y) {
    std::vector<std::string> projs = projections;
    std::sort(projs.begin(), projs.end());
    if (projs.empty()) fail(ErrorKind::config, "full_gradient: no projections");
    const Tensor targets = target_row(params, y);
    const std::vector<Tokens> batch{x};
    const LmGraph g = build_lm_graph(params.config, nullptr, batch, &targets);
    std::set<std::string> wrt;
    for (std::size_t l = 0; l < params.config.n_layers; ++l)
        for (const auto& p : projs) wrt.insert(weight_name(l, p));
    TensorMap grads = backward_grad(g.tape, forward_eval(g.tape, bind_model(params, nullptr)), g.loss, &wrt);
    FullGradient out;
    for (std::size_t l = 0; l < params.config.n_layers; ++l) {
        for (const auto& p : projs) {
            FullGradEntry e{l, p, std::move(grads.at(weight_name(l, p)))};
            check_finite(e.grad_W, weight_name(l, p));
            out.entries.push_back(std::move(e));
        }
    }
    return out;
}

GradientPair gradient_pair(const ModelParams& params, const AdapterSet& adapters, const Tokens& x, const Tensor& y,
                           std::uint64_t example_id) {
    if (adapters.empty()) fail(ErrorKind::config, "gradient_pair: no adapters attached");
    const Tensor targets = target_row(params, y);
    const std::vector<Tokens> batch{x};
    const LmGraph g = build_lm_graph(params.config, &adapters, batch, &targets);
    std::set<std::string> wrt;
    for (const auto& a : adapters) {
        wrt.insert(a.a_name());
        wrt.insert(a.b_name());
        wrt.insert(weight_name(a.layer, a.projection));
    }
    TensorMap grads = backward_grad(g.tape, forward_eval(g.tape, bind_model(params, &adapters)), g.loss, &wrt);
    GradientPair out;
    out.example_id = example_id;
    for (const auto& a : adapters) {
        const std::string w = weight_name(a.layer, a.projection);
        out.lora.entries.push_back({a.layer, a.projection, std::move(grads.at(a.a_name())), std::move(grads.at(a.b_name()))});
        out.full.entries.push_back({a.layer, a.projection, std::move(grads.at(w))});
        const std::string tag = "example " + std::to_string(example_id) + " " + w;
        check_finite(out.lora.entries.back().grad_A, tag);
        check_finite(out.lora.entries.back().grad_B, tag);
        check_finite(out.full.entries.back().grad_W, tag);
    }
    return out;
}

LoraGradient average_views(const std::vector<LoraGradient>& grads) {
    if (grads.empty()) fail(ErrorKind::config, "average_views: empty list");
    const LoraGradient& first = grads.front();
    for (const auto& g : grads) {
        if (g.entries.size() != first.entries.size()) fail(ErrorKind::shape, "average_views: entry count mismatch");
        for (std::size_t i = 0; i < g.entries.size(); ++i) {
            if (g.entries[i].grad_A.shape() != first.entries[i].grad_A.shape() ||
                g.entries[i].grad_B.shape() != first.entries[i].grad_B.shape() ||
                g.entries[i].layer != first.entries[i].layer || g.entries[i].projection != first.entries[i].projection) {
                fail(ErrorKind::shape, "average_views: layout mismatch at entry " + std::to_string(i));
            }
        }
    }
    const std::size_t n = first.flatten().size();
    std::vector<double> acc(n, 0.0);
    for (const auto& g : grads) {
        const Tensor f = g.flatten();
        for (std::size_t i = 0; i < n; ++i) acc[i] += f[i];
    }
    Tensor mean({n});
    const auto k = static_cast<double>(grads.size());
    for (std::size_t i = 0; i < n; ++i) mean[i] = static_cast<float>(acc[i] / k);
    LoraGradient out = LoraGradient::unflatten(first, mean);
    out.views = grads.size();
    return out;
}

std::string adapter_spec(const AdapterSet& adapters, std::size_t d_model, std::uint64_t seed) {
    if (adapters.empty()) fail(ErrorKind::config, "adapter_spec: no adapters");
    std::set<std::string> projs;
    for (const auto& a : adapters) projs.insert(a.projection);
    std::ostringstream s;
    s << "d_model=" << d_model << ";rank=" << adapters.front().rank() << ";proj=";
    bool first = true;
    for (const auto& p : projs) {
        s << (first ? "" : ",") << p;
        first = false;
    }
    s << ";a_seed=" << seed;
    return s.str();
}

std::string model_config_hash(const ModelConfig& c) {
    std::ostringstream s;
    s << "vocab_size=" << c.vocab_size << ";d_model=" << c.d_model << ";n_layers=" << c.n_layers
      << ";n_heads=" << c.n_heads << ";seq_len=" << c.seq_len;
    return checksum_hex(s.str());
}

GradientPairDataset collect_pairs(const ModelParams& proxy, const AdapterSet& adapters, std::uint64_t adapter_seed,
                                  const std::vector<PairExample>& examples, std::size_t limit) {
    if (limit > examples.size()) {
        fail(ErrorKind::config, "collect_pairs: limit " + std::to_string(limit) + " exceeds " +
                                    std::to_string(examples.size()) + " examples");
    }
    if (adapters.empty()) fail(ErrorKind::config, "collect_pairs: no adapters attached");
    GradientPairDataset ds;
    ds.model_hash = model_config_hash(proxy.config);
    ds.adapter_spec = adapter_spec(adapters, proxy.config.d_model, adapter_seed);
    ds.source = role_name(proxy.config.role);
    ds.n_layers = proxy.config.n_layers;
    ds.d_model = proxy.config.d_model;
    ds.rank = adapters.front().rank();
    std::set<std::string> projs;
    for (const auto& a : adapters) projs.insert(a.projection);
    ds.projections.assign(projs.begin(), projs.end());
    if (adapters.size() != ds.n_layers * ds.projections.size()) {
        fail(ErrorKind::config, "collect_pairs: adapters must cover every layer");
    }

    std::vector<float> lora;
    std::vector<float> full;
    lora.reserve(limit * ds.lora_width());
    full.reserve(limit * ds.full_width());
    for (std::size_t i = 0; i < limit; ++i) {
        const PairExample& ex = examples[i];
        GradientPair p;
        try {
            p = gradient_pair(proxy, adapters, ex.x, ex.y, ex.id);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::numerical) throw;
            fail(ErrorKind::numerical, "collect_pairs: example " + std::to_string(ex.id) + ": " + e.what());
        }
        append(lora, p.lora.flatten());
        append(full, p.full.flatten());
        ds.example_ids.push_back(ex.id);
    }
    ds.lora = Tensor({limit, ds.lora_width()}, std::move(lora));
    ds.full = Tensor({limit, ds.full_width()}, std::move(full));
    return ds;
}

Container dataset_to_container(const GradientPairDataset& ds) {
    Container c;
    c.meta["kind"] = "gradient-pairs";
    c.meta["model_hash"] = ds.model_hash;
    c.meta["adapter_spec"] = ds.adapter_spec;
    c.meta["source"] = ds.source;
    c.meta["flatten_version"] = std::to_string(ds.flatten_version);
    c.meta["flatten_order"] = "layer asc, projection asc, A then B, row-major";
    c.meta["n_layers"] = std::to_string(ds.n_layers);
    c.meta["d_model"] = std::to_string(ds.d_model);
    c.meta["rank"] = std::to_string(ds.rank);
    std::string projs;
    for (const auto& p : ds.projections) projs += (projs.empty() ? "" : ",") + p;
    c.meta["projections"] = projs;
    c.meta["count"] = std::to_string(ds.size());
    std::string ids;
    for (auto id : ds.example_ids) ids += (ids.empty() ? "" : ",") + std::to_string(id);
    c.meta["example_ids"] = ids;
    c.tensors["lora"] = ds.lora;
    c.tensors["full"] = ds.full;
    return c;
}

GradientPairDataset dataset_from_container(const Container& c) {
    if (c.get("kind") != "gradient-pairs") fail(ErrorKind::incompatible, "not a gradient-pair dataset");
    GradientPairDataset ds;
    try {
        ds.model_hash = c.get("model_hash");
        ds.adapter_spec = c.get("adapter_spec");
        ds.source = c.get("source");
        ds.flatten_version = std::stoi(c.get("flatten_version"));
        ds.n_layers = std::stoul(c.get("n_layers"));
        ds.d_model = std::stoul(c.get("d_model"));
        ds.rank = std::stoul(c.get("rank"));
        std::stringstream ps(c.get("projections"));
        for (std::string p; std::getline(ps, p, ',');) ds.projections.push_back(p);
        std::stringstream is(c.get("example_ids"));
        for (std::string id; std::getline(is, id, ',');) ds.example_ids.push_back(std::stoull(id));
    } catch (const std::logic_error& e) {
        fail(ErrorKind::io, std::string("dataset header: ") + e.what());
    }
    if (ds.flatten_version != kFlattenVersion) {
        fail(ErrorKind::incompatible, "dataset flattening version " + std::to_string(ds.flatten_version));
    }
    ds.lora = c.tensors.at("lora");
    ds.full = c.tensors.at("full");
    const std::size_t n = ds.size();
    if (std::to_string(n) != c.get("count") || ds.lora.shape() != Shape{n, ds.lora_width()} ||
        ds.full.shape() != Shape{n, ds.full_width()}) {
        fail(ErrorKind::io, "dataset: tensor shapes do not match header");
    }
    return ds;
}

}  // namespace r2f
