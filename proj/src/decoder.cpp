// SPDX-License-Identifier: Apache-2.0

#include "r2f/decoder.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "r2f/error.hpp"
#include "r2f/optim.hpp"
#include "r2f/random.hpp"

namespace r2f {

namespace {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;
using Vec = Eigen::Matrix<float, 1, Eigen::Dynamic>;

auto idx(std::size_t n) { return static_cast<Eigen::Index>(n); }

CMatMap as_mat(const Tensor& t) { return {t.data().data(), idx(t.rows()), idx(t.cols())}; }
MatMap as_mat(Tensor& t) { return {t.data().data(), idx(t.rows()), idx(t.cols())}; }
Eigen::Map<const Vec> as_row(const Tensor& t) { return {t.data().data(), idx(t.size())}; }
Eigen::Map<Vec> as_row(Tensor& t) { return {t.data().data(), idx(t.size())}; }

std::size_t projection_index(const GradientPairDataset& ds, const std::string& proj) {
    auto it = std::find(ds.projections.begin(), ds.projections.end(), proj);
    if (it == ds.projections.end()) fail(ErrorKind::incompatible, "decoder: dataset has no projection '" + proj + "'");
    return static_cast<std::size_t>(it - ds.projections.begin());
}

std::size_t entry_width(const GradientPairDataset& ds) { return 2 * ds.d_model * ds.rank; }

void check_dataset(const DecoderParams& dec, const GradientPairDataset& ds) {
    if (ds.flatten_version != dec.flatten_version) fail(ErrorKind::incompatible, "decoder: flattening version mismatch");
    check_decoder_compatible(dec, ds.adapter_spec, ds.d_model);
    if (ds.rank != dec.rank) fail(ErrorKind::incompatible, "decoder: rank mismatch");
    for (const auto& p : ds.projections) {
        if (!dec.nets.count(p)) fail(ErrorKind::incompatible, "decoder: no net for projection '" + p + "'");
    }
}

/// Unscaled network inputs and raw targets for one projection, one row per
/// (pair, layer) in pair-major order.
struct Rows {
    Mat x;  // [rows, 2dr] lora slice
    Mat y;  // [rows, d^2] full slice
    std::vector<std::size_t> layer;
};

Rows gather_rows(const GradientPairDataset& ds, const std::string& proj, const std::vector<std::size_t>& pairs) {
    const std::size_t pi = projection_index(ds, proj);
    const std::size_t P = ds.projections.size();
    const std::size_t in_w = entry_width(ds);
    const std::size_t out_w = ds.d_model * ds.d_model;
    Rows r;
    const std::size_t n = pairs.size() * ds.n_layers;
    r.x.resize(idx(n), idx(in_w));
    r.y.resize(idx(n), idx(out_w));
    r.layer.resize(n);
    const CMatMap lora = as_mat(ds.lora);
    const CMatMap full = as_mat(ds.full);
    std::size_t row = 0;
    for (auto p : pairs) {
        for (std::size_t l = 0; l < ds.n_layers; ++l, ++row) {
            const std::size_t e = l * P + pi;
            r.x.row(idx(row)) = lora.block(idx(p), idx(e * in_w), 1, idx(in_w));
            r.y.row(idx(row)) = full.block(idx(p), idx(e * out_w), 1, idx(out_w));
            r.layer[row] = l;
        }
    }
    return r;
}

/// Network input: scaled gradient columns then the layer one-hot.
Mat net_input(const DecoderNet& net, std::size_t one_hot_width, const Mat& x, const std::vector<std::size_t>& layer) {
    Mat in = Mat::Zero(x.rows(), x.cols() + idx(one_hot_width));
    in.leftCols(x.cols()) = x / static_cast<float>(net.in_scale);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const std::size_t l = layer[static_cast<std::size_t>(i)];
        if (l < one_hot_width) in(i, x.cols() + idx(l)) = 1.0F;
    }
    return in;
}

/// Summed into an aligned temporary: Eigen's partial reductions peel by the
/// destination's alignment, which would make the result depend on where the
/// heap put the Tensor.
Vec column_sums(const Mat& m) {
    Vec s = m.colwise().sum();
    return s;
}

struct Activations {
    Mat h1, h2, out;
};

Activations forward(const DecoderNet& net, const Mat& in) {
    Activations a;
    a.h1.noalias() = in * as_mat(net.w1);
    a.h1.rowwise() += as_row(net.b1);
    a.h1 = a.h1.array().tanh();
    a.h2.noalias() = a.h1 * as_mat(net.w2);
    a.h2.rowwise() += as_row(net.b2);
    a.h2 = a.h2.array().tanh();
    a.out.noalias() = a.h2 * as_mat(net.w3);
    if (net.ws.size() > 0) a.out.noalias() += in * as_mat(net.ws);
    a.out.rowwise() += as_row(net.b3);
    return a;
}

/// Decoded gradients (raw units) for a block of rows.
Mat decode_rows(const DecoderNet& net, std::size_t one_hot_width, const Mat& x, const std::vector<std::size_t>& layer) {
    Mat out = forward(net, net_input(net, one_hot_width, x, layer)).out;
    out *= static_cast<float>(net.out_scale);
    return out;
}

/// Sum over rows of squared error in raw units, evaluated in chunks.
double sum_sq_error(const DecoderNet& net, std::size_t one_hot_width, const Rows& r) {
    constexpr Eigen::Index kChunk = 256;
    double total = 0.0;
    for (Eigen::Index lo = 0; lo < r.x.rows(); lo += kChunk) {
        const Eigen::Index n = std::min(kChunk, r.x.rows() - lo);
        const std::vector<std::size_t> layers(r.layer.begin() + lo, r.layer.begin() + lo + n);
        const Mat d = decode_rows(net, one_hot_width, r.x.middleRows(lo, n), layers) - r.y.middleRows(lo, n);
        total += d.cast<double>().squaredNorm();
    }
    return total;
}

DecoderParams make_layout(const GradientPairDataset& pairs, const DecoderHyper& hyper) {
    if (pairs.rank == 0 || pairs.d_model == 0 || pairs.n_layers == 0 || pairs.projections.empty()) {
        fail(ErrorKind::config, "decoder: dataset header is incomplete");
    }
    if (hyper.max_hidden == 0) fail(ErrorKind::config, "decoder: max_hidden must be positive");
    DecoderParams d;
    d.model_hash = pairs.model_hash;
    d.adapter_spec = pairs.adapter_spec;
    d.flatten_version = pairs.flatten_version;
    d.d_model = pairs.d_model;
    d.rank = pairs.rank;
    d.n_layers = pairs.n_layers;
    d.hidden = std::min(4 * d.input_width(), hyper.max_hidden);
    d.linear_skip = hyper.linear_skip;
    d.seed = hyper.seed;
    return d;
}

DecoderNet shaped_net(const DecoderParams& d) {
    const std::size_t in = d.input_width();
    const std::size_t h = d.hidden;
    const std::size_t out = d.output_width();
    return DecoderNet{Tensor({in, h}), Tensor({h}), Tensor({h, h}), Tensor({h}), Tensor({h, out}), Tensor({out}),
                      d.linear_skip ? Tensor({in, out}) : Tensor({0}), 1.0, 1.0};
}

std::vector<std::pair<const char*, Tensor DecoderNet::*>> net_fields(bool skip) {
    std::vector<std::pair<const char*, Tensor DecoderNet::*>> f{{"b1", &DecoderNet::b1}, {"b2", &DecoderNet::b2},
                                                                {"b3", &DecoderNet::b3}, {"w1", &DecoderNet::w1},
                                                                {"w2", &DecoderNet::w2}, {"w3", &DecoderNet::w3}};
    if (skip) f.emplace_back("ws", &DecoderNet::ws);
    return f;
}

/// Moves the net's tensors into a name map and back, so the optimizer can
/// step them in place without copies.
TensorMap take_tensors(DecoderNet& n, bool skip) {
    TensorMap m;
    for (auto [name, field] : net_fields(skip)) m.emplace(name, std::move(n.*field));
    return m;
}

void put_tensors(DecoderNet& n, TensorMap& m, bool skip) {
    for (auto [name, field] : net_fields(skip)) n.*field = std::move(m.at(name));
}

std::vector<std::size_t> all_rows(const GradientPairDataset& ds) {
    std::vector<std::size_t> ids(ds.size());
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
}

}  // namespace

std::size_t DecoderParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, net] : nets) {
        n += net.w1.size() + net.b1.size() + net.w2.size() + net.b2.size() + net.w3.size() + net.b3.size() + net.ws.size();
    }
    return n;
}

DecoderParams init_decoder(const GradientPairDataset& pairs, const DecoderHyper& hyper) {
    DecoderParams d = make_layout(pairs, hyper);
    for (const auto& proj : pairs.projections) {
        DecoderNet net = shaped_net(d);
        for (auto [w, tag] : {std::pair{&net.w1, "w1"}, std::pair{&net.w2, "w2"}, std::pair{&net.w3, "w3"}}) {
            Rng rng(derive_seed(hyper.seed, "decoder." + proj + "." + tag));
            fill_normal(*w, rng, static_cast<float>(1.0 / std::sqrt(static_cast<double>(w->rows()))));
        }
        d.nets.emplace(proj, std::move(net));
    }
    return d;
}

DecoderParams zero_decoder(const GradientPairDataset& pairs, const DecoderHyper& hyper) {
    DecoderParams d = make_layout(pairs, hyper);
    for (const auto& proj : pairs.projections) d.nets.emplace(proj, shaped_net(d));
    return d;
}

void check_decoder_compatible(const DecoderParams& dec, const std::string& adapter_spec, std::size_t d_model) {
    if (dec.d_model != d_model) {
        fail(ErrorKind::incompatible, "decoder: trained for d_model " + std::to_string(dec.d_model) + ", model has " +
                                          std::to_string(d_model));
    }
    if (dec.adapter_spec != adapter_spec) {
        fail(ErrorKind::incompatible, "decoder: adapter spec '" + dec.adapter_spec + "' does not match '" + adapter_spec + "'");
    }
}

FullGradient decode(const DecoderParams& dec, const LoraGradient& lora) {
    FullGradient out;
    const std::size_t d = dec.d_model;
    const std::size_t in_w = 2 * d * dec.rank;
    for (const auto& e : lora.entries) {
        auto it = dec.nets.find(e.projection);
        if (it == dec.nets.end()) fail(ErrorKind::incompatible, "decode: no net for projection '" + e.projection + "'");
        if (e.grad_A.shape() != Shape{d, dec.rank} || e.grad_B.shape() != Shape{dec.rank, d}) {
            fail(ErrorKind::shape, "decode: adapter gradient shape does not match the decoder");
        }
        Mat x(1, idx(in_w));
        std::copy(e.grad_A.data().begin(), e.grad_A.data().end(), x.data());
        std::copy(e.grad_B.data().begin(), e.grad_B.data().end(), x.data() + e.grad_A.size());
        const Mat y = decode_rows(it->second, dec.n_layers, x, {e.layer});
        Tensor g({d, d});
        std::copy(y.data(), y.data() + y.size(), g.data().begin());
        if (!g.all_finite()) fail(ErrorKind::numerical, "decode: non-finite output for " + weight_name(e.layer, e.projection));
        out.entries.push_back({e.layer, e.projection, std::move(g)});
    }
    return out;
}

GradientPairDataset subset(const GradientPairDataset& ds, const std::vector<std::size_t>& ids) {
    GradientPairDataset out = ds;
    const std::size_t lw = ds.lora.size() / std::max<std::size_t>(ds.size(), 1);
    const std::size_t fw = ds.full.size() / std::max<std::size_t>(ds.size(), 1);
    std::vector<float> lora;
    std::vector<float> full;
    lora.reserve(ids.size() * lw);
    full.reserve(ids.size() * fw);
    out.example_ids.clear();
    for (auto i : ids) {
        if (i >= ds.size()) fail(ErrorKind::shape, "subset: row out of range");
        out.example_ids.push_back(ds.example_ids[i]);
        const auto l = ds.lora.data().subspan(i * lw, lw);
        const auto f = ds.full.data().subspan(i * fw, fw);
        lora.insert(lora.end(), l.begin(), l.end());
        full.insert(full.end(), f.begin(), f.end());
    }
    out.lora = Tensor({ids.size(), lw}, std::move(lora));
    out.full = Tensor({ids.size(), fw}, std::move(full));
    return out;
}

double decoder_mse(const DecoderParams& dec, const GradientPairDataset& pairs) {
    if (pairs.size() == 0) fail(ErrorKind::shape, "decoder_mse: empty dataset");
    check_dataset(dec, pairs);
    const auto ids = all_rows(pairs);
    double total = 0.0;
    for (const auto& proj : pairs.projections) total += sum_sq_error(dec.nets.at(proj), dec.n_layers, gather_rows(pairs, proj, ids));
    return total / static_cast<double>(pairs.size());
}

ReconstructionStats reconstruction_quality(const DecoderParams& dec, const GradientPairDataset& pairs) {
    if (pairs.size() == 0) fail(ErrorKind::shape, "reconstruction_quality: empty dataset");
    check_dataset(dec, pairs);
    const auto ids = all_rows(pairs);
    const std::size_t n = pairs.size();
    std::vector<double> dot_sum(n, 0.0), dec_sq(n, 0.0), true_sq(n, 0.0);
    for (const auto& proj : pairs.projections) {
        const Rows r = gather_rows(pairs, proj, ids);
        const Mat y = decode_rows(dec.nets.at(proj), dec.n_layers, r.x, r.layer);
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            const std::size_t p = static_cast<std::size_t>(i) / pairs.n_layers;
            dot_sum[p] += y.row(i).cast<double>().dot(r.y.row(i).cast<double>());
            dec_sq[p] += y.row(i).cast<double>().squaredNorm();
            true_sq[p] += r.y.row(i).cast<double>().squaredNorm();
        }
    }
    ReconstructionStats s;
    std::vector<double> cos;
    for (std::size_t p = 0; p < n; ++p) {
        const double tn = std::sqrt(true_sq[p]);
        const double dn = std::sqrt(dec_sq[p]);
        if (tn < 1e-8) {
            ++s.degenerate_target;
        } else if (dn < 1e-8) {
            ++s.degenerate_output;
        } else {
            cos.push_back(dot_sum[p] / (tn * dn));
        }
    }
    s.counted = cos.size();
    if (cos.empty()) {
        s.mean = s.median = s.min = std::nan("");
        return s;
    }
    s.mean = std::accumulate(cos.begin(), cos.end(), 0.0) / static_cast<double>(cos.size());
    s.min = *std::min_element(cos.begin(), cos.end());
    std::vector<double> sorted = cos;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t m = sorted.size() / 2;
    s.median = sorted.size() % 2 == 1 ? sorted[m] : 0.5 * (sorted[m - 1] + sorted[m]);
    return s;
}

TrainedDecoder train_decoder(const GradientPairDataset& pairs, const DecoderHyper& hyper) {
    if (pairs.size() < 50) fail(ErrorKind::config, "train_decoder: need at least 50 pairs, got " + std::to_string(pairs.size()));
    if (!(hyper.holdout > 0.0 && hyper.holdout <= 0.5)) fail(ErrorKind::config, "train_decoder: holdout must be in (0, 0.5]");
    if (hyper.batch == 0) fail(ErrorKind::config, "train_decoder: batch must be positive");

    std::vector<std::size_t> order = all_rows(pairs);
    Rng split_rng(derive_seed(hyper.seed, "decoder.split"));
    std::shuffle(order.begin(), order.end(), split_rng);
    const auto n_hold = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(hyper.holdout * static_cast<double>(pairs.size()))));
    const std::vector<std::size_t> hold_ids(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
    std::vector<std::size_t> train_ids(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
    std::sort(train_ids.begin(), train_ids.end());

    TrainedDecoder result{init_decoder(pairs, hyper), {}};
    DecoderParams& dec = result.params;
    TrainReport& rep = result.report;
    rep.train_pairs = train_ids.size();
    rep.holdout_pairs = hold_ids.size();

    struct State {
        std::string proj;
        Rows train;
        Rows hold;
        Mat in;  // network inputs of the training rows
        Mat target;  // normalized training targets
        Adam opt{AdamConfig{}};
        Rng rng;
    };
    std::vector<State> states;
    for (const auto& proj : pairs.projections) {
        State st{proj, gather_rows(pairs, proj, train_ids), gather_rows(pairs, proj, hold_ids), {}, {}, Adam(AdamConfig{hyper.lr}),
                 Rng(derive_seed(hyper.seed, "decoder.shuffle." + proj))};
        DecoderNet& net = dec.nets.at(proj);
        double norm_sum = 0.0;
        for (Eigen::Index i = 0; i < st.train.x.rows(); ++i) norm_sum += st.train.x.row(i).cast<double>().norm();
        const double s = norm_sum / static_cast<double>(st.train.x.rows());
        const double t = std::sqrt(st.train.y.cast<double>().squaredNorm() / static_cast<double>(st.train.y.size()));
        net.in_scale = s > 0.0 ? s : 1.0;
        net.out_scale = t > 0.0 ? t : 1.0;
        st.in = net_input(net, dec.n_layers, st.train.x, st.train.layer);
        st.target = st.train.y / static_cast<float>(net.out_scale);
        states.push_back(std::move(st));
    }

    auto holdout_mse = [&] {
        double total = 0.0;
        for (const auto& st : states) total += sum_sq_error(dec.nets.at(st.proj), dec.n_layers, st.hold);
        return total / static_cast<double>(hold_ids.size());
    };

    rep.initial_holdout_mse = holdout_mse();
    rep.selected_holdout_mse = rep.initial_holdout_mse;
    DecoderParams best = dec;
    std::size_t since_best = 0;

    for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
        double train_sum = 0.0;
        for (auto& st : states) {
            DecoderNet& net = dec.nets.at(st.proj);
            const auto n_rows = static_cast<std::size_t>(st.in.rows());
            std::vector<std::size_t> perm(n_rows);
            std::iota(perm.begin(), perm.end(), 0);
            std::shuffle(perm.begin(), perm.end(), st.rng);
            for (std::size_t lo = 0; lo < n_rows; lo += hyper.batch) {
                const std::size_t b = std::min(hyper.batch, n_rows - lo);
                Mat x(idx(b), st.in.cols());
                Mat t(idx(b), st.target.cols());
                for (std::size_t i = 0; i < b; ++i) {
                    x.row(idx(i)) = st.in.row(idx(perm[lo + i]));
                    t.row(idx(i)) = st.target.row(idx(perm[lo + i]));
                }
                const Activations a = forward(net, x);
                // loss = mean over rows of the squared error
                Mat d_out = (a.out - t) * (2.0F / static_cast<float>(b));
                Tensor g1({net.w1.rows(), net.w1.cols()}), g2({net.w2.rows(), net.w2.cols()}), g3({net.w3.rows(), net.w3.cols()});
                Tensor gb1({net.b1.size()}), gb2({net.b2.size()}), gb3({net.b3.size()});
                as_mat(g3).noalias() = a.h2.transpose() * d_out;
                Tensor gs({0});
                if (dec.linear_skip) {
                    gs = Tensor({net.ws.rows(), net.ws.cols()});
                    as_mat(gs).noalias() = x.transpose() * d_out;
                }
                as_row(gb3) = column_sums(d_out);
                Mat d2 = (d_out * as_mat(net.w3).transpose()).array() * (1.0F - a.h2.array().square());
                as_mat(g2).noalias() = a.h1.transpose() * d2;
                as_row(gb2) = column_sums(d2);
                Mat d1 = (d2 * as_mat(net.w2).transpose()).array() * (1.0F - a.h1.array().square());
                as_mat(g1).noalias() = x.transpose() * d1;
                as_row(gb1) = column_sums(d1);
                TensorMap grads{{"b1", std::move(gb1)}, {"b2", std::move(gb2)}, {"b3", std::move(gb3)},
                                {"w1", std::move(g1)}, {"w2", std::move(g2)}, {"w3", std::move(g3)}};
                if (dec.linear_skip) grads.emplace("ws", std::move(gs));
                TensorMap params = take_tensors(net, dec.linear_skip);
                st.opt.step(params, grads);
                put_tensors(net, params, dec.linear_skip);
            }
            train_sum += sum_sq_error(net, dec.n_layers, st.train);
        }
        CurvePoint cp{epoch, train_sum / static_cast<double>(train_ids.size()), holdout_mse()};
        if (!std::isfinite(cp.train_mse) || !std::isfinite(cp.holdout_mse)) {
            fail(ErrorKind::numerical, "train_decoder: MSE became non-finite at epoch " + std::to_string(epoch));
        }
        rep.curve.push_back(cp);
        if (cp.holdout_mse < rep.selected_holdout_mse) {
            rep.selected_holdout_mse = cp.holdout_mse;
            rep.selected_epoch = epoch;
            best = dec;
            since_best = 0;
        } else if (++since_best >= hyper.patience) {
            break;
        }
    }
    dec = std::move(best);
    return result;
}

Container decoder_to_container(const DecoderParams& dec) {
    Container c;
    auto num = [](double v) {
        std::ostringstream s;
        s.precision(17);
        s << v;
        return s.str();
    };
    c.meta = {{"kind", "decoder"},
              {"model_hash", dec.model_hash},
              {"adapter_spec", dec.adapter_spec},
              {"flatten_version", std::to_string(dec.flatten_version)},
              {"d_model", std::to_string(dec.d_model)},
              {"rank", std::to_string(dec.rank)},
              {"n_layers", std::to_string(dec.n_layers)},
              {"hidden", std::to_string(dec.hidden)},
              {"linear_skip", dec.linear_skip ? "1" : "0"},
              {"seed", std::to_string(dec.seed)},
              {"parameter_count", std::to_string(dec.parameter_count())}};
    std::string projs;
    for (const auto& [proj, net] : dec.nets) {
        projs += (projs.empty() ? "" : ",") + proj;
        c.meta[proj + ".in_scale"] = num(net.in_scale);
        c.meta[proj + ".out_scale"] = num(net.out_scale);
        for (auto [name, field] : net_fields(dec.linear_skip)) c.tensors.emplace(proj + "." + name, net.*field);
    }
    c.meta["projections"] = projs;
    return c;
}

DecoderParams decoder_from_container(const Container& c) {
    if (c.get("kind") != "decoder") fail(ErrorKind::incompatible, "container holds '" + c.get("kind") + "', not a decoder");
    auto count = [&](const std::string& key) -> std::size_t {
        try {
            return static_cast<std::size_t>(std::stoull(c.get(key)));
        } catch (const std::logic_error&) {
            fail(ErrorKind::io, "decoder: bad integer metadata '" + key + "'");
        }
    };
    auto real = [&](const std::string& key) {
        try {
            return std::stod(c.get(key));
        } catch (const std::logic_error&) {
            fail(ErrorKind::io, "decoder: bad real metadata '" + key + "'");
        }
    };
    DecoderParams d;
    d.model_hash = c.get("model_hash");
    d.adapter_spec = c.get("adapter_spec");
    d.flatten_version = static_cast<int>(count("flatten_version"));
    d.d_model = count("d_model");
    d.rank = count("rank");
    d.n_layers = count("n_layers");
    d.hidden = count("hidden");
    d.linear_skip = count("linear_skip") != 0;
    d.seed = count("seed");
    std::stringstream ps(c.get("projections"));
    std::string proj;
    while (std::getline(ps, proj, ',')) {
        DecoderNet net = shaped_net(d);
        for (auto [name, field] : net_fields(d.linear_skip)) {
            auto it = c.tensors.find(proj + "." + name);
            if (it == c.tensors.end()) fail(ErrorKind::shape, "decoder: missing tensor " + proj + "." + name);
            if (it->second.shape() != (net.*field).shape()) fail(ErrorKind::shape, "decoder: bad shape for " + proj + "." + name);
            net.*field = it->second;
        }
        net.in_scale = real(proj + ".in_scale");
        net.out_scale = real(proj + ".out_scale");
        d.nets.emplace(proj, std::move(net));
    }
    if (d.nets.empty()) fail(ErrorKind::shape, "decoder: no projections");
    if (c.tensors.size() != net_fields(d.linear_skip).size() * d.nets.size()) fail(ErrorKind::shape, "decoder: unexpected extra tensors");
    return d;
}

}  // namespace r2f
