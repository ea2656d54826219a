// SPDX-License-Identifier: Apache-2.0

#include "r2f/tape.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "r2f/error.hpp"

namespace r2f {

namespace {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapF = Eigen::Map<MatF>;
using CMapF = Eigen::Map<const MatF>;

constexpr float kLayerNormEps = 1e-5F;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

CMapF cmap(const Tensor& t) { return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())}; }
MapF map(Tensor& t) { return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())}; }

// c (+)= op(a) * op(b), products accumulated in double.
void gemm(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b, Tensor& c, bool accumulate) {
    const MatD ad = cmap(a).cast<double>();
    const MatD bd = cmap(b).cast<double>();
    MatD r;
    if (!trans_a && !trans_b) {
        r.noalias() = ad * bd;
    } else if (trans_a && !trans_b) {
        r.noalias() = ad.transpose() * bd;
    } else if (!trans_a && trans_b) {
        r.noalias() = ad * bd.transpose();
    } else {
        r.noalias() = ad.transpose() * bd.transpose();
    }
    auto out = map(c);
    if (accumulate) {
        out += r.cast<float>();
    } else {
        out = r.cast<float>();
    }
}

void accumulate(Tensor& dst, const Tensor& src) {
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    fail(ErrorKind::shape, std::string(op) + ": " + detail);
}

void require_matrix(const char* op, const Shape& s) {
    if (s.size() != 2) shape_error(op, "expected a matrix, got " + shape_str(s));
}

}  // namespace

const char* op_name(Op op) {
    switch (op) {
    case Op::input: return "input";
    case Op::constant: return "constant";
    case Op::matmul: return "matmul";
    case Op::transpose: return "transpose";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::add_bias: return "add_bias";
    case Op::gelu: return "gelu";
    case Op::tanh: return "tanh";
    case Op::softmax_rows: return "softmax_rows";
    case Op::block_matmul_nt: return "block_matmul_nt";
    case Op::block_matmul: return "block_matmul";
    case Op::layernorm: return "layernorm";
    case Op::embedding: return "embedding";
    case Op::slice_cols: return "slice_cols";
    case Op::concat_cols: return "concat_cols";
    case Op::soft_cross_entropy: return "soft_cross_entropy";
    case Op::sq_error_sum: return "sq_error_sum";
    case Op::sum: return "sum";
    }
    return "?";
}

// ----------------------------------------------------------------------------
// Tape construction (shape inference happens here)

NodeId ComputeTape::push(TapeNode node) {
    nodes_.push_back(std::move(node));
    return static_cast<NodeId>(nodes_.size() - 1);
}

void ComputeTape::check_id(NodeId id) const {
    if (id >= nodes_.size()) fail(ErrorKind::shape, "tape: node id " + std::to_string(id) + " out of range");
}

std::optional<NodeId> ComputeTape::find_input(const std::string& name) const {
    auto it = inputs_by_name_.find(name);
    if (it == inputs_by_name_.end()) return std::nullopt;
    return it->second;
}

NodeId ComputeTape::input(const std::string& name, Shape shape) {
    if (inputs_by_name_.contains(name)) fail(ErrorKind::shape, "tape: duplicate input '" + name + "'");
    TapeNode n;
    n.op = Op::input;
    n.shape = std::move(shape);
    n.name = name;
    auto id = push(std::move(n));
    input_ids_.push_back(id);
    inputs_by_name_[name] = id;
    return id;
}

NodeId ComputeTape::constant(Tensor value) {
    TapeNode n;
    n.op = Op::constant;
    n.shape = value.shape();
    n.aux = constants_.size();
    constants_.push_back(std::move(value));
    return push(std::move(n));
}

NodeId ComputeTape::matmul(NodeId a, NodeId b) {
    check_id(a);
    check_id(b);
    const auto& sa = shape(a);
    const auto& sb = shape(b);
    require_matrix("matmul", sa);
    require_matrix("matmul", sb);
    if (sa[1] != sb[0]) shape_error("matmul", shape_str(sa) + " x " + shape_str(sb));
    return push({Op::matmul, {a, b}, {sa[0], sb[1]}});
}

NodeId ComputeTape::transpose(NodeId a) {
    check_id(a);
    const auto& sa = shape(a);
    require_matrix("transpose", sa);
    return push({Op::transpose, {a}, {sa[1], sa[0]}});
}

NodeId ComputeTape::add(NodeId a, NodeId b) {
    check_id(a);
    check_id(b);
    if (shape(a) != shape(b)) shape_error("add", shape_str(shape(a)) + " vs " + shape_str(shape(b)));
    return push({Op::add, {a, b}, shape(a)});
}

NodeId ComputeTape::sub(NodeId a, NodeId b) {
    check_id(a);
    check_id(b);
    if (shape(a) != shape(b)) shape_error("sub", shape_str(shape(a)) + " vs " + shape_str(shape(b)));
    return push({Op::sub, {a, b}, shape(a)});
}

NodeId ComputeTape::mul(NodeId a, NodeId b) {
    check_id(a);
    check_id(b);
    if (shape(a) != shape(b)) shape_error("mul", shape_str(shape(a)) + " vs " + shape_str(shape(b)));
    return push({Op::mul, {a, b}, shape(a)});
}

NodeId ComputeTape::scale(NodeId a, float alpha) {
    check_id(a);
    TapeNode n{Op::scale, {a}, shape(a)};
    n.alpha = alpha;
    return push(std::move(n));
}

NodeId ComputeTape::add_bias(NodeId x, NodeId bias) {
    check_id(x);
    check_id(bias);
    const auto& sx = shape(x);
    const auto& sb = shape(bias);
    require_matrix("add_bias", sx);
    if (sb.size() != 1 || sb[0] != sx[1]) shape_error("add_bias", shape_str(sx) + " + " + shape_str(sb));
    return push({Op::add_bias, {x, bias}, sx});
}

NodeId ComputeTape::gelu(NodeId x) {
    check_id(x);
    return push({Op::gelu, {x}, shape(x)});
}

NodeId ComputeTape::tanh(NodeId x) {
    check_id(x);
    return push({Op::tanh, {x}, shape(x)});
}

NodeId ComputeTape::softmax_rows(NodeId x, bool causal) {
    check_id(x);
    require_matrix("softmax_rows", shape(x));
    TapeNode n{Op::softmax_rows, {x}, shape(x)};
    n.causal = causal;
    return push(std::move(n));
}

NodeId ComputeTape::block_matmul_nt(NodeId a, NodeId b, std::size_t block) {
    check_id(a);
    check_id(b);
    const auto& sa = shape(a);
    const auto& sb = shape(b);
    require_matrix("block_matmul_nt", sa);
    require_matrix("block_matmul_nt", sb);
    if (sa != sb || block == 0 || sa[0] % block != 0) {
        shape_error("block_matmul_nt", shape_str(sa) + " x " + shape_str(sb) + "^T, block " + std::to_string(block));
    }
    TapeNode n{Op::block_matmul_nt, {a, b}, {sa[0], block}};
    n.offset = block;
    return push(std::move(n));
}

NodeId ComputeTape::block_matmul(NodeId p, NodeId v, std::size_t block) {
    check_id(p);
    check_id(v);
    const auto& sp = shape(p);
    const auto& sv = shape(v);
    require_matrix("block_matmul", sp);
    require_matrix("block_matmul", sv);
    if (block == 0 || sp[1] != block || sp[0] != sv[0] || sp[0] % block != 0) {
        shape_error("block_matmul", shape_str(sp) + " x " + shape_str(sv) + ", block " + std::to_string(block));
    }
    TapeNode n{Op::block_matmul, {p, v}, {sp[0], sv[1]}};
    n.offset = block;
    return push(std::move(n));
}

NodeId ComputeTape::layernorm(NodeId x, NodeId gain, NodeId bias) {
    check_id(x);
    check_id(gain);
    check_id(bias);
    const auto& sx = shape(x);
    require_matrix("layernorm", sx);
    if (shape(gain) != Shape{sx[1]} || shape(bias) != Shape{sx[1]}) {
        shape_error("layernorm", "gain/bias must be [" + std::to_string(sx[1]) + "]");
    }
    return push({Op::layernorm, {x, gain, bias}, sx});
}

NodeId ComputeTape::embedding(NodeId table, std::vector<std::size_t> ids) {
    check_id(table);
    const auto& st = shape(table);
    require_matrix("embedding", st);
    for (auto id : ids) {
        if (id >= st[0]) shape_error("embedding", "index " + std::to_string(id) + " out of range " + shape_str(st));
    }
    TapeNode n{Op::embedding, {table}, {ids.size(), st[1]}};
    n.aux = index_lists_.size();
    index_lists_.push_back(std::move(ids));
    return push(std::move(n));
}

NodeId ComputeTape::slice_cols(NodeId x, std::size_t offset, std::size_t width) {
    check_id(x);
    const auto& sx = shape(x);
    require_matrix("slice_cols", sx);
    if (offset + width > sx[1] || width == 0) shape_error("slice_cols", "range out of bounds for " + shape_str(sx));
    TapeNode n{Op::slice_cols, {x}, {sx[0], width}};
    n.offset = offset;
    return push(std::move(n));
}

NodeId ComputeTape::concat_cols(const std::vector<NodeId>& parts) {
    if (parts.empty()) shape_error("concat_cols", "no inputs");
    std::size_t rows = 0;
    std::size_t total = 0;
    for (auto p : parts) {
        check_id(p);
        const auto& s = shape(p);
        require_matrix("concat_cols", s);
        if (total == 0) rows = s[0];
        if (s[0] != rows) shape_error("concat_cols", "row count mismatch");
        total += s[1];
    }
    return push({Op::concat_cols, parts, {rows, total}});
}

NodeId ComputeTape::soft_cross_entropy(NodeId logits, Tensor targets, std::vector<std::size_t> rows) {
    check_id(logits);
    const auto& sl = shape(logits);
    require_matrix("soft_cross_entropy", sl);
    if (rows.empty()) shape_error("soft_cross_entropy", "no rows selected");
    if (targets.rank() != 2 || targets.dim(0) != rows.size() || targets.dim(1) != sl[1]) {
        shape_error("soft_cross_entropy", "targets " + shape_str(targets.shape()) + " do not match " +
                                              std::to_string(rows.size()) + " rows of " + shape_str(sl));
    }
    for (auto r : rows) {
        if (r >= sl[0]) shape_error("soft_cross_entropy", "row index out of range");
    }
    TapeNode n{Op::soft_cross_entropy, {logits}, {}};
    n.aux = index_lists_.size();
    index_lists_.push_back(std::move(rows));
    n.offset = constants_.size();
    constants_.push_back(std::move(targets));
    return push(std::move(n));
}

NodeId ComputeTape::sq_error_sum(NodeId x, Tensor target) {
    check_id(x);
    if (target.shape() != shape(x)) shape_error("sq_error_sum", "target shape mismatch");
    TapeNode n{Op::sq_error_sum, {x}, {}};
    n.aux = constants_.size();
    constants_.push_back(std::move(target));
    return push(std::move(n));
}

NodeId ComputeTape::sum(NodeId x) {
    check_id(x);
    return push({Op::sum, {x}, {}});
}

// ----------------------------------------------------------------------------
// Forward

const Tensor& Evaluation::value(NodeId id) const {
    if (id >= owned_.size()) fail(ErrorKind::shape, "evaluation: node id out of range");
    if (bound_[id] != nullptr) return *bound_[id];
    return owned_[id];
}

double Evaluation::scalar(NodeId id) const {
    const Tensor& v = value(id);
    if (v.size() != 1) fail(ErrorKind::shape, "evaluation: scalar() on non-scalar node");
    if (!std::isnan(wide_[id])) return wide_[id];
    return v[0];
}

namespace {

// Softmax over columns [lo, hi); the rest of the row is zeroed.
void softmax_row(const float* in, float* out, std::size_t n, std::size_t lo, std::size_t hi) {
    double mx = -INFINITY;
    for (std::size_t j = lo; j < hi; ++j) mx = std::max(mx, static_cast<double>(in[j]));
    double denom = 0.0;
    for (std::size_t j = lo; j < hi; ++j) denom += std::exp(static_cast<double>(in[j]) - mx);
    for (std::size_t j = 0; j < n; ++j) {
        out[j] = (j >= lo && j < hi) ? static_cast<float>(std::exp(static_cast<double>(in[j]) - mx) / denom) : 0.0F;
    }
}

double log_sum_exp(const float* z, std::size_t n) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(z[j]));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(static_cast<double>(z[j]) - mx);
    return mx + std::log(s);
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_deriv(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

}  // namespace

Evaluation forward_eval(const ComputeTape& tape, const Bindings& inputs) {
    Evaluation ev;
    const std::size_t n_nodes = tape.size();
    ev.owned_.resize(n_nodes);
    ev.bound_.assign(n_nodes, nullptr);
    ev.wide_.assign(n_nodes, std::numeric_limits<double>::quiet_NaN());
    auto wide_in = [&](NodeId id) { return ev.scalar(id); };

    for (NodeId id = 0; id < n_nodes; ++id) {
        const TapeNode& node = tape.node(id);
        if (node.op == Op::input) {
            const Tensor* t = inputs.find(node.name);
            if (t == nullptr) fail(ErrorKind::shape, "forward_eval: input '" + node.name + "' is not bound");
            if (t->shape() != node.shape) {
                fail(ErrorKind::shape, "forward_eval: input '" + node.name + "' has shape " + shape_str(t->shape()) +
                                           ", tape expects " + shape_str(node.shape));
            }
            ev.bound_[id] = t;
            continue;
        }
        if (node.op == Op::constant) {
            ev.bound_[id] = &tape.constant_value(node.aux);
            continue;
        }

        Tensor out(node.shape);
        auto o = out.data();
        auto in = [&](std::size_t k) -> const Tensor& { return ev.value(node.inputs[k]); };

        switch (node.op) {
        case Op::matmul: gemm(in(0), false, in(1), false, out, false); break;
        case Op::block_matmul_nt: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            const std::size_t bs = node.offset;
            const std::size_t k = a.cols();
            for (std::size_t i = 0; i < a.rows(); ++i) {
                const std::size_t base = (i / bs) * bs;
                const float* ar = a.data().data() + i * k;
                for (std::size_t j = 0; j < bs; ++j) {
                    const float* br = b.data().data() + (base + j) * k;
                    double s = 0.0;
                    for (std::size_t t = 0; t < k; ++t) s += static_cast<double>(ar[t]) * br[t];
                    o[i * bs + j] = static_cast<float>(s);
                }
            }
            break;
        }
        case Op::block_matmul: {
            const Tensor& p = in(0);
            const Tensor& v = in(1);
            const std::size_t bs = node.offset;
            const std::size_t n = v.cols();
            std::vector<double> acc(n);
            for (std::size_t i = 0; i < p.rows(); ++i) {
                const std::size_t base = (i / bs) * bs;
                std::fill(acc.begin(), acc.end(), 0.0);
                for (std::size_t j = 0; j < bs; ++j) {
                    const double pij = p.data()[i * bs + j];
                    if (pij == 0.0) continue;
                    const float* vr = v.data().data() + (base + j) * n;
                    for (std::size_t c = 0; c < n; ++c) acc[c] += pij * vr[c];
                }
                for (std::size_t c = 0; c < n; ++c) o[i * n + c] = static_cast<float>(acc[c]);
            }
            break;
        }
        case Op::transpose: {
            const Tensor& a = in(0);
            const std::size_t m = a.rows();
            const std::size_t n = a.cols();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) o[j * m + i] = a.data()[i * n + j];
            break;
        }
        case Op::add: {
            auto a = in(0).data();
            auto b = in(1).data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
            if (o.size() == 1) ev.wide_[id] = wide_in(node.inputs[0]) + wide_in(node.inputs[1]);
            break;
        }
        case Op::sub: {
            auto a = in(0).data();
            auto b = in(1).data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
            if (o.size() == 1) ev.wide_[id] = wide_in(node.inputs[0]) - wide_in(node.inputs[1]);
            break;
        }
        case Op::mul: {
            auto a = in(0).data();
            auto b = in(1).data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
            break;
        }
        case Op::scale: {
            auto a = in(0).data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * node.alpha;
            if (o.size() == 1) ev.wide_[id] = wide_in(node.inputs[0]) * static_cast<double>(node.alpha);
            break;
        }
        case Op::add_bias: {
            auto x = in(0).data();
            auto b = in(1).data();
            const std::size_t n = b.size();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + b[i % n];
            break;
        }
        case Op::gelu: {
            auto x = in(0).data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<float>(gelu_value(x[i]));
            break;
        }
        case Op::tanh: {
            auto x = in(0).data();
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(x[i]);
            break;
        }
        case Op::softmax_rows: {
            const Tensor& x = in(0);
            const std::size_t m = x.rows();
            const std::size_t n = x.cols();
            for (std::size_t r = 0; r < m; ++r) {
                const std::size_t hi = node.causal ? (r % n) + 1 : n;
                softmax_row(x.data().data() + r * n, o.data() + r * n, n, 0, hi);
            }
            break;
        }
        case Op::layernorm: {
            const Tensor& x = in(0);
            auto g = in(1).data();
            auto b = in(2).data();
            const std::size_t m = x.rows();
            const std::size_t n = x.cols();
            for (std::size_t r = 0; r < m; ++r) {
                const float* xr = x.data().data() + r * n;
                double mean = 0.0;
                for (std::size_t j = 0; j < n; ++j) mean += xr[j];
                mean /= static_cast<double>(n);
                double var = 0.0;
                for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
                var /= static_cast<double>(n);
                const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                for (std::size_t j = 0; j < n; ++j) {
                    o[r * n + j] = static_cast<float>(g[j] * ((xr[j] - mean) * inv) + b[j]);
                }
            }
            break;
        }
        case Op::embedding: {
            const Tensor& table = in(0);
            const auto& ids = tape.index_list(node.aux);
            const std::size_t d = table.cols();
            for (std::size_t t = 0; t < ids.size(); ++t)
                for (std::size_t j = 0; j < d; ++j) o[t * d + j] = table.data()[ids[t] * d + j];
            break;
        }
        case Op::slice_cols: {
            const Tensor& x = in(0);
            const std::size_t m = x.rows();
            const std::size_t n = x.cols();
            const std::size_t w = node.shape[1];
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t j = 0; j < w; ++j) o[r * w + j] = x.data()[r * n + node.offset + j];
            break;
        }
        case Op::concat_cols: {
            const std::size_t m = node.shape[0];
            const std::size_t total = node.shape[1];
            std::size_t col = 0;
            for (std::size_t k = 0; k < node.inputs.size(); ++k) {
                const Tensor& p = in(k);
                const std::size_t w = p.cols();
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t j = 0; j < w; ++j) o[r * total + col + j] = p.data()[r * w + j];
                col += w;
            }
            break;
        }
        case Op::soft_cross_entropy: {
            const Tensor& z = in(0);
            const auto& rows = tape.index_list(node.aux);
            const Tensor& y = tape.constant_value(node.offset);
            const std::size_t v = z.cols();
            double total = 0.0;
            for (std::size_t k = 0; k < rows.size(); ++k) {
                const float* zr = z.data().data() + rows[k] * v;
                const float* yr = y.data().data() + k * v;
                const double lse = log_sum_exp(zr, v);
                for (std::size_t j = 0; j < v; ++j) {
                    if (yr[j] != 0.0F) total += static_cast<double>(yr[j]) * (lse - zr[j]);
                }
            }
            ev.wide_[id] = total / static_cast<double>(rows.size());
            o[0] = static_cast<float>(ev.wide_[id]);
            break;
        }
        case Op::sq_error_sum: {
            auto x = in(0).data();
            auto t = tape.constant_value(node.aux).data();
            double acc = 0.0;
            for (std::size_t i = 0; i < x.size(); ++i) {
                const double d = static_cast<double>(x[i]) - t[i];
                acc += d * d;
            }
            ev.wide_[id] = acc;
            o[0] = static_cast<float>(acc);
            break;
        }
        case Op::sum: {
            double acc = 0.0;
            for (float v : in(0).data()) acc += v;
            ev.wide_[id] = acc;
            o[0] = static_cast<float>(acc);
            break;
        }
        case Op::input:
        case Op::constant: break;
        }

        if (!out.all_finite()) {
            fail(ErrorKind::numerical,
                 std::string("forward_eval: non-finite value produced by ") + op_name(node.op) + " (node " +
                     std::to_string(id) + ")");
        }
        ev.owned_[id] = std::move(out);
    }
    return ev;
}

// ----------------------------------------------------------------------------
// Backward

TensorMap backward_grad(const ComputeTape& tape, const Evaluation& eval, NodeId loss,
                        const std::set<std::string>* wrt) {
    if (loss >= tape.size()) fail(ErrorKind::shape, "backward_grad: loss node is not part of the tape");
    if (shape_size(tape.shape(loss)) != 1) {
        fail(ErrorKind::shape, "backward_grad: loss must be scalar, got " + shape_str(tape.shape(loss)));
    }

    const std::size_t n_nodes = tape.size();
    std::vector<char> needs(n_nodes, 0);
    for (NodeId id = 0; id <= loss; ++id) {
        const TapeNode& node = tape.node(id);
        if (node.op == Op::input) {
            needs[id] = (wrt == nullptr || wrt->contains(node.name)) ? 1 : 0;
        } else {
            for (auto p : node.inputs) needs[id] = needs[id] || needs[p];
        }
    }

    std::vector<Tensor> grads(n_nodes);
    std::vector<char> has_grad(n_nodes, 0);
    auto grad_of = [&](NodeId id) -> Tensor& {
        if (!has_grad[id]) {
            grads[id] = Tensor(tape.shape(id));
            has_grad[id] = 1;
        }
        return grads[id];
    };
    if (needs[loss]) grad_of(loss).fill(1.0F);

    for (NodeId id = loss + 1; id-- > 0;) {
        if (!needs[id] || !has_grad[id]) continue;
        const TapeNode& node = tape.node(id);
        if (node.op == Op::input || node.op == Op::constant) continue;
        const Tensor& g = grads[id];
        auto gd = g.data();
        auto in = [&](std::size_t k) -> const Tensor& { return eval.value(node.inputs[k]); };
        auto need_in = [&](std::size_t k) { return needs[node.inputs[k]] != 0; };

        switch (node.op) {
        case Op::matmul: {
            if (need_in(0)) gemm(g, false, in(1), true, grad_of(node.inputs[0]), true);
            if (need_in(1)) gemm(in(0), true, g, false, grad_of(node.inputs[1]), true);
            break;
        }
        case Op::block_matmul_nt: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            const std::size_t bs = node.offset;
            const std::size_t k = a.cols();
            float* ga = need_in(0) ? grad_of(node.inputs[0]).data().data() : nullptr;
            float* gb = need_in(1) ? grad_of(node.inputs[1]).data().data() : nullptr;
            for (std::size_t i = 0; i < a.rows(); ++i) {
                const std::size_t base = (i / bs) * bs;
                const float* ar = a.data().data() + i * k;
                for (std::size_t j = 0; j < bs; ++j) {
                    const float gij = gd[i * bs + j];
                    if (gij == 0.0F) continue;
                    const float* br = b.data().data() + (base + j) * k;
                    if (ga != nullptr)
                        for (std::size_t t = 0; t < k; ++t) ga[i * k + t] += gij * br[t];
                    if (gb != nullptr)
                        for (std::size_t t = 0; t < k; ++t) gb[(base + j) * k + t] += gij * ar[t];
                }
            }
            break;
        }
        case Op::block_matmul: {
            const Tensor& p = in(0);
            const Tensor& v = in(1);
            const std::size_t bs = node.offset;
            const std::size_t n = v.cols();
            float* gp = need_in(0) ? grad_of(node.inputs[0]).data().data() : nullptr;
            float* gv = need_in(1) ? grad_of(node.inputs[1]).data().data() : nullptr;
            for (std::size_t i = 0; i < p.rows(); ++i) {
                const std::size_t base = (i / bs) * bs;
                const float* gr = gd.data() + i * n;
                for (std::size_t j = 0; j < bs; ++j) {
                    const float* vr = v.data().data() + (base + j) * n;
                    if (gp != nullptr) {
                        double s = 0.0;
                        for (std::size_t c = 0; c < n; ++c) s += static_cast<double>(gr[c]) * vr[c];
                        gp[i * bs + j] += static_cast<float>(s);
                    }
                    const float pij = p.data()[i * bs + j];
                    if (gv != nullptr && pij != 0.0F)
                        for (std::size_t c = 0; c < n; ++c) gv[(base + j) * n + c] += pij * gr[c];
                }
            }
            break;
        }
        case Op::transpose: {
            if (!need_in(0)) break;
            Tensor& ga = grad_of(node.inputs[0]);
            const std::size_t m = ga.rows();
            const std::size_t n = ga.cols();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga.data()[i * n + j] += gd[j * m + i];
            break;
        }
        case Op::add: {
            if (need_in(0)) accumulate(grad_of(node.inputs[0]), g);
            if (need_in(1)) accumulate(grad_of(node.inputs[1]), g);
            break;
        }
        case Op::sub: {
            if (need_in(0)) accumulate(grad_of(node.inputs[0]), g);
            if (need_in(1)) {
                auto gb = grad_of(node.inputs[1]).data();
                for (std::size_t i = 0; i < gd.size(); ++i) gb[i] -= gd[i];
            }
            break;
        }
        case Op::mul: {
            auto a = in(0).data();
            auto b = in(1).data();
            if (need_in(0)) {
                auto ga = grad_of(node.inputs[0]).data();
                for (std::size_t i = 0; i < gd.size(); ++i) ga[i] += gd[i] * b[i];
            }
            if (need_in(1)) {
                auto gb = grad_of(node.inputs[1]).data();
                for (std::size_t i = 0; i < gd.size(); ++i) gb[i] += gd[i] * a[i];
            }
            break;
        }
        case Op::scale: {
            auto ga = grad_of(node.inputs[0]).data();
            for (std::size_t i = 0; i < gd.size(); ++i) ga[i] += gd[i] * node.alpha;
            break;
        }
        case Op::add_bias: {
            if (need_in(0)) accumulate(grad_of(node.inputs[0]), g);
            if (need_in(1)) {
                auto gb = grad_of(node.inputs[1]).data();
                const std::size_t n = gb.size();
                const std::size_t m = gd.size() / n;
                for (std::size_t j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (std::size_t r = 0; r < m; ++r) acc += gd[r * n + j];
                    gb[j] += static_cast<float>(acc);
                }
            }
            break;
        }
        case Op::gelu: {
            auto x = in(0).data();
            auto ga = grad_of(node.inputs[0]).data();
            for (std::size_t i = 0; i < gd.size(); ++i) ga[i] += static_cast<float>(gd[i] * gelu_deriv(x[i]));
            break;
        }
        case Op::tanh: {
            auto y = eval.value(id).data();
            auto ga = grad_of(node.inputs[0]).data();
            for (std::size_t i = 0; i < gd.size(); ++i) ga[i] += gd[i] * (1.0F - y[i] * y[i]);
            break;
        }
        case Op::softmax_rows: {
            const Tensor& y = eval.value(id);
            auto ga = grad_of(node.inputs[0]).data();
            const std::size_t m = y.rows();
            const std::size_t n = y.cols();
            for (std::size_t r = 0; r < m; ++r) {
                const float* yr = y.data().data() + r * n;
                const float* gr = gd.data() + r * n;
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(yr[j]) * gr[j];
                for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += static_cast<float>(yr[j] * (gr[j] - s));
            }
            break;
        }
        case Op::layernorm: {
            const Tensor& x = in(0);
            auto gain = in(1).data();
            const std::size_t m = x.rows();
            const std::size_t n = x.cols();
            float* gx = need_in(0) ? grad_of(node.inputs[0]).data().data() : nullptr;
            float* gg = need_in(1) ? grad_of(node.inputs[1]).data().data() : nullptr;
            float* gb = need_in(2) ? grad_of(node.inputs[2]).data().data() : nullptr;
            std::vector<double> xhat(n);
            std::vector<double> dgain(n, 0.0);
            std::vector<double> dbias(n, 0.0);
            for (std::size_t r = 0; r < m; ++r) {
                const float* xr = x.data().data() + r * n;
                const float* gr = gd.data() + r * n;
                double mean = 0.0;
                for (std::size_t j = 0; j < n; ++j) mean += xr[j];
                mean /= static_cast<double>(n);
                double var = 0.0;
                for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
                var /= static_cast<double>(n);
                const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                double mean_dxhat = 0.0;
                double mean_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    xhat[j] = (xr[j] - mean) * inv;
                    const double dxh = static_cast<double>(gr[j]) * gain[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xhat[j];
                    dgain[j] += static_cast<double>(gr[j]) * xhat[j];
                    dbias[j] += gr[j];
                }
                mean_dxhat /= static_cast<double>(n);
                mean_dxhat_xhat /= static_cast<double>(n);
                if (gx != nullptr) {
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dxh = static_cast<double>(gr[j]) * gain[j];
                        gx[r * n + j] += static_cast<float>(inv * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat));
                    }
                }
            }
            for (std::size_t j = 0; j < n; ++j) {
                if (gg != nullptr) gg[j] += static_cast<float>(dgain[j]);
                if (gb != nullptr) gb[j] += static_cast<float>(dbias[j]);
            }
            break;
        }
        case Op::embedding: {
            auto gt = grad_of(node.inputs[0]).data();
            const auto& ids = tape.index_list(node.aux);
            const std::size_t d = node.shape[1];
            for (std::size_t t = 0; t < ids.size(); ++t)
                for (std::size_t j = 0; j < d; ++j) gt[ids[t] * d + j] += gd[t * d + j];
            break;
        }
        case Op::slice_cols: {
            Tensor& ga = grad_of(node.inputs[0]);
            const std::size_t n = ga.cols();
            const std::size_t m = ga.rows();
            const std::size_t w = node.shape[1];
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t j = 0; j < w; ++j) ga.data()[r * n + node.offset + j] += gd[r * w + j];
            break;
        }
        case Op::concat_cols: {
            const std::size_t m = node.shape[0];
            const std::size_t total = node.shape[1];
            std::size_t col = 0;
            for (std::size_t k = 0; k < node.inputs.size(); ++k) {
                const std::size_t w = tape.shape(node.inputs[k])[1];
                if (need_in(k)) {
                    auto gp = grad_of(node.inputs[k]).data();
                    for (std::size_t r = 0; r < m; ++r)
                        for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += gd[r * total + col + j];
                }
                col += w;
            }
            break;
        }
        case Op::soft_cross_entropy: {
            const Tensor& z = in(0);
            auto gz = grad_of(node.inputs[0]).data();
            const auto& rows = tape.index_list(node.aux);
            const Tensor& y = tape.constant_value(node.offset);
            const std::size_t v = z.cols();
            const double upstream = static_cast<double>(gd[0]) / static_cast<double>(rows.size());
            std::vector<float> p(v);
            for (std::size_t k = 0; k < rows.size(); ++k) {
                const float* zr = z.data().data() + rows[k] * v;
                const float* yr = y.data().data() + k * v;
                softmax_row(zr, p.data(), v, 0, v);
                double ysum = 0.0;
                for (std::size_t j = 0; j < v; ++j) ysum += yr[j];
                for (std::size_t j = 0; j < v; ++j) {
                    gz[rows[k] * v + j] += static_cast<float>(upstream * (ysum * p[j] - yr[j]));
                }
            }
            break;
        }
        case Op::sq_error_sum: {
            auto x = in(0).data();
            auto t = tape.constant_value(node.aux).data();
            auto ga = grad_of(node.inputs[0]).data();
            const float up = gd[0];
            for (std::size_t i = 0; i < x.size(); ++i) ga[i] += 2.0F * up * (x[i] - t[i]);
            break;
        }
        case Op::sum: {
            auto ga = grad_of(node.inputs[0]).data();
            for (auto& v : ga) v += gd[0];
            break;
        }
        case Op::input:
        case Op::constant: break;
        }
    }

    TensorMap out;
    for (NodeId id : tape.input_nodes()) {
        const TapeNode& node = tape.node(id);
        if (wrt != nullptr && !wrt->contains(node.name)) continue;
        if (has_grad[id]) {
            out.emplace(node.name, std::move(grads[id]));
        } else {
            out.emplace(node.name, Tensor(node.shape));
        }
    }
    return out;
}

}  // namespace r2f
