// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense tensors.
//
// A ComputeTape is a topologically ordered list of primitive ops built once
// and never mutated afterwards. forward_eval() binds named inputs and produces
// an Evaluation that owns every intermediate value; backward_grad() walks the
// same tape in reverse and returns gradients for the named inputs. Distinct
// evaluations of one tape share nothing, so a tape may be evaluated from
// several threads at once.

#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "r2f/tensor.hpp"

namespace r2f {

using NodeId = std::uint32_t;

enum class Op : std::uint8_t {
    input,
    constant,
    matmul,          // [m,k] x [k,n]
    transpose,       // [m,n] -> [n,m]
    add,             // same shape
    sub,             // same shape
    mul,             // elementwise, same shape
    scale,           // x * alpha
    add_bias,        // [m,n] + [n], the only broadcast
    gelu,            // tanh approximation
    tanh,
    softmax_rows,    // optional causal mask: column j > (row i mod cols) masked out
    block_matmul_nt, // per row block: a_blk [block,k] x b_blk^T -> [block,block]
    block_matmul,    // per row block: a_blk [block,block] x b_blk [block,n]
    layernorm,       // rows of [m,n] with gain [n] and bias [n]
    embedding,       // table [V,d] gathered by token ids -> [T,d]
    slice_cols,      // [m,n] -> [m,width] starting at column offset
    concat_cols,     // several [m,n_i] -> [m, sum n_i]
    soft_cross_entropy,  // mean over selected rows of -sum_v y_v log softmax(z)_v
    sq_error_sum,    // sum (x - target)^2 against a constant target
    sum,             // all elements -> scalar
};

const char* op_name(Op op);

struct TapeNode {
    Op op = Op::input;
    std::vector<NodeId> inputs;
    Shape shape;
    float alpha = 0.0F;       // scale factor
    std::size_t offset = 0;   // slice_cols start, block size of block matmuls
    bool causal = false;      // softmax_rows
    std::string name;         // input nodes
    std::size_t aux = 0;      // index into constants / index lists
};

class ComputeTape {
public:
    NodeId input(const std::string& name, Shape shape);
    NodeId constant(Tensor value);

    NodeId matmul(NodeId a, NodeId b);
    NodeId transpose(NodeId a);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, float alpha);
    NodeId add_bias(NodeId x, NodeId bias);
    NodeId gelu(NodeId x);
    NodeId tanh(NodeId x);
    /// With `causal`, row i sees columns 0..(i mod cols), so a stack of
    /// [block, block] score tiles is masked tile by tile.
    NodeId softmax_rows(NodeId x, bool causal = false);
    /// Rows of a and b are split into consecutive blocks of `block` rows; row i
    /// of the result holds a_i . b_j for the rows j of i's block. [m, block].
    NodeId block_matmul_nt(NodeId a, NodeId b, std::size_t block);
    /// Inverse pairing of block_matmul_nt: p [m, block], v [m, n] -> [m, n],
    /// row i is sum_j p_ij v_j over the rows j of i's block.
    NodeId block_matmul(NodeId p, NodeId v, std::size_t block);
    NodeId layernorm(NodeId x, NodeId gain, NodeId bias);
    NodeId embedding(NodeId table, std::vector<std::size_t> ids);
    NodeId slice_cols(NodeId x, std::size_t offset, std::size_t width);
    NodeId concat_cols(const std::vector<NodeId>& parts);
    /// Cross-entropy of row-wise softmax(logits) against target distributions,
    /// one target row per selected logits row, averaged over the selected rows.
    NodeId soft_cross_entropy(NodeId logits, Tensor targets, std::vector<std::size_t> rows);
    NodeId sq_error_sum(NodeId x, Tensor target);
    NodeId sum(NodeId x);

    std::size_t size() const noexcept { return nodes_.size(); }
    const TapeNode& node(NodeId id) const { return nodes_.at(id); }
    const Shape& shape(NodeId id) const { return nodes_.at(id).shape; }
    const std::vector<NodeId>& input_nodes() const noexcept { return input_ids_; }
    std::optional<NodeId> find_input(const std::string& name) const;

    const Tensor& constant_value(std::size_t index) const { return constants_.at(index); }
    const std::vector<std::size_t>& index_list(std::size_t index) const { return index_lists_.at(index); }

private:
    NodeId push(TapeNode node);
    void check_id(NodeId id) const;

    std::vector<TapeNode> nodes_;
    std::vector<Tensor> constants_;
    std::vector<std::vector<std::size_t>> index_lists_;
    std::vector<NodeId> input_ids_;
    std::unordered_map<std::string, NodeId> inputs_by_name_;
};

/// Name -> tensor view used to bind tape inputs. Bound tensors are referenced,
/// not copied, and must outlive any Evaluation built from them.
class Bindings {
public:
    Bindings() = default;
    Bindings(const TensorMap& map) { bind_all(map); }  // NOLINT(google-explicit-constructor)

    void bind(const std::string& name, const Tensor& value) { refs_[name] = &value; }
    void bind_all(const TensorMap& map) {
        for (const auto& [k, v] : map) refs_[k] = &v;
    }
    const Tensor* find(const std::string& name) const {
        auto it = refs_.find(name);
        return it == refs_.end() ? nullptr : it->second;
    }

private:
    std::unordered_map<std::string, const Tensor*> refs_;
};

class Evaluation {
public:
    const Tensor& value(NodeId id) const;
    /// Value of a scalar node. Reductions keep their double accumulator, so
    /// this is more precise than value(id).item() for losses.
    double scalar(NodeId id) const;

private:
    friend Evaluation forward_eval(const ComputeTape&, const Bindings&);
    std::vector<Tensor> owned_;
    std::vector<const Tensor*> bound_;
    std::vector<double> wide_;  // NaN where no double value was recorded
};

Evaluation forward_eval(const ComputeTape& tape, const Bindings& inputs);

/// Gradient of the scalar node `loss` with respect to every input node (or to
/// the subset named in `wrt`). Inputs the loss does not depend on get zeros.
TensorMap backward_grad(const ComputeTape& tape, const Evaluation& eval, NodeId loss,
                        const std::set<std::string>* wrt = nullptr);

}  // namespace r2f
