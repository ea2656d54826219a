// SPDX-License-Identifier: Apache-2.0
//
// Small pretrained models shared by the module tests. Built once per test
// binary on first use.

#pragma once

#include "r2f/corpus.hpp"
#include "r2f/model.hpp"

namespace r2f::testing {

struct World {
    Corpus corpus;
    ModelParams proxy;   // 2 layers
    ModelParams target;  // 3 layers, same d_model
};

inline ModelConfig small_model(std::size_t layers, ModelRole role) {
    ModelConfig c;
    c.vocab_size = 128;
    c.d_model = 32;
    c.n_layers = layers;
    c.n_heads = 4;
    c.seq_len = 16;
    c.role = role;
    return c;
}

inline const World& small_world() {
    static const World w = [] {
        World out{build_synthetic_corpus({}), {}, {}};
        const auto examples = training_examples(out.corpus, all_fact_ids(out.corpus));
        out.proxy = pretrain(init_model(small_model(2, ModelRole::proxy), 11), examples, {300, 32, 3e-3F, 1});
        out.target = pretrain(init_model(small_model(3, ModelRole::target), 12), examples, {300, 32, 3e-3F, 2});
        return out;
    }();
    return w;
}

inline Tensor uniform_over(const std::vector<std::size_t>& support, std::size_t vocab) {
    Tensor y({vocab});
    for (auto t : support) y[t] = 1.0F / static_cast<float>(support.size());
    return y;
}

}  // namespace r2f::testing
