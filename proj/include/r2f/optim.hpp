// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "r2f/tensor.hpp"

namespace r2f {

struct AdamConfig {
    float lr = 1e-3F;
    float beta1 = 0.9F;
    float beta2 = 0.999F;
    float eps = 1e-8F;
};

/// Adam over a named tensor map. Only names present in the gradient map move.
class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    void step(TensorMap& params, const TensorMap& grads);
    long steps() const noexcept { return t_; }
    void set_lr(float lr) noexcept { cfg_.lr = lr; }

private:
    AdamConfig cfg_;
    TensorMap m_;
    TensorMap v_;
    long t_ = 0;
};

/// params[name] -= lr * grads[name] for every gradient entry.
void sgd_step(TensorMap& params, const TensorMap& grads, float lr);

}  // namespace r2f
