// SPDX-License-Identifier: Apache-2.0

#include "r2f/optim.hpp"

#include <cmath>

#include "r2f/error.hpp"

namespace r2f {

void Adam::step(TensorMap& params, const TensorMap& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
        auto pit = params.find(name);
        if (pit == params.end()) fail(ErrorKind::shape, "adam: unknown parameter '" + name + "'");
        Tensor& p = pit->second;
        if (p.shape() != g.shape()) fail(ErrorKind::shape, "adam: gradient shape mismatch for '" + name + "'");
        auto [mit, m_new] = m_.try_emplace(name, p.shape());
        auto [vit, v_new] = v_.try_emplace(name, p.shape());
        auto pd = p.data();
        auto gd = g.data();
        auto md = mit->second.data();
        auto vd = vit->second.data();
        for (std::size_t i = 0; i < pd.size(); ++i) {
            md[i] = cfg_.beta1 * md[i] + (1.0F - cfg_.beta1) * gd[i];
            vd[i] = cfg_.beta2 * vd[i] + (1.0F - cfg_.beta2) * gd[i] * gd[i];
            const double mhat = md[i] / bc1;
            const double vhat = vd[i] / bc2;
            pd[i] -= static_cast<float>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
    }
}

void sgd_step(TensorMap& params, const TensorMap& grads, float lr) {
    for (const auto& [name, g] : grads) {
        auto pit = params.find(name);
        if (pit == params.end()) fail(ErrorKind::shape, "sgd: unknown parameter '" + name + "'");
        auto pd = pit->second.data();
        auto gd = g.data();
        for (std::size_t i = 0; i < pd.size(); ++i) pd[i] -= lr * gd[i];
    }
}

}  // namespace r2f
