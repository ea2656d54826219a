// SPDX-License-Identifier: Apache-2.0

#include "r2f/finite_diff.hpp"

#include <algorithm>
#include <cmath>

#include "r2f/error.hpp"

namespace r2f {

Tensor finite_diff_grad(const LossFn& loss_fn, const Tensor& params, double eps, std::span<const std::size_t> coords,
                        Stencil stencil) {
    if (!(eps > 0.0)) fail(ErrorKind::usage, "finite_diff_grad: eps must be positive");
    Tensor grad(params.shape());
    Tensor probe = params;

    // Round each step to what f32 can represent so the divisor matches the
    // perturbation actually applied.
    auto slope = [&](std::size_t i, double h) {
        const float orig = params[i];
        const float up = static_cast<float>(orig + h);
        const float dn = static_cast<float>(orig - h);
        probe[i] = up;
        const double lp = loss_fn(probe);
        probe[i] = dn;
        const double lm = loss_fn(probe);
        probe[i] = orig;
        if (!std::isfinite(lp) || !std::isfinite(lm)) {
            fail(ErrorKind::numerical, "finite_diff_grad: non-finite loss at coordinate " + std::to_string(i));
        }
        return (lp - lm) / (static_cast<double>(up) - static_cast<double>(dn));
    };

    auto eval_at = [&](std::size_t i) {
        const double h = eps * std::max(1.0, std::abs(static_cast<double>(params[i])));
        const double d1 = slope(i, h);
        grad[i] = static_cast<float>(stencil == Stencil::central ? d1 : (4.0 * d1 - slope(i, 2.0 * h)) / 3.0);
    };

    if (coords.empty()) {
        for (std::size_t i = 0; i < params.size(); ++i) eval_at(i);
    } else {
        for (auto i : coords) {
            if (i >= params.size()) fail(ErrorKind::shape, "finite_diff_grad: coordinate out of range");
            eval_at(i);
        }
    }
    return grad;
}

bool grad_close(double a, double b, double abs_tol, double rel_tol) {
    const double diff = std::abs(a - b);
    return diff <= std::max(abs_tol, rel_tol * std::max(std::abs(a), std::abs(b)));
}

}  // namespace r2f
