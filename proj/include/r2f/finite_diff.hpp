// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <vector>

#include "r2f/tensor.hpp"

namespace r2f {

using LossFn = std::function<double(const Tensor&)>;

/// `five_point` combines steps h and 2h (Richardson) and removes the h^2
/// truncation term, which matters once the step is large enough to clear f32
/// forward noise.
enum class Stencil { central, five_point };

/// Central-difference gradient (L(p + h e_i) - L(p - h e_i)) / 2h with the step
/// h = eps * max(1, |p_i|). When `coords` is non-empty only those coordinates
/// are probed; the remaining entries of the result stay zero.
Tensor finite_diff_grad(const LossFn& loss_fn, const Tensor& params, double eps = 1e-3,
                        std::span<const std::size_t> coords = {}, Stencil stencil = Stencil::central);

/// |a - b| <= max(abs_tol, rel_tol * max(|a|, |b|)).
bool grad_close(double a, double b, double abs_tol = 1e-4, double rel_tol = 1e-3);

}  // namespace r2f
