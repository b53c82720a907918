// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "dmu/errors.hpp"
#include "dmu/numerics/matrix.hpp"

namespace dmu {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t param_index = 0;
    std::size_t element_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Compares analytic gradients with central differences.
///
/// `f(params, grads)` returns the scalar loss at `params`; when `grads` is not
/// null it also stores d(loss)/d(params[i]) into (*grads)[i]. The error per
/// entry is |analytic − fd| / max(|analytic|, |fd|, 1e-8) and the worst entry
/// is reported.
template <class F>
GradCheckResult grad_check(F&& f, std::vector<Matrix> params, double eps = 1e-5) {
    std::vector<Matrix> analytic;
    const double base = f(params, &analytic);
    if (!std::isfinite(base)) throw EvaluationError("grad_check: loss is not finite");
    if (analytic.size() != params.size()) {
        throw DimensionError("grad_check: function returned " + std::to_string(analytic.size()) +
                             " gradients for " + std::to_string(params.size()) + " parameters");
    }

    GradCheckResult result;
    for (std::size_t p = 0; p < params.size(); ++p) {
        detail::require_same_shape(params[p], analytic[p], "grad_check");
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const double saved = params[p][i];
            params[p][i] = saved + eps;
            const double up = f(params, nullptr);
            params[p][i] = saved - eps;
            const double down = f(params, nullptr);
            params[p][i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw EvaluationError("grad_check: perturbed loss is not finite");
            }
            const double fd = (up - down) / (2.0 * eps);
            const double a = analytic[p][i];
            const double denom = std::max({std::abs(a), std::abs(fd), 1e-8});
            const double err = std::abs(a - fd) / denom;
            if (err > result.max_rel_error) {
                result = {err, p, i, a, fd};
            }
        }
    }
    return result;
}

}  // namespace dmu
