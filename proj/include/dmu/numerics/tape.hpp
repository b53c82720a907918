// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dmu/errors.hpp"
#include "dmu/numerics/matrix.hpp"

namespace dmu {

enum class Mode { train, infer };

/// Batch-norm numerical constants.
struct BatchNormConstants {
    static constexpr double eps = 1e-5;
    static constexpr double momentum = 0.1;
};

/// Reverse-mode differentiation over whole-matrix operations.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward() is a single reverse sweep. Every node owns
/// a gradient buffer of its own shape, zero-initialized at creation.
class Tape {
public:
    struct Var {
        std::size_t id = std::numeric_limits<std::size_t>::max();
        bool valid() const noexcept { return id != std::numeric_limits<std::size_t>::max(); }
    };

    /// Receives the gradient of the node being processed.
    using BackwardFn = std::function<void(Tape&, const Matrix& out_grad)>;

    Var constant(Matrix value) { return push(std::move(value), false, {}); }
    Var parameter(Matrix value) { return push(std::move(value), true, {}); }

    /// Same value, no gradient path back to the argument.
    Var detach(Var v) { return constant(value(v)); }

    /// Records an op result. The node requires a gradient iff any input does.
    Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward) {
        bool needs = false;
        for (Var in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
        return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
    }

    const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
    const Matrix& grad(Var v) const { return nodes_.at(v.id).grad; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Number of times backward() processed this node (test hook).
    std::size_t visits(Var v) const { return nodes_.at(v.id).visits; }

    /// Adds g into the gradient of v; no-op when v is outside the gradient graph.
    void accumulate(Var v, const Matrix& g) {
        Node& n = nodes_.at(v.id);
        if (!n.requires_grad) return;
        axpy(n.grad, 1.0, g);
    }

    /// Seeds d(out)/d(out) = 1 and propagates to every node that requires a gradient.
    void backward(Var out) {
        const Node& root = nodes_.at(out.id);
        if (root.value.rows() != 1 || root.value.cols() != 1) {
            throw DimensionError("Tape::backward: output must be 1x1, got " +
                                 root.value.shape_string());
        }
        if (!root.requires_grad) return;
        nodes_[out.id].grad(0, 0) += 1.0;
        for (std::size_t i = out.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad) continue;
            ++n.visits;
            if (n.backward) {
                // Inputs always have smaller ids, so this node's gradient is final
                // and the reference stays valid while inputs accumulate.
                n.backward(*this, n.grad);
            }
        }
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        BackwardFn backward;
        std::size_t visits = 0;
    };

    Var push(Matrix value, bool requires_grad, BackwardFn backward) {
        Node n;
        n.grad = Matrix(value.rows(), value.cols());
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
};

using Var = Tape::Var;

/// Running moments of a batch-norm layer.
struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;

    static BatchNormState identity(std::size_t dim) {
        return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
    }
};

namespace ad {

/// x·W + b, with b a 1×O row (optional).
inline Var affine(Tape& t, Var x, Var w, std::optional<Var> b = std::nullopt) {
    const Matrix& xv = t.value(x);
    const Matrix& wv = t.value(w);
    if (xv.cols() != wv.rows()) {
        throw DimensionError("affine: input " + xv.shape_string() + " vs weight " +
                             wv.shape_string());
    }
    Matrix out = matmul(xv, wv);
    if (b) {
        const Matrix& bv = t.value(*b);
        if (bv.rows() != 1 || bv.cols() != wv.cols()) {
            throw DimensionError("affine: bias " + bv.shape_string() + " vs output width " +
                                 std::to_string(wv.cols()));
        }
        for (std::size_t r = 0; r < out.rows(); ++r)
            for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv(0, c);
    }
    if (b) {
        return t.record(std::move(out), {x, w, *b}, [x, w, b](Tape& tp, const Matrix& g) {
            if (tp.requires_grad(x)) tp.accumulate(x, matmul_nt(g, tp.value(w)));
            if (tp.requires_grad(w)) tp.accumulate(w, matmul_tn(tp.value(x), g));
            if (tp.requires_grad(*b)) {
                Matrix db(1, g.cols());
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < g.cols(); ++c) db(0, c) += g(r, c);
                tp.accumulate(*b, db);
            }
        });
    }
    return t.record(std::move(out), {x, w}, [x, w](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(x)) tp.accumulate(x, matmul_nt(g, tp.value(w)));
        if (tp.requires_grad(w)) tp.accumulate(w, matmul_tn(tp.value(x), g));
    });
}

/// a·bᵀ
inline Var matmul_nt(Tape& t, Var a, Var b) {
    Matrix out = dmu::matmul_nt(t.value(a), t.value(b));
    return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a)) tp.accumulate(a, dmu::matmul(g, tp.value(b)));
        if (tp.requires_grad(b)) tp.accumulate(b, dmu::matmul_tn(g, tp.value(a)));
    });
}

inline Var relu(Tape& t, Var x) {
    Matrix out = t.value(x);
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return t.record(std::move(out), {x}, [x](Tape& tp, const Matrix& g) {
        const Matrix& xv = tp.value(x);
        Matrix dx(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] = xv[i] > 0.0 ? g[i] : 0.0;
        tp.accumulate(x, dx);
    });
}

/// Row-wise projection onto the unit sphere.
inline Var l2_normalize(Tape& t, Var x) {
    const Matrix& xv = t.value(x);
    std::vector<double> norms(xv.rows());
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        norms[r] = norm(xv.row(r));
        if (!(norms[r] > 0.0) || !std::isfinite(norms[r])) {
            throw NormalizationError("l2_normalize: row " + std::to_string(r) +
                                     " has zero or non-finite norm");
        }
    }
    Matrix out = xv;
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (double& v : out.row(r)) v /= norms[r];
    Matrix y = out;
    return t.record(std::move(out), {x}, [x, yv = std::move(y), norms](Tape& tp, const Matrix& g) {
        Matrix dx(g.rows(), g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
            const double proj = dot(yv.row(r), g.row(r));
            for (std::size_t c = 0; c < g.cols(); ++c)
                dx(r, c) = (g(r, c) - yv(r, c) * proj) / norms[r];
        }
        tp.accumulate(x, dx);
    });
}

/// Per-dimension standardization followed by scale (gamma) and shift (beta).
///
/// Train mode uses biased batch moments and, when `update` is given, folds them
/// into it with the unbiased variance. Infer mode reads `state` only and is
/// batch-size independent.
inline Var batch_norm(Tape& t, Var x, Var gamma, Var beta, Mode mode,
                      const BatchNormState& state, BatchNormState* update = nullptr) {
    constexpr double eps = BatchNormConstants::eps;
    constexpr double momentum = BatchNormConstants::momentum;
    const Matrix& xv = t.value(x);
    const std::size_t n = xv.rows();
    const std::size_t d = xv.cols();
    if (t.value(gamma).size() != d || t.value(beta).size() != d ||
        state.running_mean.size() != d || state.running_var.size() != d) {
        throw DimensionError("batch_norm: parameter width does not match input " +
                             xv.shape_string());
    }

    std::vector<double> mean(d, 0.0);
    std::vector<double> inv_std(d, 0.0);
    if (mode == Mode::train) {
        if (n < 2) {
            throw DegenerateBatchError("batch_norm: train mode needs at least 2 rows, got " +
                                       std::to_string(n));
        }
        std::vector<double> var(d, 0.0);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) mean[c] += xv(r, c);
        for (double& m : mean) m /= static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) {
                const double dv = xv(r, c) - mean[c];
                var[c] += dv * dv;
            }
        for (std::size_t c = 0; c < d; ++c) {
            const double biased = var[c] / static_cast<double>(n);
            inv_std[c] = 1.0 / std::sqrt(biased + eps);
            if (update) {
                const double unbiased = var[c] / static_cast<double>(n - 1);
                update->running_mean[c] =
                    (1.0 - momentum) * state.running_mean[c] + momentum * mean[c];
                update->running_var[c] =
                    (1.0 - momentum) * state.running_var[c] + momentum * unbiased;
            }
        }
    } else {
        for (std::size_t c = 0; c < d; ++c) {
            mean[c] = state.running_mean[c];
            inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + eps);
        }
    }

    const Matrix& gv = t.value(gamma);
    const Matrix& bv = t.value(beta);
    Matrix xhat(n, d);
    Matrix out(n, d);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) {
            xhat(r, c) = (xv(r, c) - mean[c]) * inv_std[c];
            out(r, c) = gv[c] * xhat(r, c) + bv[c];
        }

    return t.record(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, mode, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)](Tape& tp, const Matrix& g) {
        const std::size_t rows = g.rows();
        const std::size_t cols = g.cols();
        std::vector<double> sum_g(cols, 0.0);
        std::vector<double> sum_gx(cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                sum_g[c] += g(r, c);
                sum_gx[c] += g(r, c) * xhat(r, c);
            }
        const Matrix& gv = tp.value(gamma);
        if (tp.requires_grad(gamma)) {
            Matrix dg(tp.value(gamma).rows(), tp.value(gamma).cols());
            for (std::size_t c = 0; c < cols; ++c) dg[c] = sum_gx[c];
            tp.accumulate(gamma, dg);
        }
        if (tp.requires_grad(beta)) {
            Matrix db(tp.value(beta).rows(), tp.value(beta).cols());
            for (std::size_t c = 0; c < cols; ++c) db[c] = sum_g[c];
            tp.accumulate(beta, db);
        }
        if (tp.requires_grad(x)) {
            Matrix dx(rows, cols);
            if (mode == Mode::train) {
                const double inv_n = 1.0 / static_cast<double>(rows);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c)
                        dx(r, c) = gv[c] * inv_std[c] *
                                   (g(r, c) - inv_n * sum_g[c] - xhat(r, c) * inv_n * sum_gx[c]);
            } else {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) dx(r, c) = gv[c] * inv_std[c] * g(r, c);
            }
            tp.accumulate(x, dx);
        }
    });
}

/// Per-row inner product of two equally shaped matrices, as an N×1 column.
inline Var row_dot(Tape& t, Var a, Var b) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    detail::require_same_shape(av, bv, "row_dot");
    Matrix out(av.rows(), 1);
    for (std::size_t r = 0; r < av.rows(); ++r) out(r, 0) = dot(av.row(r), bv.row(r));
    return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
        const Matrix& av = tp.value(a);
        const Matrix& bv = tp.value(b);
        if (tp.requires_grad(a)) {
            Matrix da(av.rows(), av.cols());
            for (std::size_t r = 0; r < av.rows(); ++r)
                for (std::size_t c = 0; c < av.cols(); ++c) da(r, c) = g[r] * bv(r, c);
            tp.accumulate(a, da);
        }
        if (tp.requires_grad(b)) {
            Matrix db(bv.rows(), bv.cols());
            for (std::size_t r = 0; r < bv.rows(); ++r)
                for (std::size_t c = 0; c < bv.cols(); ++c) db(r, c) = g[r] * av(r, c);
            tp.accumulate(b, db);
        }
    });
}

/// Σ_i w_i·v_i over the flattened entries of v; weights are constants.
inline Var weighted_sum(Tape& t, Var v, std::vector<double> weights) {
    const Matrix& vv = t.value(v);
    if (weights.size() != vv.size()) {
        throw DimensionError("weighted_sum: " + std::to_string(weights.size()) +
                             " weights for " + std::to_string(vv.size()) + " entries");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < vv.size(); ++i) s += weights[i] * vv[i];
    return t.record(Matrix(1, 1, s), {v}, [v, weights = std::move(weights)](Tape& tp, const Matrix& g) {
        const Matrix& vv = tp.value(v);
        Matrix dv(vv.rows(), vv.cols());
        for (std::size_t i = 0; i < dv.size(); ++i) dv[i] = g[0] * weights[i];
        tp.accumulate(v, dv);
    });
}

inline Var mean(Tape& t, Var v) {
    const std::size_t n = t.value(v).size();
    if (n == 0) throw InvalidArgument("mean: empty input");
    return weighted_sum(t, v, std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

inline Var add(Tape& t, Var a, Var b) {
    Matrix out = t.value(a);
    axpy(out, 1.0, t.value(b));
    return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

/// alpha·x + beta, elementwise.
inline Var affine_scalar(Tape& t, Var x, double alpha, double beta = 0.0) {
    Matrix out = t.value(x);
    for (double& v : out.data()) v = alpha * v + beta;
    return t.record(std::move(out), {x}, [x, alpha](Tape& tp, const Matrix& g) {
        tp.accumulate(x, scaled(g, alpha));
    });
}

/// Row subset in the given order.
inline Var gather_rows(Tape& t, Var x, std::vector<std::size_t> idx) {
    Matrix out = dmu::gather_rows(t.value(x), idx);
    return t.record(std::move(out), {x}, [x, idx = std::move(idx)](Tape& tp, const Matrix& g) {
        const Matrix& xv = tp.value(x);
        Matrix dx(xv.rows(), xv.cols());
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < xv.cols(); ++c) dx(idx[i], c) += g(i, c);
        tp.accumulate(x, dx);
    });
}

}  // namespace ad
}  // namespace dmu
