// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "dmu/numerics/grad_check.hpp"
#include "dmu/numerics/matrix.hpp"
#include "dmu/numerics/random.hpp"
#include "dmu/numerics/tape.hpp"
#include "support/generators.hpp"

namespace {

using namespace dmu;
using dmu::testing::random_integer_matrix;
using dmu::testing::random_matrix;

Matrix naive_affine(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix out(x.rows(), w.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) {
            double s = b(0, j);
            for (std::size_t k = 0; k < x.cols(); ++k) s += x(i, k) * w(k, j);
            out(i, j) = s;
        }
    return out;
}

Matrix affine_value(const Matrix& x, const Matrix& w, const Matrix& b) {
    Tape t;
    return t.value(ad::affine(t, t.constant(x), t.constant(w), t.constant(b)));
}

TEST(Affine, IdentityWeights) {
    const Matrix out = affine_value(Matrix::from_rows({{1, 2}}), Matrix::from_rows({{1, 0}, {0, 1}}),
                                    Matrix::from_rows({{0, 0}}));
    EXPECT_EQ(out, Matrix::from_rows({{1, 2}}));
}

TEST(Affine, HandSum) {
    const Matrix out = affine_value(Matrix::from_rows({{1, 1}}), Matrix::from_rows({{2}, {3}}),
                                    Matrix::from_rows({{1}}));
    EXPECT_EQ(out, Matrix::from_rows({{6}}));
}

TEST(Affine, MatchesTripleLoopOnRandomInput) {
    Rng rng(11);
    const Matrix x = random_matrix(rng, 4, 8);
    const Matrix w = random_matrix(rng, 8, 3);
    const Matrix b = random_matrix(rng, 1, 3);
    EXPECT_LT(max_abs_diff(affine_value(x, w, b), naive_affine(x, w, b)), 1e-12);
}

TEST(Affine, ExactOnIntegerInputs) {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.below(9);
        const std::size_t k = 1 + rng.below(9);
        const std::size_t m = 1 + rng.below(9);
        const Matrix x = random_integer_matrix(rng, n, k, -9, 9);
        const Matrix w = random_integer_matrix(rng, k, m, -9, 9);
        const Matrix b = random_integer_matrix(rng, 1, m, -9, 9);
        EXPECT_EQ(affine_value(x, w, b), naive_affine(x, w, b));
    }
}

TEST(Affine, ShapeMismatchThrows) {
    Tape t;
    EXPECT_THROW(ad::affine(t, t.constant(Matrix(2, 3)), t.constant(Matrix(4, 2))), DimensionError);
    EXPECT_THROW(ad::affine(t, t.constant(Matrix(2, 3)), t.constant(Matrix(3, 2)), t.constant(Matrix(1, 3))),
                 DimensionError);
}

TEST(Matmul, VariantsAgreeWithTranspose) {
    Rng rng(13);
    const Matrix a = random_matrix(rng, 5, 4);
    const Matrix b = random_matrix(rng, 6, 4);
    EXPECT_LT(max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))), 1e-12);
    const Matrix c = random_matrix(rng, 5, 3);
    EXPECT_LT(max_abs_diff(matmul_tn(a, c), matmul(transpose(a), c)), 1e-12);
    EXPECT_THROW(matmul(a, a), DimensionError);
}

Matrix bn_train(const Matrix& x, const Matrix& gamma, const Matrix& beta) {
    Tape t;
    const BatchNormState s = BatchNormState::identity(x.cols());
    return t.value(ad::batch_norm(t, t.constant(x), t.constant(gamma), t.constant(beta), Mode::train, s));
}

TEST(BatchNorm, StandardizedInputPassesThrough) {
    const Matrix x = Matrix::from_rows({{1, -1}, {-1, 1}, {1, 1}, {-1, -1}});
    const Matrix out = bn_train(x, Matrix(1, 2, 1.0), Matrix(1, 2, 0.0));
    EXPECT_LT(max_abs_diff(out, x), 1e-5);
}

TEST(BatchNorm, ConstantColumnYieldsBeta) {
    const Matrix x = Matrix::from_rows({{3, 1}, {3, 2}, {3, 5}});
    const Matrix out = bn_train(x, Matrix(1, 2, 2.0), Matrix::from_rows({{0.7, 0.0}}));
    for (std::size_t r = 0; r < 3; ++r) EXPECT_DOUBLE_EQ(out(r, 0), 0.7);
}

TEST(BatchNorm, MomentsMatchScaleAndShift) {
    Rng rng(14);
    const Matrix x = random_matrix(rng, 8, 4, 3.0);
    const Matrix gamma = Matrix::from_rows({{0.5, 1.5, 2.0, 1.0}});
    const Matrix beta = Matrix::from_rows({{-1.0, 0.0, 0.25, 3.0}});
    const Matrix out = bn_train(x, gamma, beta);
    for (std::size_t c = 0; c < 4; ++c) {
        double mean = 0.0;
        double sq = 0.0;
        for (std::size_t r = 0; r < 8; ++r) mean += out(r, c);
        mean /= 8.0;
        for (std::size_t r = 0; r < 8; ++r) sq += (out(r, c) - mean) * (out(r, c) - mean);
        EXPECT_NEAR(mean, beta[c], 1e-4);
        EXPECT_NEAR(std::sqrt(sq / 8.0), gamma[c], 1e-4);
    }
}

TEST(BatchNorm, SingleRowInTrainModeThrows) {
    Tape t;
    const BatchNormState s = BatchNormState::identity(2);
    EXPECT_THROW(ad::batch_norm(t, t.constant(Matrix(1, 2)), t.constant(Matrix(1, 2, 1.0)),
                                t.constant(Matrix(1, 2)), Mode::train, s),
                 DegenerateBatchError);
}

TEST(BatchNorm, RunningMomentsUpdateWithMomentum) {
    Tape t;
    const Matrix x = Matrix::from_rows({{0.0}, {2.0}});
    BatchNormState s = BatchNormState::identity(1);
    BatchNormState updated = s;
    ad::batch_norm(t, t.constant(x), t.constant(Matrix(1, 1, 1.0)), t.constant(Matrix(1, 1)), Mode::train, s,
                   &updated);
    EXPECT_DOUBLE_EQ(updated.running_mean[0], 0.1 * 1.0);
    EXPECT_DOUBLE_EQ(updated.running_var[0], 0.9 * 1.0 + 0.1 * 2.0);
}

TEST(BatchNorm, InferModeUsesRunningMoments) {
    Tape t;
    BatchNormState s{{1.0}, {4.0}};
    const Var out = ad::batch_norm(t, t.constant(Matrix::from_rows({{3.0}})), t.constant(Matrix(1, 1, 1.0)),
                                   t.constant(Matrix(1, 1)), Mode::infer, s);
    EXPECT_NEAR(t.value(out)[0], 2.0 / std::sqrt(4.0 + BatchNormConstants::eps), 1e-15);
}

Matrix relu_value(const Matrix& x) {
    Tape t;
    return t.value(ad::relu(t, t.constant(x)));
}

TEST(Relu, Examples) {
    EXPECT_EQ(relu_value(Matrix::from_rows({{-1, 2}})), Matrix::from_rows({{0, 2}}));
    EXPECT_EQ(relu_value(Matrix(3, 2, -0.5)), Matrix(3, 2, 0.0));
    const Matrix pos = Matrix::from_rows({{0.1, 2.0}, {3.0, 4.5}});
    EXPECT_EQ(relu_value(pos), pos);
}

TEST(L2Normalize, Examples) {
    const Matrix y = l2_normalize(Matrix::from_rows({{3, 4}}));
    EXPECT_DOUBLE_EQ(y(0, 0), 0.6);
    EXPECT_DOUBLE_EQ(y(0, 1), 0.8);
    const Matrix unit = Matrix::from_rows({{0, 1, 0}});
    EXPECT_EQ(l2_normalize(unit), unit);
    Rng rng(15);
    const Matrix r = l2_normalize(random_matrix(rng, 5, 16));
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(norm(r.row(i)), 1.0, 1e-6);
}

TEST(L2Normalize, ZeroRowThrows) {
    EXPECT_THROW(l2_normalize(Matrix::from_rows({{1, 0}, {0, 0}})), NormalizationError);
    Tape t;
    EXPECT_THROW(ad::l2_normalize(t, t.constant(Matrix(1, 3))), NormalizationError);
}

TEST(L2Normalize, Idempotent) {
    Rng rng(16);
    for (int trial = 0; trial < 100; ++trial) {
        const Matrix once = l2_normalize(random_matrix(rng, 4, 7, 10.0));
        EXPECT_LT(max_abs_diff(l2_normalize(once), once), 1e-9);
    }
}

TEST(Softmax, Examples) {
    const Matrix a = softmax_rows(Matrix::from_rows({{0, 0}}));
    EXPECT_DOUBLE_EQ(a(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(a(0, 1), 0.5);
    const Matrix b = softmax_rows(Matrix::from_rows({{0, std::log(2.0)}}));
    EXPECT_NEAR(b(0, 0), 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(b(0, 1), 2.0 / 3.0, 1e-15);
    const Matrix c = softmax_rows(Matrix::from_rows({{1000, 0}}));
    EXPECT_TRUE(all_finite(c));
    EXPECT_NEAR(c(0, 0), 1.0, 1e-15);
    EXPECT_NEAR(c(0, 1), 0.0, 1e-15);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const Matrix x = random_matrix(rng, 3, 1 + rng.below(12), 20.0);
        Matrix shifted = x;
        for (std::size_t r = 0; r < x.rows(); ++r) {
            const double k = rng.uniform(-50.0, 50.0);
            for (double& v : shifted.row(r)) v += k;
        }
        const Matrix p = softmax_rows(x);
        for (std::size_t r = 0; r < p.rows(); ++r) {
            double s = 0.0;
            for (double v : p.row(r)) s += v;
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
        EXPECT_LT(max_abs_diff(softmax_rows(shifted), p), 1e-9);
    }
}

TEST(Tape, DetachBlocksGradient) {
    Tape t;
    const Var p = t.parameter(Matrix::from_rows({{2.0}}));
    const Var d = t.detach(p);
    const Var y = ad::add(t, ad::affine_scalar(t, p, 3.0), ad::affine_scalar(t, d, 5.0));
    t.backward(y);
    EXPECT_DOUBLE_EQ(t.grad(p)[0], 3.0);
    EXPECT_FALSE(t.requires_grad(d));
}

TEST(Tape, EachNodeVisitedOnce) {
    Tape t;
    const Var p = t.parameter(Matrix::from_rows({{1.0, 2.0}}));
    const Var a = ad::affine_scalar(t, p, 2.0);
    const Var b = ad::add(t, a, a);  // diamond: a feeds b twice
    const Var y = ad::mean(t, b);
    t.backward(y);
    for (const Var v : {p, a, b, y}) EXPECT_EQ(t.visits(v), 1U);
    EXPECT_DOUBLE_EQ(t.grad(p)[0], 2.0);  // d/dp mean(4p) = 4/2
}

TEST(Tape, GradientShapesMatchValues) {
    Rng rng(18);
    Tape t;
    const Var x = t.parameter(random_matrix(rng, 3, 4));
    const Var w = t.parameter(random_matrix(rng, 4, 2));
    const Var y = ad::mean(t, ad::relu(t, ad::affine(t, x, w)));
    t.backward(y);
    EXPECT_TRUE(t.grad(x).same_shape(t.value(x)));
    EXPECT_TRUE(t.grad(w).same_shape(t.value(w)));
}

TEST(Tape, BackwardRequiresScalar) {
    Tape t;
    const Var x = t.parameter(Matrix(2, 2));
    EXPECT_THROW(t.backward(x), DimensionError);
}

TEST(GradCheck, Square) {
    auto f = [](const std::vector<Matrix>& p, std::vector<Matrix>* g) {
        const double v = p[0][0];
        if (g) *g = {Matrix(1, 1, 2.0 * v)};
        return v * v;
    };
    const GradCheckResult r = grad_check(f, {Matrix(1, 1, 3.0)}, 1e-5);
    EXPECT_LT(r.max_rel_error, 1e-7);
    EXPECT_NEAR(r.analytic, 6.0, 1e-12);
}

TEST(GradCheck, NonFiniteLossThrows) {
    auto f = [](const std::vector<Matrix>&, std::vector<Matrix>* g) {
        if (g) *g = {Matrix(1, 1)};
        return std::numeric_limits<double>::quiet_NaN();
    };
    EXPECT_THROW(grad_check(f, {Matrix(1, 1)}), EvaluationError);
}

TEST(GradCheck, DetectsWrongGradient) {
    auto f = [](const std::vector<Matrix>& p, std::vector<Matrix>* g) {
        if (g) *g = {Matrix(1, 1, 1.0)};
        return p[0][0] * p[0][0];
    };
    EXPECT_GT(grad_check(f, {Matrix(1, 1, 3.0)}).max_rel_error, 0.5);
}

/// Every tape op against central differences through a composite graph.
TEST(GradCheck, CompositeGraph) {
    Rng rng(19);
    const Matrix x0 = random_matrix(rng, 5, 3);
    const Matrix w0 = random_matrix(rng, 3, 4);
    const Matrix b0 = random_matrix(rng, 1, 4);
    const Matrix g0 = random_matrix(rng, 1, 4);
    const Matrix be0 = random_matrix(rng, 1, 4);
    const Matrix target = random_matrix(rng, 5, 4);
    auto f = [&](const std::vector<Matrix>& p, std::vector<Matrix>* g) {
        Tape t;
        std::vector<Var> vars;
        for (const Matrix& m : p) vars.push_back(t.parameter(m));
        const BatchNormState s = BatchNormState::identity(4);
        Var side = ad::mean(t, ad::relu(t, ad::affine(t, vars[0], vars[1], vars[2])));
        Var h = ad::affine(t, vars[0], vars[1]);
        h = ad::batch_norm(t, h, vars[3], vars[4], Mode::train, s);
        h = ad::l2_normalize(t, h);
        h = ad::gather_rows(t, h, {4, 0, 2, 0});
        Var tg = t.constant(gather_rows(target, std::vector<std::size_t>{4, 0, 2, 0}));
        Var dots = ad::row_dot(t, h, tg);
        Var logits = ad::matmul_nt(t, h, t.constant(target));
        Var y = ad::add(t, ad::weighted_sum(t, dots, {0.5, -1.0, 2.0, 0.25}), ad::mean(t, logits));
        y = ad::add(t, y, side);
        if (g) {
            t.backward(y);
            g->clear();
            for (Var v : vars) g->push_back(t.grad(v));
        }
        return t.value(y)[0];
    };
    EXPECT_LT(grad_check(f, {x0, w0, b0, g0, be0}).max_rel_error, 1e-6);
}

TEST(Random, DeriveSeedSeparatesStreams) {
    EXPECT_NE(derive_seed(1, "a"), derive_seed(1, "b"));
    EXPECT_NE(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
    EXPECT_NE(derive_seed(1, "a"), derive_seed(2, "a"));
    EXPECT_EQ(derive_seed(7, "x", 3), derive_seed(7, "x", 3));
}

TEST(Random, SameSeedSameStream) {
    Rng a(42);
    Rng b(42);
    for (int i = 0; i < 100; ++i) {
        EXPECT_EQ(a.uniform(), b.uniform());
        EXPECT_EQ(a.gaussian(), b.gaussian());
        EXPECT_EQ(a.below(17), b.below(17));
    }
}

TEST(Random, GaussianMoments) {
    Rng rng(43);
    const int n = 200000;
    double s = 0.0;
    double sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = rng.gaussian();
        s += v;
        sq += v * v;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(sq / n, 1.0, 0.02);
}

TEST(Random, ShuffleIsPermutation) {
    Rng rng(44);
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i) v[i] = i;
    rng.shuffle(v);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

}  // namespace
