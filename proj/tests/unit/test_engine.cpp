// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "dmu/engine.hpp"
#include "dmu/experiment.hpp"
#include "support/generators.hpp"

namespace {

using namespace dmu;

LabeledVectorSet small_data(std::uint64_t seed = 1, std::size_t per_class = 40) {
    return generate_synthetic({6, per_class, 8, 0.25, 0.3, seed});
}

TrainConfig small_config(Method m, std::uint64_t seed = 3) {
    TrainConfig c;
    c.epochs = 3;
    c.batch_size = 16;
    c.base_lr = 0.05;
    c.method = m;
    c.encoder = {8, {24}, 8};
    c.adapter = {8, 24};
    c.arcface = {16.0, 0.2};
    c.seed = seed;
    return c;
}

const FrozenModel& old_model() {
    static const FrozenModel old = [] {
        const ScenarioSplit s = make_split(small_data(), SplitKind::extended_data, 0.5, 2);
        return train_standalone(s.old_set, small_config(Method::old_model, 9)).frozen();
    }();
    return old;
}

TEST(Sgd, PlainStepExample) {
    Matrix p(1, 1, 1.0);
    Matrix v(1, 1);
    sgd_step(p, Matrix(1, 1, 0.5), v, 0.1, 0.0, 0.0);
    EXPECT_DOUBLE_EQ(p(0, 0), 0.95);
}

TEST(Sgd, ZeroGradientLeavesParameters) {
    Rng rng(1);
    Matrix p = dmu::testing::random_matrix(rng, 3, 4);
    const Matrix before = p;
    Matrix v(3, 4);
    sgd_step(p, Matrix(3, 4), v, 0.1, 0.9, 0.0);
    EXPECT_EQ(p, before);
}

TEST(Sgd, TwoMomentumStepsMatchRecurrence) {
    Matrix p(1, 1, 2.0);
    Matrix v(1, 1);
    const double lr = 0.1;
    const double mu = 0.9;
    const double wd = 0.01;
    sgd_step(p, Matrix(1, 1, 0.5), v, lr, mu, wd);
    sgd_step(p, Matrix(1, 1, -0.3), v, lr, mu, wd);
    const double v1 = 0.5 + wd * 2.0;
    const double p1 = 2.0 - lr * v1;
    const double v2 = mu * v1 - 0.3 + wd * p1;
    const double p2 = p1 - lr * v2;
    EXPECT_DOUBLE_EQ(p(0, 0), p2);
    EXPECT_DOUBLE_EQ(v(0, 0), v2);
}

TEST(Sgd, NonFiniteGradientAborts) {
    Matrix p(1, 2, 1.0);
    Matrix v(1, 2);
    Matrix g(1, 2);
    g(0, 1) = std::nan("");
    EXPECT_THROW(sgd_step(p, g, v, 0.1, 0.9, 0.0), DivergenceError);
    EXPECT_THROW(sgd_step(p, Matrix(2, 1), v, 0.1, 0.9, 0.0), DimensionError);
}

TEST(Sgd, NoDecayOnBatchNormParameters) {
    Parameter w{"w", Matrix(1, 1, 1.0), true};
    Parameter g{"gamma", Matrix(1, 1, 1.0), false};
    SgdMomentum opt(0.0, 0.5);
    opt.step({&w, &g}, {Matrix(1, 1), Matrix(1, 1)}, 0.1);
    EXPECT_DOUBLE_EQ(w.value(0, 0), 0.95);
    EXPECT_DOUBLE_EQ(g.value(0, 0), 1.0);
}

TEST(LearningRate, Examples) {
    const double base = 0.1;
    EXPECT_DOUBLE_EQ(lr_at(0, 100, 10, base), base / 10.0);
    EXPECT_DOUBLE_EQ(lr_at(9, 100, 10, base), base);
    EXPECT_LE(lr_at(99, 100, 10, base), 1e-6 * base);
    EXPECT_THROW(lr_at(100, 100, 10, base), InvalidArgument);
}

TEST(LearningRate, ContinuousAtWarmupBoundary) {
    for (std::size_t total : {50U, 300U, 1000U}) {
        for (std::size_t warm : {1U, 5U, 20U}) {
            const double before = lr_at(warm - 1, total, warm, 0.1);
            const double after = lr_at(warm, total, warm, 0.1);
            const double ramp_step = 0.1 / static_cast<double>(warm);
            EXPECT_LE(std::abs(after - before), ramp_step + 1e-15);
        }
    }
}

TEST(LearningRate, WarmupRisesThenDecayNeverRises) {
    const std::size_t total = 200;
    const std::size_t warm = 20;
    for (std::size_t s = 1; s < total; ++s) {
        const double a = lr_at(s - 1, total, warm, 0.1);
        const double b = lr_at(s, total, warm, 0.1);
        if (s < warm) {
            EXPECT_GT(b, a);
        } else {
            EXPECT_LE(b, a);
        }
    }
}

TEST(TrainConfig, DefaultsAndValidation) {
    const TrainConfig c;
    EXPECT_EQ(c.epochs, 30U);
    EXPECT_EQ(c.warmup_epochs, 1U);
    EXPECT_DOUBLE_EQ(c.momentum, 0.9);
    EXPECT_DOUBLE_EQ(c.weight_decay, 1e-4);
    EXPECT_DOUBLE_EQ(c.base_lr, 0.1);
    TrainConfig bad = small_config(Method::oracle);
    bad.batch_size = 1;
    EXPECT_THROW(bad.validate(), InvalidArgument);
    bad = small_config(Method::oracle);
    bad.warmup_epochs = 3;
    EXPECT_THROW(bad.validate(), InvalidArgument);
    EXPECT_EQ(parse_method("dmu_least_conf"), Method::dmu_least_conf);
    EXPECT_THROW(parse_method("lce"), InvalidArgument);
}

TEST(TrainStandalone, TraceLengthFiniteAndDeterministic) {
    const LabeledVectorSet d = small_data();
    const TrainRun a = train_standalone(d, small_config(Method::oracle));
    const TrainRun b = train_standalone(d, small_config(Method::oracle));
    ASSERT_EQ(a.trace.size(), 3U);
    for (const EpochRecord& r : a.trace) {
        EXPECT_TRUE(std::isfinite(r.total));
        EXPECT_EQ(r.l_sbc, 0.0);
        EXPECT_EQ(r.l_fa, 0.0);
    }
    EXPECT_EQ(a.encoder, b.encoder);
    EXPECT_EQ(a.classifier, b.classifier);
    EXPECT_FALSE(a.adapter.has_value());
    EXPECT_FALSE(a.encoder == train_standalone(d, small_config(Method::oracle, 4)).encoder);
}

TEST(TrainStandalone, SmoothedLossDecreases) {
    const LabeledVectorSet d = generate_synthetic({6, 200, 8, 0.25, 0.0, 2});
    TrainConfig c = small_config(Method::oracle);
    c.epochs = 14;
    c.batch_size = 32;
    const TrainRun r = train_standalone(d, c);
    std::vector<double> smooth;
    for (std::size_t e = 4; e < r.trace.size(); ++e) {
        double s = 0.0;
        for (std::size_t k = e - 4; k <= e; ++k) s += r.trace[k].total / 5.0;
        smooth.push_back(s);
    }
    for (std::size_t i = 1; i < smooth.size(); ++i) EXPECT_LT(smooth[i], smooth[i - 1]) << "window " << i;
}

TEST(TrainStandalone, RejectsCompatibleMethodsAndBadWidths) {
    const LabeledVectorSet d = small_data();
    EXPECT_THROW(train_standalone(d, small_config(Method::bct)), InvalidArgument);
    TrainConfig c = small_config(Method::oracle);
    c.encoder.input_dim = 9;
    EXPECT_THROW(train_standalone(d, c), DimensionError);
    EXPECT_THROW(train(d, small_config(Method::dmu), nullptr), InvalidArgument);
}

TEST(TrainBct, ZeroCoefficientFollowsOracleTrajectory) {
    const LabeledVectorSet d = small_data();
    const TrainRun oracle = train_standalone(d, small_config(Method::oracle));
    TrainConfig c = small_config(Method::bct);
    c.compat_coef = 0.0;
    const TrainRun bct = train_bct(d, old_model(), c);
    EXPECT_EQ(bct.encoder, oracle.encoder);
    EXPECT_EQ(bct.classifier, oracle.classifier);
    for (std::size_t e = 0; e < oracle.trace.size(); ++e) EXPECT_EQ(bct.trace[e].l_new, oracle.trace[e].l_new);
}

TEST(TrainBct, OldParametersReceiveNoGradientAndStayFrozen) {
    const LabeledVectorSet d = small_data();
    const FrozenModel before = old_model();
    TrainHooks hooks;
    hooks.step_options.bind_old_parameters = true;
    std::size_t steps = 0;
    hooks.on_step = [&](const StepInfo& s) {
        ASSERT_FALSE(s.gradients->old_grads.empty());
        for (const Matrix& g : s.gradients->old_grads)
            for (double v : g.data()) EXPECT_EQ(v, 0.0);
        ++steps;
    };
    const TrainRun r = train_bct(d, old_model(), small_config(Method::bct), hooks);
    EXPECT_EQ(steps, 3U * (d.size() / 16U));
    EXPECT_EQ(old_model().encoder, before.encoder);
    EXPECT_EQ(old_model().classifier, before.classifier);
    EXPECT_FALSE(r.adapter.has_value());
    EXPECT_THROW(train_bct(d, old_model(), small_config(Method::dmu)), InvalidArgument);
}

TEST(TrainDmu, DisabledTermsFollowOracleTrajectory) {
    const LabeledVectorSet d = small_data();
    const TrainRun oracle = train_standalone(d, small_config(Method::oracle));
    TrainConfig c = small_config(Method::dmu);
    c.compat_coef = 0.0;
    c.fa_coef = 0.0;
    const TrainRun dmu = train_dmu(d, old_model(), c);
    EXPECT_EQ(dmu.encoder, oracle.encoder);
    EXPECT_EQ(dmu.classifier, oracle.classifier);
    ASSERT_TRUE(dmu.adapter.has_value());
}

TEST(TrainDmu, SelectiveWeightsSumToOneEveryStep) {
    const LabeledVectorSet d = small_data();
    TrainHooks hooks;
    hooks.step_options.bind_old_parameters = true;
    hooks.on_step = [](const StepInfo& s) {
        const std::vector<double>& w = s.gradients->report.weights;
        ASSERT_EQ(w.size(), 16U);
        EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-9);
        for (const Matrix& g : s.gradients->old_grads)
            for (double v : g.data()) EXPECT_EQ(v, 0.0);
    };
    const TrainRun r = train_dmu(d, old_model(), small_config(Method::dmu), hooks);
    for (const EpochRecord& e : r.trace) {
        EXPECT_GT(e.l_sbc, 0.0);
        EXPECT_GT(e.l_fa, 0.0);
    }
}

TEST(TrainDmu, BitIdenticalAcrossRuns) {
    const LabeledVectorSet d = small_data();
    for (Method m : {Method::dmu, Method::dmu_least_conf, Method::dmu_regression}) {
        const TrainRun a = train_dmu(d, old_model(), small_config(m));
        const TrainRun b = train_dmu(d, old_model(), small_config(m));
        EXPECT_EQ(a.encoder, b.encoder);
        EXPECT_EQ(a.classifier, b.classifier);
        EXPECT_EQ(*a.adapter, *b.adapter);
        for (std::size_t e = 0; e < a.trace.size(); ++e) EXPECT_EQ(a.trace[e].total, b.trace[e].total);
    }
}

TEST(TrainDmu, JointGradientIsSumOfTermGradients) {
    const LabeledVectorSet d = small_data();
    TrainConfig c = small_config(Method::dmu);
    for (const Batch& batch : batches(d, 16, 0.05, 7, 0)) {
        TrainableState base = init_state(c, d.present_labels());
        const StepOptions frozen_stats{false, false};
        ObjectiveConfig full = objective_for(c);
        TrainableState s0 = base;
        const StepGradients joint = compute_step(s0, &old_model(), batch, full, frozen_stats);

        std::vector<Matrix> summed;
        for (int term = 0; term < 3; ++term) {
            ObjectiveConfig part = full;
            part.new_coef = term == 0 ? 1.0 : 0.0;
            part.compat_coef = term == 1 ? 1.0 : 0.0;
            part.fa_coef = term == 2 ? 1.0 : 0.0;
            TrainableState s = base;
            const StepGradients g = compute_step(s, &old_model(), batch, part, frozen_stats);
            if (summed.empty()) {
                summed = g.grads;
            } else {
                for (std::size_t i = 0; i < summed.size(); ++i) axpy(summed[i], 1.0, g.grads[i]);
            }
        }
        ASSERT_EQ(summed.size(), joint.grads.size());
        for (std::size_t i = 0; i < summed.size(); ++i) EXPECT_LT(max_abs_diff(summed[i], joint.grads[i]), 1e-10);
        EXPECT_NEAR(joint.report.total, joint.report.l_new + joint.report.l_sbc + joint.report.l_fa, 1e-12);
    }
}

TEST(TrainDmu, AdapterParametersAreUpdated) {
    const LabeledVectorSet d = small_data();
    const TrainConfig c = small_config(Method::dmu);
    const TrainableState init = init_state(c, d.present_labels());
    const TrainRun r = train_dmu(d, old_model(), c);
    EXPECT_FALSE(*r.adapter == *init.adapter);
}

ExperimentConfig desk_experiment(std::uint64_t seed) {
    ExperimentConfig cfg;
    cfg.seed = seed;
    cfg.dataset = {10, 120, 16, 0.25, 0.3, 0};
    cfg.test_per_class = 30;
    cfg.query_per_class = 5;
    cfg.train = small_config(Method::oracle);
    cfg.train.encoder = {16, {64}, 16};
    cfg.train.adapter = {16, 64};
    cfg.train.epochs = 8;
    cfg.train.batch_size = 32;
    cfg.train.base_lr = 0.1;
    cfg.train.arcface = {30.0, 0.3};
    cfg.scatter_samples = 100;
    return cfg;
}

TEST(Upgrade, DeskBenchmarkOrderings) {
    const ExperimentConfig cfg = desk_experiment(11);
    const PreparedData data = prepare_data(cfg);
    const UpgradeResult r = run_upgrade(cfg, data);
    EXPECT_GT(r.m_oracle_self, r.m_old_self);
    ASSERT_EQ(r.methods.size(), 2U);
    const EvalReport& bct = r.methods[0].report;
    const EvalReport& dmu = r.methods[1].report;
    EXPECT_GT(*bct.m_cross, r.m_old_self);
    ASSERT_TRUE(dmu.m_adapted.has_value());
    EXPECT_GE(*dmu.m_adapted, *dmu.m_cross);
    EXPECT_EQ(dmu.entropy_pairs.size(), 100U);
}

TEST(Sequential, GalleryBookkeeping) {
    ExperimentConfig cfg = desk_experiment(12);
    cfg.train.epochs = 3;
    const PreparedData data = prepare_data(cfg);
    const std::vector<double> f{0.25, 0.5, 0.75};
    const SequenceResult s = sequential_upgrade(data.train, data.bench, f, {Method::bct, Method::dmu}, cfg);
    ASSERT_EQ(s.reports.size(), 4U);
    EXPECT_EQ(s.reports[0].method, Method::bct);
    EXPECT_EQ(s.reports[0].gallery_generation, 0U);
    EXPECT_EQ(s.reports[2].gallery_generation, 0U);
    EXPECT_EQ(s.reports[2].gallery_tag, "gen0");
    EXPECT_EQ(s.reports[1].gallery_generation, 1U);
    EXPECT_EQ(s.reports[3].gallery_generation, 2U);
    EXPECT_EQ(s.final_galleries[1].generation, 2U);
    // Under BCT the deployed gallery is the generation-0 gallery.
    EXPECT_EQ(s.reports[0].m_cross, s.reports[0].m_cross_first);
    EXPECT_EQ(s.reports[0].m_cross, s.reports[0].m_cross_prev);
    EXPECT_EQ(s.reports[2].m_prev_self, s.reports[0].m_self);
}

TEST(Sequential, OneGenerationReducesToSingleUpgrade) {
    ExperimentConfig cfg = desk_experiment(13);
    cfg.train.epochs = 3;
    const PreparedData data = prepare_data(cfg);
    const std::vector<double> f{0.3, 0.6};
    const SequenceResult s = sequential_upgrade(data.train, data.bench, f, {Method::dmu}, cfg);
    ASSERT_EQ(s.reports.size(), 1U);

    const auto sets = nested_fractions(data.train, f, derive_seed(cfg.seed, "nested"));
    const TrainRun old = train_standalone(sets[0], cfg.stage(Method::old_model, cfg.old_seed()));
    const TrainRun run =
        train_dmu(sets[1], old.frozen(), cfg.stage(Method::dmu, derive_seed(cfg.new_seed(), "gen", 1)));
    const EvalReport rep = evaluate_upgrade(data.bench, {&run.encoder, &old.encoder, &*run.adapter, std::nullopt},
                                            cfg.metric);
    EXPECT_EQ(s.reports[0].m_self, rep.m_self);
    EXPECT_EQ(s.reports[0].m_cross, *rep.m_adapted);
    EXPECT_EQ(s.reports[0].m_cross_prev, *rep.m_cross);
    EXPECT_EQ(s.reports[0].delta_up, upgrade_gain(*rep.m_adapted, *rep.m_old_self));
}

}  // namespace
